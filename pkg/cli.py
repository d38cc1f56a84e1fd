"""Command-line front end.

    python cli.py <command> --config CONFIG.json [--out DIR] [--seed N] [--quiet]

stdout carries exactly one line of JSON status; logs go to stderr.
Exit codes: 0 pass, 1 falsified or violation found, 2 config/domain error,
3 numeric error or divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from approximator import CascadeApproximator, approx_eval, nrmse, train_approximator
from config_parser import ExperimentConfig, build_model, load_config
from dynamics import integrate, lyapunov_sample_check
from errors import EXIT_FALSIFIED, EXIT_PASS, ConfigError, LabError, exit_code_for
from fm_analysis import budget_experiment, falsify_fm, fit_exponential_rate
from probes import cico_probe, pipo_probe
from repro import ReproSettings, run_repro, write_json
from signals import ConstantSpec, SampledSignal, generate_signal
from summary_board import calculate_run_stats

logger = logging.getLogger("fmlab")

Status = Dict[str, Any]
CommandResult = Tuple[int, Status]


# === Helpers ===
def _input_pair(cfg: ExperimentConfig) -> Tuple[SampledSignal, SampledSignal]:
    cfg.require("grid", "input")
    grid = cfg.grid.to_grid()
    u_a = generate_signal(cfg.input, grid)
    spec_b = cfg.input_b or ConstantSpec(level=0.0, dim=u_a.dim)
    return u_a, generate_signal(spec_b, grid)


def _x0(cfg: ExperimentConfig, model, which: str = "x0") -> np.ndarray:
    value = getattr(cfg, which)
    if value is None:
        value = getattr(cfg, "x0") or [0.0] * model.state_dim
    x0 = np.asarray(value, dtype=float)
    if x0.shape != (model.state_dim,):
        raise ConfigError(f"{which} needs {model.state_dim} entries for model {model.label}")
    return model.pin(x0)


def _verdict(passed: bool) -> int:
    return EXIT_PASS if passed else EXIT_FALSIFIED


# === Commands ===
def cmd_simulate(cfg: ExperimentConfig, out: Path) -> CommandResult:
    cfg.require("model", "grid", "input")
    model = build_model(cfg.model)
    u = generate_signal(cfg.input, cfg.grid.to_grid())
    traj = integrate(model, _x0(cfg, model), u, cfg.substeps)
    path = out / "trajectory.csv"
    traj.to_csv(path)
    return EXIT_PASS, {
        "terminal_state": traj.states[-1].tolist(),
        "terminal_output": traj.outputs.values[-1].tolist(),
        "csv": str(path),
    }


def cmd_fm(cfg: ExperimentConfig, out: Path) -> CommandResult:
    cfg.require("model", "candidate")
    report = falsify_fm(build_model(cfg.model), cfg.candidate, cfg.ensemble_spec(),
                        cfg.tolerances.margin, cfg.workers)
    write_json(out / "fm_report.json", report.model_dump(mode="json", by_alias=True))
    witness = report.witness.model_dump() if report.witness else None
    return _verdict(report.passed), {"pass": report.passed, "global_min_margin": report.global_min_margin,
                                     "witness": witness}


def cmd_kernel_fit(cfg: ExperimentConfig, out: Path) -> CommandResult:
    cfg.require("model")
    result = fit_exponential_rate(build_model(cfg.model), cfg.ensemble_spec(), cfg.gamma_family(),
                                  cfg.tolerances.margin, cfg.fit.rate_floor, cfg.workers)
    write_json(out / "fit_report.json", result.model_dump(mode="json", by_alias=True))
    gamma = result.gamma_fitted.model_dump() if result.gamma_fitted else None
    return _verdict(result.found), {"found": result.found, "message": result.message,
                                    "rate_hat": result.rate_hat, "gamma": gamma}


def cmd_budget(cfg: ExperimentConfig, out: Path) -> CommandResult:
    cfg.require("model", "candidate", "budget")
    report = budget_experiment(build_model(cfg.model), cfg.candidate, cfg.budget.r, cfg.budget.t_star,
                               cfg.ensemble_spec(), cfg.tolerances.margin, cfg.workers)
    write_json(out / "budget_report.json", report.model_dump(mode="json"))
    return _verdict(report.passed), {"pass": report.passed, "min_post_margin": report.min_post_margin,
                                     "clipped_fraction": report.clipped_fraction}


def cmd_cico(cfg: ExperimentConfig, out: Path) -> CommandResult:
    cfg.require("model")
    if cfg.probe.tail_start is None:
        raise ConfigError("cico needs probe.tail_start")
    model = build_model(cfg.model)
    u_a, u_b = _input_pair(cfg)
    result = cico_probe(model, (_x0(cfg, model), _x0(cfg, model, "x0_b")), u_a, u_b,
                        cfg.probe.tail_start, cfg.tolerances.probe, cfg.substeps)
    write_json(out / "cico_report.json", result.model_dump(mode="json"))
    return _verdict(result.converged), result.model_dump(mode="json")


def cmd_pipo(cfg: ExperimentConfig, out: Path) -> CommandResult:
    cfg.require("model", "grid", "input")
    if cfg.probe.period is None:
        raise ConfigError("pipo needs probe.period")
    model = build_model(cfg.model)
    u = generate_signal(cfg.input, cfg.grid.to_grid())
    result = pipo_probe(model, _x0(cfg, model), u, cfg.probe.period, cfg.probe.periods,
                        cfg.probe.burn_in, cfg.substeps)
    result.limit_waveform().to_csv(out / "limit_waveform.csv")
    write_json(out / "pipo_report.json", result.model_dump(mode="json"))
    entrained = result.period_map_gaps[-1] < cfg.tolerances.probe
    return _verdict(entrained), {"entrained": entrained, "gaps": result.period_map_gaps,
                                 "limit_amplitude": result.limit_amplitude, "phase_lag": result.phase_lag}


def cmd_iss_sample(cfg: ExperimentConfig, out: Path) -> CommandResult:
    cfg.require("model")
    report = lyapunov_sample_check(build_model(cfg.model), cfg.lyapunov_spec())
    write_json(out / "lyapunov_report.json", report.model_dump(mode="json"))
    return _verdict(report.passed), {"violations": report.violation_count, "samples": report.samples,
                                     "admissible": report.admissible,
                                     "first_violation_index": report.first_violation_index}


def cmd_approx_train(cfg: ExperimentConfig, out: Path) -> CommandResult:
    cfg.require("model")
    a = cfg.approximator
    model = build_model(cfg.model)
    cascade = train_approximator(
        model, _x0(cfg, model).tolist(), cfg.ensemble_spec(), a.n_filters, a.degree, a.ridge,
        a.feedthrough, a.rate_min, a.rate_max, a.normalize, a.stride, a.validation_fraction, a.ridge_grid,
    )
    path = Path(a.model_path) if a.model_path else out / "cascade.json"
    cascade.save(path)
    return EXIT_PASS, {"model_path": str(path), "train_nrmse": cascade.train_nrmse, "ridge": cascade.ridge,
                       "val_nrmse": cascade.val_nrmse, "screen_passed": cascade.screen.passed}


def cmd_approx_eval(cfg: ExperimentConfig, out: Path) -> CommandResult:
    cfg.require("grid", "input")
    if cfg.approximator.model_path is None:
        raise ConfigError("approx-eval needs approximator.model_path")
    try:
        cascade = CascadeApproximator.load(cfg.approximator.model_path)
    except (OSError, ValidationError) as exc:
        raise ConfigError(f"cannot load cascade: {exc}") from exc
    u = generate_signal(cfg.input, cfg.grid.to_grid())
    y_hat = approx_eval(cascade, u)
    y_hat.to_csv(out / "approx_output.csv")
    status: Status = {"csv": str(out / "approx_output.csv")}
    if cfg.model is not None:
        model = build_model(cfg.model)
        x0 = cascade.x0 or _x0(cfg, model)
        y = integrate(model, x0, u, cfg.substeps).outputs.values
        status["nrmse"] = nrmse(y_hat.values, y)
    return EXIT_PASS, status


def cmd_repro(cfg: Optional[ExperimentConfig], out: Path) -> CommandResult:
    settings = ReproSettings()
    if cfg is not None:
        settings = settings.model_copy(update={"workers": cfg.workers,
                                               "seed": cfg.seed if cfg.seed is not None else 0})
    outcomes = run_repro(out, settings)
    _, _, passed = calculate_run_stats(outcomes)
    return _verdict(passed), {"pass": passed,
                              "experiments": {o.name: o.passed for o in outcomes},
                              "out": str(out)}


COMMANDS: Dict[str, Callable[[ExperimentConfig, Path], CommandResult]] = {
    "simulate": cmd_simulate,
    "fm": cmd_fm,
    "kernel-fit": cmd_kernel_fit,
    "budget": cmd_budget,
    "cico": cmd_cico,
    "pipo": cmd_pipo,
    "iss-sample": cmd_iss_sample,
    "approx-train": cmd_approx_train,
    "approx-eval": cmd_approx_eval,
    "repro": cmd_repro,
}


# === Entry point ===
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmlab", description="Fading-memory numerical lab")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--out", help="output directory (overrides output.dir)")
    parser.add_argument("--seed", type=int, help="override the ensemble, Lyapunov and repro seeds")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        cfg = None
        if args.config:
            cfg = load_config(args.config, args.seed)
        elif args.command != "repro":
            raise ConfigError(f"{args.command} needs --config")
        elif args.seed is not None:
            cfg = ExperimentConfig(seed=args.seed)
        out = Path(args.out or (cfg.output.dir if cfg else "out"))
        out.mkdir(parents=True, exist_ok=True)
        code, status = COMMANDS[args.command](cfg, out)
    except (LabError, ValidationError, ValueError, ArithmeticError) as exc:
        code = exit_code_for(exc)
        logger.error("[%s] %s", args.command, exc)
        status = {"error": type(exc).__name__, "message": str(exc)}
    except Exception as exc:
        # never report an unexpected failure with a verdict code
        code = exit_code_for(exc)
        logger.exception("[%s] unexpected failure", args.command)
        status = {"error": type(exc).__name__, "message": str(exc)}
    status = {"command": args.command, "exit_code": code, **status}
    print(json.dumps(status, sort_keys=True, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
