import json
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from comparison import LinearGain
from dynamics import LyapunovCheckSpec, SystemModel
from errors import ConfigError
from fm_analysis import MARGIN_TOL, EnsembleSpec, FmCertificateCandidate
from local_models.counterexamples import (
    counterexample_a1_model,
    counterexample_a2_model,
    counterexample_a3_model,
)
from local_models.linear import linear_scalar_model
from local_models.lowpass import lowpass_model
from local_models.memristor import MemristorParams, memristor_model
from probes import PROBE_TOL
from signals import SignalGeneratorSpec, TimeGrid

# ==========================================
# CONFIG SECTIONS
# ==========================================

ModelLabel = Literal["lowpass", "memristor", "cex-a1", "cex-a2", "cex-a3", "linear"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Section):
    label: ModelLabel
    tau: float = Field(default=1.0, gt=0)
    """Low-pass time constant."""

    pole: float = 1.0
    """Pole of the scalar linear model."""

    memristor: MemristorParams = MemristorParams()
    output: Literal["voltage", "state"] = "voltage"
    """Memristor output: terminal voltage or internal state."""


class GridConfig(_Section):
    t0: float = 0.0
    dt: float = Field(gt=0)
    horizon: float = Field(gt=0)

    def to_grid(self) -> TimeGrid:
        return TimeGrid.from_horizon(self.horizon, self.dt, self.t0)


class EnsembleConfig(_Section):
    initial_box: List[Tuple[float, float]]
    generators: List[SignalGeneratorSpec] = Field(min_length=1)
    pair_count: int = Field(ge=1)
    seed: int = Field(default=0, ge=0)
    input_mode: Literal["independent", "common"] = "independent"


class FitConfig(_Section):
    gamma_slopes: Optional[List[float]] = None
    """Linear gain family searched for each trial rate."""

    rate_floor: Optional[float] = Field(default=None, gt=0)


class BudgetConfig(_Section):
    r: float = Field(gt=0)
    t_star: float = Field(ge=0)


class ProbeConfig(_Section):
    tail_start: Optional[float] = None
    period: Optional[float] = Field(default=None, gt=0)
    periods: int = Field(default=8, ge=2)
    burn_in: float = Field(default=0.0, ge=0)


class ApproximatorConfig(_Section):
    n_filters: int = Field(default=8, ge=1)
    degree: int = Field(default=2, ge=0)
    ridge: float = Field(default=1e-6, ge=0)
    ridge_grid: Optional[List[Annotated[float, Field(gt=0)]]] = None
    """Ridge candidates scored on held-out training signals; overrides ridge when set."""

    feedthrough: bool = False
    rate_min: float = Field(default=0.1, gt=0)
    rate_max: float = Field(default=10.0, gt=0)
    normalize: bool = True
    stride: int = Field(default=1, ge=1)
    validation_fraction: float = Field(default=0.2, gt=0, lt=1)
    model_path: Optional[str] = None
    """Saved cascade JSON, read by approx-eval."""


class OutputConfig(_Section):
    dir: str = "out"


class Tolerances(_Section):
    margin: float = Field(default=MARGIN_TOL, ge=0)
    probe: float = Field(default=PROBE_TOL, gt=0)


class ExperimentConfig(_Section):
    model: Optional[ModelConfig] = None
    grid: Optional[GridConfig] = None
    input: Optional[SignalGeneratorSpec] = None
    input_b: Optional[SignalGeneratorSpec] = None
    """Second input of a probe pair; defaults to the zero signal."""

    x0: Optional[List[float]] = None
    x0_b: Optional[List[float]] = None
    ensemble: Optional[EnsembleConfig] = None
    candidate: Optional[FmCertificateCandidate] = None
    fit: FitConfig = FitConfig()
    budget: Optional[BudgetConfig] = None
    probe: ProbeConfig = ProbeConfig()
    lyapunov: Optional[LyapunovCheckSpec] = None
    approximator: ApproximatorConfig = ApproximatorConfig()
    output: OutputConfig = OutputConfig()
    seed: Optional[int] = Field(default=None, ge=0)
    """Overrides the ensemble, Lyapunov and repro seeds when set; input generators keep their own."""

    tolerances: Tolerances = Tolerances()
    workers: int = Field(default=1, ge=1)
    substeps: int = Field(default=1, ge=1)

    def require(self, *sections: str) -> None:
        missing = [s for s in sections if getattr(self, s) is None]
        if missing:
            raise ConfigError(f"config is missing section(s): {', '.join(missing)}")

    def ensemble_spec(self) -> EnsembleSpec:
        self.require("ensemble", "grid")
        e = self.ensemble
        return EnsembleSpec(
            initial_box=e.initial_box,
            generators=e.generators,
            pair_count=e.pair_count,
            grid=self.grid.to_grid(),
            seed=self.seed if self.seed is not None else e.seed,
            input_mode=e.input_mode,
            substeps=self.substeps,
        )

    def lyapunov_spec(self) -> LyapunovCheckSpec:
        self.require("lyapunov")
        if self.seed is None:
            return self.lyapunov
        return self.lyapunov.model_copy(update={"seed": self.seed})

    def gamma_family(self) -> Optional[List[LinearGain]]:
        if self.fit.gamma_slopes is None:
            return None
        return [LinearGain(slope=s) for s in self.fit.gamma_slopes]


# ==========================================
# PARSING
# ==========================================

def parse_config(text: str, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Parses a JSON experiment document into a validated config."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed_override is not None:
        raw["seed"] = seed_override
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config:\n{exc}") from exc


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, seed_override)


def build_model(cfg: ModelConfig) -> SystemModel:
    """Model zoo lookup by label."""
    if cfg.label == "lowpass":
        return lowpass_model(cfg.tau)
    if cfg.label == "memristor":
        return memristor_model(cfg.memristor, cfg.output)
    if cfg.label == "cex-a1":
        return counterexample_a1_model()
    if cfg.label == "cex-a2":
        return counterexample_a2_model()
    if cfg.label == "cex-a3":
        return counterexample_a3_model()
    return linear_scalar_model(cfg.pole)
