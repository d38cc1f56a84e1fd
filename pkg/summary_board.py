from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from pydantic import BaseModel

COLUMNS = ["Experiment", "Status", "Metric", "Value", "Expectation"]


class ExperimentOutcome(BaseModel):
    name: str
    passed: bool
    metric: str
    """Name of the headline number of the experiment."""

    value: Optional[float]
    expectation: str
    details: Dict[str, Any] = {}


def render_summary_board(outcomes: List[ExperimentOutcome]) -> pd.DataFrame:
    """One row per canned experiment, ready for CSV export."""
    if not outcomes:
        return pd.DataFrame(columns=COLUMNS)

    data = []
    for o in outcomes:
        data.append([
            o.name,
            "PASS" if o.passed else "FAIL",
            o.metric,
            o.value,
            o.expectation,
        ])
    return pd.DataFrame(data, columns=COLUMNS)


def calculate_run_stats(outcomes: List[ExperimentOutcome]) -> Tuple[int, int, bool]:
    """(passed, total, all passed)."""
    passed = sum(1 for o in outcomes if o.passed)
    return passed, len(outcomes), passed == len(outcomes)
