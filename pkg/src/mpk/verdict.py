"""Structured pass/fail reports and JSON conversion helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np


def jsonable(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays and tuples into JSON-native values.

    Non-finite floats become ``None`` so the output is strict JSON.
    """
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


@dataclass
class Verdict:
    """Outcome of one property check.

    ``worst_violation`` is signed: nonpositive (or below ``tolerance``) on a pass.
    ``witness_state``/``witness_parameter`` locate the worst violation
    (a state label and a time, rate or index, depending on the property).
    """

    property: str
    passed: bool
    worst_violation: float
    tolerance: float
    witness_state: str | None = None
    witness_parameter: float | None = None
    details: dict[str, Any] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.passed)

    def to_json(self) -> dict[str, Any]:
        return jsonable(
            {
                "property": self.property,
                "pass": bool(self.passed),
                "worst_violation": self.worst_violation,
                "witness": {"state": self.witness_state, "parameter": self.witness_parameter},
                "tolerance": self.tolerance,
                "details": self.details,
            }
        )
