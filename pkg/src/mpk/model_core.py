"""Finite Markov models: validation, semigroup, resolvent and generator.

A model is either a continuous-time chain given by a sub-Markovian generator
``Q`` (off-diagonals >= 0, row sums <= 0) or a discrete-time chain given by a
sub-stochastic kernel ``P``.  The cemetery state is never stored: the row-sum
deficit is the killing rate (or killing probability) and every function is
taken to vanish there.

Discrete-time chains live on the integer time grid.  Their "generator" is
``P - I`` and their resolvent is ``sum_k exp(-alpha (k+1)) P^k = (e^alpha I - P)^-1``,
so the normalising factor that plays the role of ``alpha`` in ``alpha U_alpha``
is ``e^alpha - 1`` (see :func:`resolvent_scale`).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import jsonschema
import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import InvariantViolation, NonIntegerTime, SchemaError, SingularSystem

#: entrywise tolerance for structural model invariants
STRUCTURE_TOL = 1e-12
#: relative residual allowed for resolvent solves
RESOLVENT_RESIDUAL_TOL = 1e-10
#: condition number above which a resolvent system is rejected
MAX_CONDITION = 1e14

# Taylor degree for exp(B) with ||B||_1 <= 1/2; truncation error < 1e-19.
_TAYLOR_DEGREE = 16

MODEL_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["states", "mode", "measure"],
    "properties": {
        "states": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "mode": {"enum": ["ctmc", "dtmc"]},
        "generator": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "kernel": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "measure": {"type": "array", "items": {"type": "number"}},
        "functions": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "number"}},
        },
    },
    "allOf": [
        {
            "if": {"properties": {"mode": {"const": "ctmc"}}},
            "then": {"required": ["generator"], "not": {"required": ["kernel"]}},
        },
        {
            "if": {"properties": {"mode": {"const": "dtmc"}}},
            "then": {"required": ["kernel"], "not": {"required": ["generator"]}},
        },
    ],
}


@dataclass(frozen=True)
class StateSpace:
    """Finite state space; the cemetery lies outside ``labels``."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 1:
            raise InvariantViolation("state space must contain at least one state")
        if len(set(self.labels)) != len(self.labels):
            raise InvariantViolation("state labels must be distinct")

    @property
    def n(self) -> int:
        return len(self.labels)

    def index(self, label: str | int) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < self.n:
                raise KeyError(f"state index {label} out of range")
            return int(label)
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown state {label!r}") from None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MarkovModel:
    """A validated finite sub-Markovian model with reference measure ``measure``.

    ``matrix`` is the generator ``Q`` for ``mode == "ctmc"`` and the kernel ``P``
    for ``mode == "dtmc"``.  Arrays are stored read-only.
    """

    space: StateSpace
    mode: str
    matrix: np.ndarray
    measure: np.ndarray
    functions: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "matrix", _readonly(self.matrix))
        object.__setattr__(self, "measure", _readonly(self.measure))
        object.__setattr__(
            self, "functions", {k: _readonly(v) for k, v in dict(self.functions).items()}
        )
        _validate(self)

    @classmethod
    def ctmc(cls, Q, measure=None, labels: Sequence[str] | None = None, functions=None):
        Q = np.asarray(Q, dtype=float)
        return cls._build("ctmc", Q, measure, labels, functions)

    @classmethod
    def dtmc(cls, P, measure=None, labels: Sequence[str] | None = None, functions=None):
        P = np.asarray(P, dtype=float)
        return cls._build("dtmc", P, measure, labels, functions)

    @classmethod
    def _build(cls, mode, M, measure, labels, functions):
        M = np.atleast_2d(M)
        n = M.shape[0]
        if labels is None:
            labels = [str(i) for i in range(n)]
        if measure is None:
            measure = np.ones(n)
        return cls(StateSpace(tuple(labels)), mode, M, np.asarray(measure, dtype=float), functions or {})

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def labels(self) -> tuple[str, ...]:
        return self.space.labels

    @property
    def is_ctmc(self) -> bool:
        return self.mode == "ctmc"

    @property
    def generator(self) -> np.ndarray:
        """``Q`` for continuous time, ``P - I`` for discrete time."""
        if self.is_ctmc:
            return self.matrix
        return self.matrix - np.eye(self.n)

    @property
    def killing(self) -> np.ndarray:
        """Per-state killing rate (ctmc) or killing probability (dtmc)."""
        if self.is_ctmc:
            return np.maximum(-self.matrix.sum(axis=1), 0.0)
        return np.maximum(1.0 - self.matrix.sum(axis=1), 0.0)

    @property
    def positive_mass(self) -> np.ndarray:
        """Boolean mask of states with ``m(x) > 0``."""
        return self.measure > 0

    def function(self, name: str) -> np.ndarray:
        try:
            return self.functions[name]
        except KeyError:
            raise KeyError(f"model has no function named {name!r}") from None

    def with_measure(self, measure) -> "MarkovModel":
        return MarkovModel(self.space, self.mode, self.matrix, measure, self.functions)

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"states": list(self.labels), "mode": self.mode}
        doc["generator" if self.is_ctmc else "kernel"] = self.matrix.tolist()
        doc["measure"] = self.measure.tolist()
        doc["functions"] = {k: v.tolist() for k, v in self.functions.items()}
        return doc


def _validate(model: MarkovModel) -> None:
    n = model.space.n
    M, m = model.matrix, model.measure
    if model.mode not in ("ctmc", "dtmc"):
        raise InvariantViolation(f"mode must be 'ctmc' or 'dtmc', got {model.mode!r}")
    if M.shape != (n, n):
        raise InvariantViolation(f"matrix has shape {M.shape}, expected {(n, n)}")
    if m.shape != (n,):
        raise InvariantViolation(f"measure has length {m.shape}, expected {n}")
    if not np.all(np.isfinite(M)):
        raise InvariantViolation("matrix has non-finite entries")
    labels = model.space.labels
    if model.is_ctmc:
        off = M - np.diag(np.diag(M))
        if off.min() < 0:
            i, j = np.unravel_index(np.argmin(off), off.shape)
            raise InvariantViolation(
                f"negative off-diagonal rate Q[{labels[i]},{labels[j]}] = {M[i, j]}"
            )
        rows = M.sum(axis=1)
        if rows.max() > STRUCTURE_TOL:
            i = int(np.argmax(rows))
            raise InvariantViolation(f"row {labels[i]} of Q sums to {rows[i]} > 0")
    else:
        if M.min() < 0 or M.max() > 1:
            bad = np.argwhere((M < 0) | (M > 1))[0]
            i, j = int(bad[0]), int(bad[1])
            raise InvariantViolation(f"kernel entry P[{labels[i]},{labels[j]}] = {M[i, j]} not in [0,1]")
        rows = M.sum(axis=1)
        if rows.max() > 1 + STRUCTURE_TOL:
            i = int(np.argmax(rows))
            raise InvariantViolation(f"row {labels[i]} of P sums to {rows[i]} > 1")
    if not np.all(np.isfinite(m)) or m.min() < 0:
        i = int(np.argmin(np.where(np.isfinite(m), m, -np.inf)))
        raise InvariantViolation(f"measure entry m[{labels[i]}] = {m[i]} is negative or not finite")
    if m.max() <= 0:
        raise InvariantViolation("measure must charge at least one state")
    for name, f in model.functions.items():
        if f.shape != (n,):
            raise InvariantViolation(f"function {name!r} has length {f.shape}, expected {n}")
        if not np.all(np.isfinite(f)):
            raise InvariantViolation(f"function {name!r} has non-finite entries")


def load_model(document: Mapping[str, Any] | str | Path) -> MarkovModel:
    """Validate a model document (a parsed dict, a JSON string, or a path) and build the model."""
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        document = Path(document).read_text()
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"document is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(document, MODEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{path}: {exc.message}") from None
    states = document["states"]
    key = "generator" if document["mode"] == "ctmc" else "kernel"
    rows = document[key]
    n = len(states)
    if len(rows) != n or any(len(r) != n for r in rows):
        raise SchemaError(f"{key} must be a {n}x{n} matrix")
    if len(document["measure"]) != n:
        raise SchemaError(f"measure must have {n} entries")
    functions = {}
    for name, values in document.get("functions", {}).items():
        if len(values) != n:
            raise SchemaError(f"function {name!r} must have {n} entries")
        functions[name] = np.array(values, dtype=float)
    return MarkovModel(
        StateSpace(tuple(states)),
        document["mode"],
        np.array(rows, dtype=float),
        np.array(document["measure"], dtype=float),
        functions,
    )


def document_digest(raw: bytes) -> str:
    """Content hash of a model document as read from disk."""
    return "sha256:" + hashlib.sha256(raw).hexdigest()


def as_function(model: MarkovModel, u) -> np.ndarray:
    """Coerce ``u`` to a finite float vector of the model's length."""
    if isinstance(u, str):
        return np.array(model.function(u))
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = np.full(model.n, float(u))
    if u.shape != (model.n,):
        raise ValueError(f"function has shape {u.shape}, expected ({model.n},)")
    if not np.all(np.isfinite(u)):
        raise ValueError("function has non-finite entries")
    return u


# --- matrix exponential ---------------------------------------------------


def expm1_matrix(A: np.ndarray) -> np.ndarray:
    """Return ``exp(A) - I`` by scaling and squaring of the truncated Taylor series.

    Working with ``exp(A) - I`` instead of ``exp(A)`` keeps small increments
    ``P_h - I`` accurate when ``h`` is tiny.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    norm = np.abs(A).sum(axis=0).max() if n else 0.0
    s = 0
    if norm > 0.5:
        s = int(math.ceil(math.log2(norm / 0.5)))
    B = A / (2.0**s)
    # Horner for B (I + B/2 (I + B/3 (...)))
    I = np.eye(n)
    T = I.copy()
    for k in range(_TAYLOR_DEGREE, 1, -1):
        T = I + (B @ T) / k
    E = B @ T
    for _ in range(s):
        E = E @ E + 2.0 * E
    return E


def expm_matrix(A: np.ndarray) -> np.ndarray:
    """Matrix exponential, accurate to about 1e-12 entrywise for sub-Markovian generators."""
    A = np.asarray(A, dtype=float)
    return np.eye(A.shape[0]) + expm1_matrix(A)


def _check_time(model: MarkovModel, t: float) -> float:
    t = float(t)
    if not t >= 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    if not model.is_ctmc and t != round(t):
        raise NonIntegerTime(f"discrete-time model evaluated at non-integer time {t}")
    return t


def transition_matrix(model: MarkovModel, t: float, beta: float = 0.0) -> np.ndarray:
    """Matrix of ``exp(-beta t) P_t``."""
    t = _check_time(model, t)
    if model.is_ctmc:
        return expm_matrix(t * (model.matrix - beta * np.eye(model.n)))
    return math.exp(-beta * t) * np.linalg.matrix_power(model.matrix, int(round(t)))


def increment_matrix(model: MarkovModel, t: float, beta: float = 0.0) -> np.ndarray:
    """Matrix of ``exp(-beta t) P_t - I``, computed without cancellation in continuous time."""
    t = _check_time(model, t)
    if model.is_ctmc:
        return expm1_matrix(t * (model.matrix - beta * np.eye(model.n)))
    return transition_matrix(model, t, beta) - np.eye(model.n)


def semigroup_apply(model: MarkovModel, t: float, u, beta: float = 0.0) -> np.ndarray:
    """Return ``exp(-beta t) P_t u``; ``u`` may be a vector or a matrix of column functions."""
    u = np.asarray(u, dtype=float)
    return transition_matrix(model, t, beta) @ u


# --- resolvent and generator ---------------------------------------------


def resolvent_scale(model: MarkovModel, alpha: float) -> float:
    """The factor ``k(alpha)`` with ``k(alpha) U_alpha 1 = 1`` on conservative models.

    ``alpha`` in continuous time, ``e^alpha - 1`` in discrete time.
    """
    return float(alpha) if model.is_ctmc else math.expm1(alpha)


def _resolvent_system(model: MarkovModel, alpha: float) -> np.ndarray:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if model.is_ctmc:
        return alpha * np.eye(model.n) - model.matrix
    return math.exp(alpha) * np.eye(model.n) - model.matrix


def solve_resolvent_system(M: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Solve ``M x = u`` with the conditioning and residual guards of the resolvent."""
    cond = np.linalg.cond(M)
    if not cond <= MAX_CONDITION:
        raise SingularSystem(f"resolvent system condition number {cond:.3g} exceeds {MAX_CONDITION:g}")
    x = np.linalg.solve(M, u)
    if u.size:
        resid = np.abs(M @ x - u).max()
        if resid > RESOLVENT_RESIDUAL_TOL * np.abs(u).max():
            raise SingularSystem(f"resolvent residual {resid:.3g} exceeds tolerance")
    return x


def resolvent_apply(model: MarkovModel, alpha: float, u) -> np.ndarray:
    """Return ``U_alpha u``; ``u`` may be a vector or a matrix of column functions."""
    u = np.asarray(u, dtype=float)
    return solve_resolvent_system(_resolvent_system(model, alpha), u)


def resolvent_matrix(model: MarkovModel, alpha: float) -> np.ndarray:
    return resolvent_apply(model, alpha, np.eye(model.n))


def generator_apply(model: MarkovModel, u) -> np.ndarray:
    """Return ``L u``: ``Q u`` (ctmc) or ``(P - I) u`` (dtmc)."""
    return model.generator @ np.asarray(u, dtype=float)


# --- support-graph helpers -----------------------------------------------


def reachability(model: MarkovModel) -> np.ndarray:
    """Boolean matrix ``R[x, y]``: ``y`` reachable from ``x`` in zero or more jumps.

    This is exactly the support of ``U_1`` (and of ``P_t`` for every ``t > 0``
    in continuous time).
    """
    n = model.n
    adj = (model.matrix > 0) & ~np.eye(n, dtype=bool) if model.is_ctmc else model.matrix > 0
    R = adj | np.eye(n, dtype=bool)
    # repeated squaring of the boolean closure
    for _ in range(max(1, math.ceil(math.log2(max(n, 2)))) + 1):
        R_next = (R.astype(np.int64) @ R.astype(np.int64)) > 0
        if np.array_equal(R_next, R):
            break
        R = R_next
    return R


def communicating_classes(model: MarkovModel) -> list[np.ndarray]:
    """Strongly connected components of the jump graph, as sorted index arrays."""
    R = reachability(model)
    ncomp, labels = connected_components(R & R.T, directed=False)
    return [np.flatnonzero(labels == c) for c in range(ncomp)]


def closed_conservative_classes(model: MarkovModel, tol: float = STRUCTURE_TOL) -> list[np.ndarray]:
    """Communicating classes that are closed and carry no killing (the recurrent classes)."""
    R = reachability(model)
    out = []
    for cls in communicating_classes(model):
        mask = np.zeros(model.n, dtype=bool)
        mask[cls] = True
        closed = not np.any(R[np.ix_(cls, np.flatnonzero(~mask))])
        if closed and model.killing[cls].max() <= tol:
            out.append(cls)
    return out


def stationary_distribution(model: MarkovModel, states: np.ndarray | None = None) -> np.ndarray:
    """Left null vector of the generator restricted to ``states``, normalised to unit sum.

    Direct dense solve (null-space oracle); ``states`` should be a closed
    irreducible class.  Returns a full-length vector, zero off ``states``.
    """
    idx = np.arange(model.n) if states is None else np.asarray(states)
    G = model.generator[np.ix_(idx, idx)]
    k = len(idx)
    A = np.vstack([G.T, np.ones((1, k))])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    out = np.zeros(model.n)
    out[idx] = pi
    return out


def model_grid(model: MarkovModel, times: Sequence[float]) -> np.ndarray:
    """Map a continuous time grid onto the model's time axis.

    Discrete-time models use the distinct positive integers nearest to the grid.
    """
    times = np.asarray(times, dtype=float)
    if model.is_ctmc:
        return times
    ints = np.unique(np.maximum(1.0, np.round(times)))
    return ints


def geometric_grid(lo: float, hi: float, per_decade: int = 16) -> np.ndarray:
    """Geometric grid from ``lo`` to ``hi`` with ``per_decade`` points per factor of ten."""
    decades = math.log10(hi / lo)
    num = int(math.ceil(per_decade * decades)) + 1
    return np.geomspace(lo, hi, num)
