"""Sub-invariance, the m-dual resolvent, invariant functions and sets.

Comparisons are m-a.e.: states with ``m(x) = 0`` are excluded everywhere and
listed in verdict details.  When ``m`` is sub-invariant the positive-mass set
``S`` is closed (no jumps from ``S`` to null states), so the dual generator
``Qhat = D_m^-1 Q^T D_m`` on ``S`` is sub-Markovian and its resolvent is the
weak dual of ``U_alpha`` restricted to ``S``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import InconsistentVerdict, InputNotInvariant, NotSubInvariant
from .model_core import (
    STRUCTURE_TOL,
    MarkovModel,
    as_function,
    reachability,
    resolvent_matrix,
    resolvent_scale,
    solve_resolvent_system,
)
from .verdict import Verdict

INVARIANCE_ALPHAS = (0.5, 1.0, 2.0)
INVARIANCE_TOL = 1e-10
SUITE_TOL = 1e-8


def _excluded(model: MarkovModel) -> list[str]:
    return [model.labels[i] for i in np.flatnonzero(~model.positive_mass)]


def check_subinvariant(model: MarkovModel, tol: float = STRUCTURE_TOL) -> Verdict:
    """``m^T Q <= 0`` (ctmc) or ``m^T P <= m^T`` (dtmc), entrywise."""
    col = model.measure @ model.generator
    j = int(np.argmax(col))
    scale = tol * max(1.0, float(model.measure.max()))
    return Verdict(
        property="subinvariant",
        passed=bool(col[j] <= scale),
        worst_violation=float(col[j]),
        tolerance=scale,
        witness_state=model.labels[j],
        details={"column_sums": col.tolist()},
    )


@dataclass(frozen=True, eq=False)
class DualModel:
    """The m-dual of ``base`` on its positive-mass states ``support``.

    ``generator`` is ``D_m^-1 L^T D_m`` on ``support``; in discrete time
    ``kernel`` is ``D_m^-1 P^T D_m``.
    """

    base: MarkovModel
    support: np.ndarray
    generator: np.ndarray
    kernel: np.ndarray | None = None
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.base.n


def dual_model(model: MarkovModel, require_subinvariant: bool = True) -> DualModel:
    if require_subinvariant:
        v = check_subinvariant(model)
        if not v.passed:
            raise NotSubInvariant(
                f"m^T L has positive entry {v.worst_violation:.3g} at state {v.witness_state}"
            )
    S = np.flatnonzero(model.positive_mass)
    m = model.measure[S]
    G = model.generator[np.ix_(S, S)]
    Ghat = (G.T * m[None, :]) / m[:, None]
    kernel = None
    if not model.is_ctmc:
        P = model.matrix[np.ix_(S, S)]
        kernel = (P.T * m[None, :]) / m[:, None]
    return DualModel(model, S, Ghat, kernel, {"excluded_states": _excluded(model)})


def _embed(dual: DualModel, x_S: np.ndarray) -> np.ndarray:
    out = np.zeros((dual.n,) + x_S.shape[1:])
    out[dual.support] = x_S
    return out


def dual_resolvent_apply(dual: DualModel, alpha: float, f) -> np.ndarray:
    """``Uhat_alpha f`` on the positive-mass states (zero on null states)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    f = np.asarray(f, dtype=float)
    fS = f[dual.support]
    k = len(dual.support)
    if dual.base.is_ctmc:
        M = alpha * np.eye(k) - dual.generator
    else:
        M = math.exp(alpha) * np.eye(k) - dual.kernel
    return _embed(dual, solve_resolvent_system(M, fS))


def dual_resolvent_matrix(dual: DualModel, alpha: float) -> np.ndarray:
    """Full ``n x n`` matrix of ``Uhat_alpha`` (rows/columns of null states are zero)."""
    k = len(dual.support)
    inner = dual_resolvent_apply(dual, alpha, _embed(dual, np.eye(k)))[dual.support]
    out = np.zeros((dual.n, dual.n))
    out[np.ix_(dual.support, dual.support)] = inner
    return out


def duality_residual(dual: DualModel, alpha: float, f, g) -> float:
    """``|<f, U_a g>_m - <g, Uhat_a f>_m|`` over the positive-mass states."""
    from .model_core import resolvent_apply

    model = dual.base
    S = dual.support
    m = model.measure
    f, g = np.asarray(f, dtype=float), np.asarray(g, dtype=float)
    fm = np.where(model.positive_mass, f, 0.0)
    gm = np.where(model.positive_mass, g, 0.0)
    lhs = float(np.sum((fm * resolvent_apply(model, alpha, gm) * m)[S]))
    rhs = float(np.sum((gm * dual_resolvent_apply(dual, alpha, fm) * m)[S]))
    return abs(lhs - rhs)


# --- invariant functions and sets ----------------------------------------


def _invariance_defect(U: np.ndarray, v: np.ndarray, S: np.ndarray) -> tuple[float, int, int]:
    """Max over x, j in S of ``|U(x, j) (v(j) - v(x))|`` with its location."""
    US = U[np.ix_(S, S)]
    vS = v[S]
    D = np.abs(US * (vS[None, :] - vS[:, None]))
    x, j = np.unravel_index(int(np.argmax(D)), D.shape)
    return float(D[x, j]), int(S[x]), int(S[j])


def is_U_invariant(model: MarkovModel, v, tol: float = INVARIANCE_TOL, dual: bool = False) -> Verdict:
    """Test ``U_a(v f) = v U_a f`` m-a.e. for indicator ``f`` and ``a`` in {1/2, 1, 2}.

    By linearity the indicators of positive-mass states suffice.  With
    ``dual=True`` the dual resolvent is tested instead.
    """
    v = as_function(model, v)
    S = np.flatnonzero(model.positive_mass)
    scale = tol * (1.0 + float(np.abs(v[S]).max()))
    worst, where = -1.0, (int(S[0]), int(S[0]), INVARIANCE_ALPHAS[0])
    dm = dual_model(model) if dual else None
    for a in INVARIANCE_ALPHAS:
        U = dual_resolvent_matrix(dm, a) if dual else resolvent_matrix(model, a)
        U = resolvent_scale(model, a) * U
        d, x, j = _invariance_defect(U, v, S)
        if d > worst:
            worst, where = d, (x, j, a)
    return Verdict(
        property="dual_invariant" if dual else "U_invariant",
        passed=worst <= scale,
        worst_violation=worst,
        tolerance=scale,
        witness_state=model.labels[where[0]],
        witness_parameter=where[2],
        details={"column_state": model.labels[where[1]], "excluded_states": _excluded(model)},
    )


@dataclass
class InvariancePartition:
    """Atoms of the invariant sigma-algebra on the positive-mass states."""

    blocks: list[np.ndarray]
    labels: list[list[str]]
    excluded: list[str]

    def block_of(self, state: int) -> int:
        for b, idx in enumerate(self.blocks):
            if state in idx:
                return b
        raise KeyError(state)

    def indicator(self, b: int, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.blocks[b]] = 1.0
        return out

    def to_json(self) -> dict[str, Any]:
        return {"blocks": self.labels, "excluded_states": self.excluded}


def invariant_partition(model: MarkovModel, certify: bool = True) -> InvariancePartition:
    """Finest partition of the positive-mass states into invariant atoms.

    ``1_A`` is invariant iff ``U_1`` has no support between ``A`` and its
    complement (in either direction), so the atoms are the connected
    components of the undirected support graph of ``U_1`` restricted to ``S``.
    """
    S = np.flatnonzero(model.positive_mass)
    R = reachability(model)[np.ix_(S, S)]
    ncomp, lab = connected_components(R, directed=True, connection="weak")
    blocks = [S[lab == c] for c in range(ncomp)]
    blocks.sort(key=lambda b: int(b[0]))
    part = InvariancePartition(
        blocks, [[model.labels[i] for i in b] for b in blocks], _excluded(model)
    )
    if certify:
        for b in range(len(blocks)):
            if not is_U_invariant(model, part.indicator(b, model.n)).passed:
                raise InconsistentVerdict(f"atom {part.labels[b]} fails the invariance identity")
    return part


def lattice_closure_check(model: MarkovModel, u, v, c: float = -2.5) -> Verdict:
    """Check that min, max, sum and a scalar multiple of invariant ``u``, ``v`` stay invariant."""
    u, v = as_function(model, u), as_function(model, v)
    for name, w in (("u", u), ("v", v)):
        if not is_U_invariant(model, w).passed:
            raise InputNotInvariant(f"input {name} is not U-invariant")
    checks = {
        "min": np.minimum(u, v),
        "max": np.maximum(u, v),
        "sum": u + v,
        "scaled": c * u,
    }
    results = {k: is_U_invariant(model, w) for k, w in checks.items()}
    worst_key = max(results, key=lambda k: results[k].worst_violation)
    return Verdict(
        property="invariant_lattice",
        passed=all(r.passed for r in results.values()),
        worst_violation=results[worst_key].worst_violation,
        tolerance=results[worst_key].tolerance,
        witness_state=results[worst_key].witness_state,
        details={k: bool(r.passed) for k, r in results.items()},
    )


# --- the five-way equivalence ----------------------------------------------


@dataclass
class EquivalenceMatrix:
    """Conditions i)-v) for one function, with residuals and conservativity flags.

    i)   alpha U_a u = u                 ii) alpha Uhat_a u = u
    iii) u is U-invariant                iv) U_a u = u U_a 1 and Uhat_a u = u Uhat_a 1
    v)   u is measurable w.r.t. the invariant sets (constant on every atom)
    """

    conditions: dict[str, bool]
    residuals: dict[str, float]
    conservative: bool
    co_conservative: bool
    regime: str
    tolerance: float

    def structural_ok(self) -> bool:
        c = self.conditions
        ok = c["i"] == c["ii"] and c["iii"] == c["iv"] == c["v"] and (not c["i"] or c["iii"])
        if self.conservative or self.co_conservative:
            ok = ok and len(set(c.values())) == 1
        return ok

    def to_json(self) -> dict[str, Any]:
        return {
            **{k: bool(v) for k, v in self.conditions.items()},
            "residuals": self.residuals,
            "conservative": self.conservative,
            "co_conservative": self.co_conservative,
            "regime": self.regime,
            "recurrent_clause": "not applicable on a finite state space",
            "tolerance": self.tolerance,
        }


def equivalence_suite(model: MarkovModel, u, alpha: float = 1.0, tol: float = SUITE_TOL) -> EquivalenceMatrix:
    """Evaluate conditions i)-v) m-a.e. and assert their implication structure.

    Raises :class:`InconsistentVerdict` if the structure fails
    (i <=> ii, iii <=> iv <=> v, i => iii, all equal under conservativity).
    """
    u = as_function(model, u)
    dual = dual_model(model)  # raises NotSubInvariant
    S = dual.support
    k = resolvent_scale(model, alpha)
    scale = tol * (1.0 + float(np.abs(u[S]).max()))
    one = np.ones(model.n)

    from .model_core import resolvent_apply

    Uu = resolvent_apply(model, alpha, u)
    U1 = resolvent_apply(model, alpha, one)
    Vu = dual_resolvent_apply(dual, alpha, u)
    V1 = dual_resolvent_apply(dual, alpha, one)

    r = {
        "i": float(np.abs(k * Uu - u)[S].max()),
        "ii": float(np.abs(k * Vu - u)[S].max()),
        "iii": is_U_invariant(model, u).worst_violation,
        "iv": float(max(np.abs(Uu - u * U1)[S].max(), np.abs(Vu - u * V1)[S].max()) * k),
    }
    part = invariant_partition(model, certify=False)
    r["v"] = float(max(np.ptp(u[b]) for b in part.blocks))
    conditions = {key: val <= scale for key, val in r.items()}
    conservative = bool(np.abs(k * U1 - 1)[S].max() <= tol)
    co_conservative = bool(np.abs(k * V1 - 1)[S].max() <= tol)
    regime = "conservative" if conservative else ("killed" if model.killing[S].max() > 0 else "sub-Markovian")
    em = EquivalenceMatrix(conditions, r, conservative, co_conservative, regime, scale)
    if not em.structural_ok():
        raise InconsistentVerdict(f"equivalence structure violated: {conditions}")
    return em


# --- finite-dimensional Dirichlet form ------------------------------------


def _require_form_measure(model: MarkovModel) -> None:
    if not model.positive_mass.all():
        raise NotSubInvariant("the Dirichlet form needs a measure with full support")
    if not check_subinvariant(model).passed:
        raise NotSubInvariant("the Dirichlet form needs a sub-invariant measure")


def dirichlet_form(model: MarkovModel, u, v) -> float:
    """``E(u, v) = <-L u, v>_m``."""
    _require_form_measure(model)
    u, v = as_function(model, u), as_function(model, v)
    return float(np.sum(-(model.generator @ u) * v * model.measure))


def dirichlet_bound_constant(model: MarkovModel, u, F=None) -> float:
    """Smallest ``c`` with ``E(u, v) <= c max|v|`` for all ``v`` vanishing off ``F``.

    ``E(u, .)`` is linear, so the supremum over the unit ball is attained at
    sign vectors: ``c = sum_{x in F} |(-L u)(x)| m(x)``.
    """
    _require_form_measure(model)
    u = as_function(model, u)
    mask = np.zeros(model.n, dtype=bool)
    if F is None:
        mask[:] = True
    else:
        mask[[model.space.index(x) for x in F]] = True
    return float(np.sum(np.abs(model.generator @ u)[mask] * model.measure[mask]))
