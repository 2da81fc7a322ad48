"""Variation of ``exp(-beta t) u(X_t)`` along partitions, and quasimartingale criteria.

For a partition ``0 = t_0 < ... < t_n`` the analytic variation is

    V_tau(u) = sum_i P^b_{t_{i-1}} |u - P^b_{t_i - t_{i-1}} u| + P^b_{t_n} |u|

where ``P^b_t = exp(-beta t) P_t``.  It is evaluated from the inside out,
``w_n = |u|``, ``w_{i-1} = |u - P^b_{d_i} u| + P^b_{d_i} w_i``, and on uniform
grids by binary doubling of the geometric sum, so very fine dyadic levels cost
``O(log n)`` matrix products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import FamilyNotStable, HorizonTooShort, NonIntegerTime, NotSubInvariant, SupportGap
from .excessive import rao_decompose, time_grid
from .model_core import (
    MarkovModel,
    as_function,
    closed_conservative_classes,
    increment_matrix,
    model_grid,
    reachability,
    resolvent_apply,
    semigroup_apply,
    transition_matrix,
)
from .verdict import Verdict

CAUCHY_TOL = 1e-6
TAIL_TOL = 1e-6
BOUND_TOL = 1e-8
MONOTONE_TOL = 1e-10
MAX_HORIZON = 2.0**10
DEFAULT_LEVELS = 40


@dataclass(frozen=True)
class Partition:
    """Finite partition ``0 = t_0 < t_1 < ... < t_n`` of the time axis."""

    times: tuple[float, ...]

    def __post_init__(self):
        t = tuple(float(x) for x in self.times)
        if not t or t[0] != 0.0:
            raise ValueError("a partition must start at 0")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("partition times must be strictly increasing")
        if not all(math.isfinite(x) for x in t):
            raise ValueError("partition times must be finite")
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return len(self.times)

    def is_subset_of(self, other) -> bool:
        return set(self.times) <= set(other.times)


@dataclass(frozen=True)
class UniformPartition:
    """Partition ``{j h : 0 <= j <= count}``; times are implicit since dyadic levels get huge."""

    step: float
    count: int

    def __post_init__(self):
        if not self.step > 0 or self.count < 1:
            raise ValueError("uniform partition needs step > 0 and count >= 1")

    def __len__(self) -> int:
        return self.count + 1

    @property
    def horizon(self) -> float:
        return self.step * self.count

    @property
    def times(self) -> tuple[float, ...]:
        return tuple(j * self.step for j in range(self.count + 1))

    def materialize(self) -> Partition:
        return Partition(self.times)


@dataclass(frozen=True)
class AdmissibleSequence:
    """Dyadic partitions ``tau_k = {j 2^-k : 0 <= j <= T 2^k}``, ``k = 1..levels``.

    ``certificate`` records the three admissibility clauses (increasing,
    dense union, shift stability) as checked by :func:`dyadic_sequence`.
    """

    horizon: float
    levels: int
    certificate: dict[str, Any] = field(default_factory=dict, compare=False)

    def level(self, k: int) -> UniformPartition:
        if not 1 <= k <= self.levels:
            raise IndexError(f"level {k} outside 1..{self.levels}")
        return UniformPartition(2.0**-k, math.floor(self.horizon * 2**k))

    def __iter__(self):
        return (self.level(k) for k in range(1, self.levels + 1))


def _dyadic_level_exact(T: Fraction, k: int) -> set[Fraction]:
    step = Fraction(1, 2**k)
    return {j * step for j in range(int(T / step) + 1)}


def dyadic_sequence(horizon: float, levels: int) -> AdmissibleSequence:
    """Build the dyadic admissible sequence on ``[0, horizon]``.

    Level ``k`` holds the points ``j 2^-k <= horizon``, so ``horizon >= 1/2``
    is needed for level 1 to contain a step.  The admissibility clauses are
    checked in exact rational arithmetic on the first few levels; they hold for
    all levels since ``j 2^-k = 2j 2^-(k+1)`` and dyadic rationals are closed
    under addition.
    """
    if not horizon >= 0.5 or levels < 1:
        raise ValueError("need horizon >= 1/2 and levels >= 1")
    # the clauses are scale free, so a bounded window keeps the exact check cheap
    T = min(Fraction(horizon), Fraction(2))
    shown = min(levels, 4)
    sets = [_dyadic_level_exact(T, k) for k in range(1, shown + 1)]
    increasing = all(a <= b for a, b in zip(sets, sets[1:]))

    def dyadic(x: Fraction) -> bool:
        return x.denominator & (x.denominator - 1) == 0

    shift_stable = all(dyadic(r + s) for r in sets[-1] for s in sets[0])
    cert = {
        "increasing": increasing,
        "dense_union": "mesh 2^-k -> 0",
        "shift_stable": shift_stable,
        "checked_levels": shown,
        "checked_window": float(T),
    }
    return AdmissibleSequence(float(horizon), int(levels), cert)


# --- the variation functional ---------------------------------------------


def _geometric_doubling(D: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(S, A^n - I)`` with ``A = I + D`` and ``S = I + A + ... + A^{n-1}``.

    Powers are carried as ``A^m - I`` so that a tiny increment ``D`` is never
    rounded against the identity; fine partitions depend on this.
    """
    k = D.shape[0]
    S_acc, E_acc = np.zeros((k, k)), np.zeros((k, k))  # accumulated sum, power minus I
    S_blk, E_blk = np.eye(k), D.copy()  # block of length 2^j
    while n:
        if n & 1:
            S_acc = S_acc + S_blk + E_acc @ S_blk
            E_acc = E_acc + E_blk + E_acc @ E_blk
        n >>= 1
        if n:
            S_blk = 2.0 * S_blk + E_blk @ S_blk
            E_blk = 2.0 * E_blk + E_blk @ E_blk
    return S_acc, E_acc


def _dtmc_partition_check(model: MarkovModel, times) -> None:
    if not model.is_ctmc:
        for t in times:
            if t != round(t):
                raise NonIntegerTime(f"discrete-time partition point {t} is not an integer")


def variation_on_partition(model: MarkovModel, u, beta: float, tau: Partition | UniformPartition) -> np.ndarray:
    """Evaluate ``V^beta_tau(u)`` entrywise."""
    u = as_function(model, u)
    if isinstance(tau, UniformPartition):
        _dtmc_partition_check(model, [tau.step])
        D = increment_matrix(model, tau.step, beta)
        g = np.abs(D @ u)
        S, En = _geometric_doubling(D, tau.count)
        absu = np.abs(u)
        return S @ g + absu + En @ absu
    times = tau.times
    _dtmc_partition_check(model, times)
    cache: dict[float, np.ndarray] = {}
    w = np.abs(u)
    for a, b in zip(times[-2::-1], times[:0:-1]):
        d = b - a
        if d not in cache:
            cache[d] = increment_matrix(model, d, beta)
        D = cache[d]
        w = np.abs(D @ u) + w + D @ w
    return w


@dataclass
class VariationReport:
    beta: float
    horizon: float
    levels: list[int]
    values: list[np.ndarray]
    sup_estimate: np.ndarray
    converged: np.ndarray
    tail: np.ndarray
    tail_flagged: bool
    is_quasimartingale: bool
    monotonicity_violation: float
    bound_check: dict[str, Any] | None = None

    def to_json(self, labels=None) -> dict[str, Any]:
        return {
            "beta": self.beta,
            "horizon": self.horizon,
            "levels": self.levels,
            "per_level": [v.tolist() for v in self.values],
            "sup_estimate": self.sup_estimate.tolist(),
            "converged": self.converged.tolist(),
            "tail": self.tail.tolist(),
            "tail_flagged": self.tail_flagged,
            "quasimartingale": self.is_quasimartingale,
            "monotonicity_violation": self.monotonicity_violation,
            "bound_check": self.bound_check,
            "note": "sup over the admissible sequence; the unrestricted sup over all partitions is bounded above by u1 + u2",
        }


def choose_horizon(model: MarkovModel, u, beta: float, start: float = 1.0) -> tuple[float, np.ndarray, bool]:
    """Double ``T`` (up to ``MAX_HORIZON``) until ``exp(-beta T) P_T |u|`` is below ``TAIL_TOL * max|u|``.

    Returns ``(T, tail, flagged)``.  With ``beta > 0`` an unresolved tail raises
    :class:`HorizonTooShort`; with ``beta = 0`` it is flagged and reported.
    """
    u = as_function(model, u)
    absu = np.abs(u)
    limit = TAIL_TOL * float(absu.max())
    T = float(start)
    while True:
        tail = semigroup_apply(model, T, absu, beta)
        if tail.max() <= limit:
            return T, tail, False
        if T >= MAX_HORIZON:
            break
        T *= 2.0
    if beta > 0:
        raise HorizonTooShort(f"tail {tail.max():.3g} exceeds {limit:.3g} at horizon {T:g}")
    return T, tail, True


def quasimartingale_verdict(
    model: MarkovModel,
    u,
    beta: float,
    seq: AdmissibleSequence | None = None,
    cross_check: bool = True,
) -> VariationReport:
    """Evaluate ``V^beta`` along an admissible sequence and decide quasimartingale status.

    Levels are evaluated in order until successive values differ by less than
    ``CAUCHY_TOL * (1 + max|u|)``.  Without ``seq`` the horizon follows
    :func:`choose_horizon` and up to ``DEFAULT_LEVELS`` dyadic levels are used.
    Discrete-time models use the integer points of each level, which makes the
    sequence constant from level 1 on.
    """
    u = as_function(model, u)
    if seq is None:
        T, tail, flagged = choose_horizon(model, u, beta)
        seq = dyadic_sequence(T, DEFAULT_LEVELS if model.is_ctmc else 1)
    else:
        tail = semigroup_apply(model, seq.horizon, np.abs(u), beta)
        flagged = bool(tail.max() > TAIL_TOL * float(np.abs(u).max()))
        if flagged and beta > 0:
            raise HorizonTooShort(f"tail {tail.max():.3g} too large at horizon {seq.horizon:g}")

    cauchy = CAUCHY_TOL * (1.0 + float(np.abs(u).max()))
    values: list[np.ndarray] = []
    levels: list[int] = []
    converged = np.zeros(model.n, dtype=bool)
    mono = 0.0
    for k in range(1, seq.levels + 1):
        tau = seq.level(k)
        if not model.is_ctmc:
            tau = UniformPartition(1.0, int(round(seq.horizon)))
        v = variation_on_partition(model, u, beta, tau)
        if values:
            mono = max(mono, float((values[-1] - v).max()))
            converged = np.abs(v - values[-1]) < cauchy
        values.append(v)
        levels.append(k)
        if not model.is_ctmc:
            converged[:] = True
            break
        if converged.all():
            break
    sup = np.maximum.reduce(values)
    is_qm = bool(converged.all()) and mono <= MONOTONE_TOL * (1.0 + float(sup.max()))

    bound = None
    if cross_check and beta > 0:
        dec = rao_decompose(model, u, beta)
        excess = sup - (dec.u1 + dec.u2)
        bound = {
            "u1_plus_u2": (dec.u1 + dec.u2).tolist(),
            "max_excess": float(excess.max()),
            "tolerance": BOUND_TOL,
            "pass": bool(excess.max() <= BOUND_TOL),
        }
    return VariationReport(
        beta=beta,
        horizon=seq.horizon,
        levels=levels,
        values=values,
        sup_estimate=sup,
        converged=converged,
        tail=tail,
        tail_flagged=flagged,
        is_quasimartingale=is_qm,
        monotonicity_violation=mono,
        bound_check=bound,
    )


# --- sufficient criteria --------------------------------------------------


def dual_kernel(model: MarkovModel, t: float) -> tuple[np.ndarray, np.ndarray]:
    """``(S, Phat_t)``: positive-mass indices and the m-dual of ``P_t`` on them."""
    S = np.flatnonzero(model.positive_mass)
    m = model.measure[S]
    P = transition_matrix(model, t)[np.ix_(S, S)]
    return S, (P.T * m[None, :]) / m[:, None]


def _solid_hull_distance(target: np.ndarray, gens: np.ndarray) -> float:
    """``min_lambda max (target - sum_i lambda_i g_i)^+`` over the simplex (an LP)."""
    k, d = gens.shape
    # variables: lambda_1..lambda_k, eps
    c = np.zeros(k + 1)
    c[-1] = 1.0
    A_ub = np.hstack([-gens.T, -np.ones((d, 1))])
    b_ub = -target
    A_eq = np.hstack([np.ones((1, k)), np.zeros((1, 1))])
    bounds = [(0, None)] * k + [(0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=bounds, method="highs")
    return float(res.x[-1]) if res.success else math.inf


def criterion_dual_family(
    model: MarkovModel,
    u,
    family: Sequence[Sequence[float]],
    horizon: float = 2.0**10,
    c: float | None = None,
    p: float = 1.0,
    tol: float = 1e-9,
) -> Verdict:
    """Check ``sup_{f in A} int |P_t u - u| f dm <= c t`` on the time grid.

    ``family`` lists generators of the set ``A``; membership is taken in their
    solid convex hull ``{g : 0 <= g <= h, h in conv(A)}``, which leaves the
    supremum unchanged (the integrand is nonnegative).  ``A`` must be stable
    under the dual semigroup, its members must lie in the unit ball of
    ``L^{p*}(m)`` and their supports must cover the positive-mass states.
    When ``c`` is omitted the smallest constant valid on the grid is reported.
    """
    from .duality import check_subinvariant

    u = as_function(model, u)
    if not check_subinvariant(model).passed:
        raise NotSubInvariant("the dual family criterion needs a sub-invariant measure")
    S = np.flatnonzero(model.positive_mass)
    m = model.measure[S]
    gens = np.array([np.asarray(f, dtype=float) for f in family])
    if gens.ndim != 2 or gens.shape[1] != model.n:
        raise ValueError("family members must be functions on the state space")
    gens = gens[:, S]
    if gens.min() < 0:
        raise ValueError("family members must be nonnegative")
    q = math.inf if p == 1 else p / (p - 1)
    norms = np.abs(gens).max(axis=1) if math.isinf(q) else ((np.abs(gens) ** q) @ m) ** (1 / q)
    if norms.max() > 1 + tol:
        raise ValueError(f"family member has dual norm {norms.max():.6g} > 1")
    covered = (gens > 0).any(axis=0)
    if not covered.all():
        raise SupportGap(f"states {[model.labels[S[i]] for i in np.flatnonzero(~covered)]} not covered")

    times = model_grid(model, [t for t in time_grid() if t <= horizon])
    worst_dist = 0.0
    for t in times:
        _, Phat = dual_kernel(model, t)
        for g in gens:
            dist = _solid_hull_distance(Phat @ g, gens)
            worst_dist = max(worst_dist, dist)
            if dist > tol:
                raise FamilyNotStable(f"dual semigroup leaves the family at t={t:g} (distance {dist:.3g})")

    ratios = []
    for t in times:
        dev = np.abs(semigroup_apply(model, t, u) - u)[S] * m
        ratios.append(float((gens @ dev).max()) / t)
    ratios = np.array(ratios)
    c_min = float(ratios.max())
    if c is None:
        c_used = c_min
    else:
        c_used = float(c)
    worst = float((ratios - c_used).max())
    i = int(np.argmax(ratios - c_used))
    passed = worst <= tol * (1.0 + c_used)
    details: dict[str, Any] = {
        "c": c_used,
        "c_min_on_grid": c_min,
        "stability_distance": worst_dist,
        "p": p,
        "conclusion": "quasimartingale version for every beta > 0" if passed else None,
    }
    if passed:
        rep = quasimartingale_verdict(model, u, 1.0)
        details["cross_check_beta1"] = rep.is_quasimartingale
        passed = rep.is_quasimartingale
    return Verdict(
        property="dual_family_criterion",
        passed=passed,
        worst_violation=worst,
        tolerance=tol * (1.0 + c_used),
        witness_parameter=float(times[i]),
        details=details,
    )


def _potential_finite(model: MarkovModel, g: np.ndarray, alpha: float) -> np.ndarray:
    """Entrywise finiteness of ``U_alpha g`` for ``g >= 0``.

    Finite whenever ``alpha > 0``; for ``alpha = 0`` it is infinite exactly at
    states that reach a recurrent class on which ``g`` charges something.
    """
    if alpha > 0:
        return np.ones(model.n, dtype=bool)
    R = reachability(model)
    finite = np.ones(model.n, dtype=bool)
    for cls in closed_conservative_classes(model):
        if g[cls].max() > 0:
            finite &= ~R[:, cls].any(axis=1)
    return finite


def _potential(model: MarkovModel, g: np.ndarray, alpha: float) -> np.ndarray:
    """``U_alpha g`` with ``+inf`` where it diverges (``alpha = 0`` allowed)."""
    finite = _potential_finite(model, g, alpha)
    out = np.full(model.n, math.inf)
    if alpha > 0:
        return resolvent_apply(model, alpha, g)
    # restrict to states whose potential is finite; that set is closed under jumps
    idx = np.flatnonzero(finite)
    if idx.size:
        G = model.generator[np.ix_(idx, idx)]
        out[idx] = np.linalg.lstsq(-G, g[idx], rcond=None)[0]
    return out


def criterion_resolvent(model: MarkovModel, u, alpha: float, c, x0: int | str = 0, tol: float = 1e-10) -> Verdict:
    """Three resolvent-type sufficient conditions for the quasimartingale property.

    Variant i)  ``U_a(|u|+c) < inf``, ``limsup P^a_t |u| < inf``, ``|P_t u - u| <= c t``;
                certifies ``beta = alpha`` (and larger).
    Variant ii) ``|P_t u - u| <= c t`` and ``sup_t P^a_t(|u|+c) < inf``; certifies ``beta > alpha``.
    Variant iii) ``U_a|u|(x0) < inf`` and ``U_a|P_t u - u|(x0) <= const t``; certifies
                ``beta > alpha`` at states reachable from ``x0``.
    On a finite space the limsup, sup and Riemann-integrability clauses are vacuous.
    """
    u = as_function(model, u)
    c = np.broadcast_to(np.asarray(c, dtype=float), (model.n,)).copy()
    if c.min() < 0:
        raise ValueError("c must be nonnegative")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    x0 = model.space.index(x0)
    absu = np.abs(u)
    times = model_grid(model, time_grid())
    lip = []
    pot_ratio = []
    pot_x0 = _potential(model, absu, alpha)[x0]
    for t in times:
        dev = np.abs(semigroup_apply(model, t, u) - u)
        lip.append(float((dev - c * t).max()))
        if math.isfinite(pot_x0):
            pot_ratio.append(float(_potential(model, dev, alpha)[x0]) / t)
    lip = np.array(lip)
    lip_ok = bool(lip.max() <= tol * (1.0 + float(absu.max())))
    pot_ok = bool(_potential_finite(model, absu + c, alpha).all())
    clauses = {
        "i": {
            "potential_finite": pot_ok,
            "potential_vacuous": alpha > 0,
            "limsup_finite": True,
            "lipschitz": lip_ok,
            "riemann_integrable": True,
        },
        "ii": {"lipschitz": lip_ok, "sup_bounded": True, "b": float((absu + c).max())},
        "iii": {
            "x0": model.labels[x0],
            "potential_at_x0_finite": math.isfinite(pot_x0),
            "const": float(max(pot_ratio)) if pot_ratio else None,
        },
    }
    certified = {}
    if pot_ok and lip_ok:
        certified["i"] = f"beta >= {alpha:g}"
    if lip_ok:
        certified["ii"] = f"beta > {alpha:g}"
    if math.isfinite(pot_x0) and pot_ratio and all(math.isfinite(r) for r in pot_ratio):
        reach = reachability(model)[x0]
        certified["iii"] = {
            "beta": f"> {alpha:g}",
            "states": [model.labels[i] for i in np.flatnonzero(reach)],
        }
    return Verdict(
        property="resolvent_criterion",
        passed=bool(certified),
        worst_violation=float(lip.max()),
        tolerance=tol,
        witness_parameter=float(times[int(np.argmax(lip))]),
        details={"clauses": clauses, "certified": certified, "alpha": alpha},
    )
