"""Invariant probability densities for Markovian models with an auxiliary measure.

The adjoint semigroup acts on densities w.r.t. ``m``:

    (P_t* rho)(y) = sum_x rho(x) m(x) P_t(x, y) / m(y),   m(y) > 0.

Invariant densities are extracted from time averages
``rho_T = (1/T) int_0^T P_t* rho0 dt`` along a doubling schedule.  On a finite
space ``rho_T = rho_inf + c / T + O(exp(-gap T) / T)``, so the Richardson
combination ``2 rho_{2T} - rho_T`` removes the ``1/T`` term and the schedule
converges geometrically instead of harmonically.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.special import roots_legendre

from .duality import check_subinvariant, dual_model, invariant_partition
from .errors import InconsistentVerdict, MassLeak, NoConvergence, NotAuxiliary, NotMarkovian
from .model_core import (
    STRUCTURE_TOL,
    MarkovModel,
    as_function,
    closed_conservative_classes,
    geometric_grid,
    reachability,
    stationary_distribution,
    transition_matrix,
)
from .verdict import Verdict

MASS_TOL = 1e-10
CESARO_TOL = 1e-8
CO_EXCESSIVE_TOL = 1e-8
INVARIANCE_TOL = 1e-6
#: quadrature: composite Gauss-Legendre, panel width 1/4, 8 nodes per panel
PANEL_WIDTH = 0.25
GL_NODES = 8
MAX_DOUBLINGS = 60
EXHAUSTIVE_LIMIT = 16


def certificate_grid(model: MarkovModel) -> np.ndarray:
    """Times for suprema and residuals: ``{2^-10 .. 2^6}`` plus ``0+`` (or positive integers)."""
    if model.is_ctmc:
        return np.concatenate([[0.0], geometric_grid(2.0**-10, 2.0**6, 16)])
    return np.concatenate([[0.0], np.arange(1.0, 65.0)])


def check_markovian(model: MarkovModel, tol: float = STRUCTURE_TOL) -> Verdict:
    """Row sums of ``Q`` are 0 (ctmc) or of ``P`` are 1 (dtmc)."""
    defect = model.killing
    i = int(np.argmax(defect))
    return Verdict(
        property="markovian",
        passed=bool(defect[i] <= tol),
        worst_violation=float(defect[i]),
        tolerance=tol,
        witness_state=model.labels[i],
    )


def check_auxiliary(model: MarkovModel) -> Verdict:
    """No positive-mass state reaches a zero-mass state in the support graph of ``U_1``."""
    R = reachability(model)
    pos = model.positive_mass
    bad = R[np.ix_(pos, ~pos)]
    witness = None
    if bad.any():
        x, y = np.argwhere(bad)[0]
        witness = (model.labels[np.flatnonzero(pos)[x]], model.labels[np.flatnonzero(~pos)[y]])
    return Verdict(
        property="auxiliary",
        passed=not bad.any(),
        worst_violation=float(bad.sum()),
        tolerance=0.0,
        witness_state=witness[0] if witness else None,
        details={"reaches_null_state": witness[1] if witness else None},
    )


def _require_markov_auxiliary(model: MarkovModel) -> None:
    v = check_markovian(model)
    if not v.passed:
        raise NotMarkovian(f"row deficit {v.worst_violation:.3g} at state {v.witness_state}")
    v = check_auxiliary(model)
    if not v.passed:
        raise NotAuxiliary(f"state {v.witness_state} reaches null state {v.details['reaches_null_state']}")


def _adjoint_matrix(model: MarkovModel, P: np.ndarray) -> np.ndarray:
    """Matrix of the density adjoint of ``P`` on the positive-mass states."""
    S = np.flatnonzero(model.positive_mass)
    m = model.measure[S]
    PS = P[np.ix_(S, S)]
    return (PS.T * m[None, :]) / m[:, None]


def _embed(model: MarkovModel, x: np.ndarray) -> np.ndarray:
    out = np.zeros(model.n)
    out[model.positive_mass] = x
    return out


def mass(model: MarkovModel, rho) -> float:
    return float(np.sum(np.asarray(rho) * model.measure))


def adjoint_apply(model: MarkovModel, t: float, rho) -> np.ndarray:
    """Density of ``(rho m) P_t`` with respect to ``m``."""
    _require_markov_auxiliary(model)
    rho = as_function(model, rho)
    A = _adjoint_matrix(model, transition_matrix(model, t))
    out = _embed(model, A @ rho[model.positive_mass])
    before, after = mass(model, rho), mass(model, out)
    if abs(after - before) > MASS_TOL * max(1.0, abs(before)):
        raise MassLeak(f"mass {before:.15g} became {after:.15g} at t={t:g}")
    return out


@dataclass
class DensityResult:
    rho: np.ndarray
    co_excessive_residual: float
    invariance_residual: float
    iterations: int
    converged: bool
    horizon: float
    history: list[dict[str, float]] = field(default_factory=list)
    method: str = "cesaro"

    def to_json(self) -> dict[str, Any]:
        return {
            "rho": self.rho.tolist(),
            "co_excessive_residual": self.co_excessive_residual,
            "invariance_residual": self.invariance_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "horizon": self.horizon,
            "method": self.method,
            "history": self.history,
            "averaging": "deterministic Cesaro means, bias-cancelled by window averaging (finite-space surrogate for subsequence extraction)",
        }


def density_residuals(model: MarkovModel, rho: np.ndarray) -> tuple[float, float]:
    """``(max_t max (P_t* rho - rho)^+, max_t ||P_t* rho - rho||_{1,m})`` over the certificate grid."""
    S = model.positive_mass
    m = model.measure[S]
    r = rho[S]
    co, inv = 0.0, 0.0
    for t in certificate_grid(model)[1:]:
        d = _adjoint_matrix(model, transition_matrix(model, t)) @ r - r
        co = max(co, float(np.maximum(d, 0).max()))
        inv = max(inv, float(np.sum(np.abs(d) * m)))
    return co, inv


def _base_average(model: MarkovModel, A_of_t: Callable[[float], np.ndarray], T0: float) -> np.ndarray:
    """``int_0^T0 P_t* dt`` (ctmc, Gauss-Legendre) or ``sum_{k<T0} P*^k`` (dtmc), as a matrix."""
    if not model.is_ctmc:
        A1 = A_of_t(1.0)
        acc, Ak = np.zeros_like(A1), np.eye(A1.shape[0])
        for _ in range(int(T0)):
            acc += Ak
            Ak = A1 @ Ak
        return acc
    x, w = roots_legendre(GL_NODES)
    panels = int(round(T0 / PANEL_WIDTH))
    k = int(model.positive_mass.sum())
    acc = np.zeros((k, k))
    for p in range(panels):
        a = p * PANEL_WIDTH
        for xi, wi in zip(x, w):
            t = a + PANEL_WIDTH * (xi + 1) / 2
            acc += wi * PANEL_WIDTH / 2 * A_of_t(t)
    return acc


def _checkpoints(model: MarkovModel, A_of_t, T0: float, max_doublings: int):
    """Yield ``(T, int_0^T P_t* dt)`` for ``T = T0 2^j`` and ``1.5 T0 2^j``.

    Only doubling is ever integrated:  ``I_{2T} = I_T + P_T* I_T`` and the
    half steps ``I_{3T/2} = I_T + P_T* I_{T/2}`` reuse the previous level.
    """
    h = T0 / 2
    I_prev, T_prev = _base_average(model, A_of_t, h), h
    A_prev = A_of_t(h)
    I_cur, A_cur, T_cur = I_prev + A_prev @ I_prev, A_prev @ A_prev, T0
    yield T_cur, I_cur
    for _ in range(max_doublings):
        yield T_cur + T_prev, I_cur + A_cur @ I_prev
        I_prev, T_prev = I_cur, T_cur
        I_cur, A_cur, T_cur = I_cur + A_cur @ I_cur, A_cur @ A_cur, 2 * T_cur
        yield T_cur, I_cur


def cesaro_invariant_density(
    model: MarkovModel,
    rho0=None,
    T0: float | None = None,
    max_doublings: int = MAX_DOUBLINGS,
    tol: float = CESARO_TOL,
) -> DensityResult:
    """Time-average the adjoint orbit of ``rho0`` until it settles on an invariant density.

    Checkpoints are ``T0 2^j`` and ``1.5 T0 2^j``.  The estimate at a
    checkpoint is the orbit average over the window since the previous
    checkpoint; this cancels the ``1/T`` bias of the plain Cesaro mean (for a
    doubling window it is exactly the Richardson combination ``2 rho_2T - rho_T``).
    The run stops when successive estimates differ by less than ``tol`` in the
    m-weighted 1-norm (the first estimate is compared with ``rho0`` itself), and
    the limit is then certified through its co-excessive and invariance residuals.
    """
    _require_markov_auxiliary(model)
    S = model.positive_mass
    m = model.measure[S]
    if rho0 is None:
        rho0 = np.where(model.positive_mass, 1.0 / model.measure[S].sum(), 0.0)
    rho0 = as_function(model, rho0)
    if rho0[S].min() < 0:
        raise ValueError("initial density must be nonnegative")
    total = mass(model, rho0)
    if not total > 0:
        raise ValueError("initial density has zero mass")
    r0 = rho0[S] / total

    if T0 is None:
        T0 = 1.0 if model.is_ctmc else 2.0
    unit = 2 * PANEL_WIDTH if model.is_ctmc else 2.0
    if not T0 > 0 or (T0 / unit) != round(T0 / unit):
        raise ValueError(f"T0 must be a positive multiple of {unit:g}")

    def A_of_t(t):
        return _adjoint_matrix(model, transition_matrix(model, t))

    prev_T, prev_I = 0.0, np.zeros((len(m), len(m)))
    prev_est = r0
    history = []
    for it, (T, I_T) in enumerate(_checkpoints(model, A_of_t, T0, max_doublings), start=1):
        plain = I_T @ r0 / T
        est = (I_T - prev_I) @ r0 / (T - prev_T)
        for name, vec in (("mean", plain), ("window", est)):
            vm = float(vec @ m)
            if abs(vm - 1.0) > MASS_TOL or vec.min() < -MASS_TOL:
                raise MassLeak(f"Cesaro {name} at T={T:g} has mass {vm:.15g}, min {vec.min():.3g}")
        diff = float(np.abs(est - prev_est) @ m)
        history.append({"T": T, "mass": float(plain @ m), "step": diff})
        if diff < tol:
            cand = np.clip(est, 0.0, None)
            cand /= cand @ m
            rho = _embed(model, cand)
            co, inv = density_residuals(model, rho)
            if co <= CO_EXCESSIVE_TOL and inv <= INVARIANCE_TOL:
                return DensityResult(rho, co, inv, it, True, T, history)
        prev_T, prev_I, prev_est = T, I_T, est
    raise NoConvergence(
        f"schedule exhausted at T={prev_T:g}; last steps {[h['step'] for h in history[-3:]]}"
    )


def eigen_invariant_density(model: MarkovModel, rho0=None) -> DensityResult:
    """Invariant density from the left null space of the generator.

    For reducible chains each recurrent class contributes its stationary
    vector; with ``rho0`` the limit of its orbit is reproduced by weighting
    the classes with the absorption mass of ``rho0 m``.
    """
    _require_markov_auxiliary(model)
    classes = recurrent_classes_in_support(model)
    pis = [stationary_distribution(model, c) for c in classes]
    if rho0 is None:
        weights = np.ones(len(pis)) / len(pis)
    else:
        rho0 = as_function(model, rho0)
        mu0 = rho0 * model.measure
        weights = np.array([mu0 @ absorption_probability(model, c) for c in classes])
        weights /= weights.sum()
    pi = sum(w * p for w, p in zip(weights, pis))
    rho = np.where(model.positive_mass, pi / np.where(model.positive_mass, model.measure, 1.0), 0.0)
    co, inv = density_residuals(model, rho)
    ok = co <= CO_EXCESSIVE_TOL and inv <= INVARIANCE_TOL
    return DensityResult(rho, co, inv, 1, ok, math.inf, [], method="eigen")


def recurrent_classes_in_support(model: MarkovModel) -> list[np.ndarray]:
    pos = model.positive_mass
    return [c for c in closed_conservative_classes(model) if pos[c].all()]


def absorption_probability(model: MarkovModel, cls: np.ndarray) -> np.ndarray:
    """Probability, from each state, of eventually entering the closed class ``cls``."""
    n = model.n
    inside = np.zeros(n, dtype=bool)
    inside[cls] = True
    G = model.generator
    R = reachability(model)
    reach = R[:, cls].any(axis=1)
    h = np.zeros(n)
    h[inside] = 1.0
    # h harmonic off the class, 0 where the class is unreachable
    idx = np.flatnonzero(reach & ~inside)
    if idx.size:
        A = G[np.ix_(idx, idx)]
        b = -G[np.ix_(idx, np.flatnonzero(inside))].sum(axis=1)
        h[idx] = np.linalg.solve(A, b)
    return h


@dataclass
class AlmostInvarianceCertificate:
    delta: float
    phi: dict[str, float]
    grid: list[float]
    satisfied: bool
    policy: str
    min_atom_mass: float
    report_mode: dict[str, Any] | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "delta": self.delta,
            "phi": self.phi,
            "grid": [self.grid[0], self.grid[1], self.grid[-1], len(self.grid)],
            "satisfied": self.satisfied,
            "policy": self.policy,
            "min_atom_mass": self.min_atom_mass,
            "absolute_continuity": "automatic: every nonempty set has mass >= min_atom_mass",
            "report_mode": self.report_mode,
        }


def _subset_family(model: MarkovModel) -> tuple[np.ndarray, str]:
    """Boolean matrix of tested subsets (rows) and the policy name."""
    n = model.n
    if n <= EXHAUSTIVE_LIMIT:
        codes = np.arange(2**n)
        return ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(bool), "exhaustive"
    rows = [np.zeros(n, dtype=bool)]
    for i in range(n):
        r = np.zeros(n, dtype=bool)
        r[i] = True
        rows.append(r)
    part = invariant_partition(model, certify=False)
    blocks = part.blocks[:EXHAUSTIVE_LIMIT]
    for k in range(1, len(blocks) + 1):
        for combo in itertools.combinations(blocks, k):
            r = np.zeros(n, dtype=bool)
            r[np.concatenate(combo)] = True
            rows.append(r)
    return np.array(rows), "atoms and unions of invariant blocks"


def _subset_name(model: MarkovModel, row: np.ndarray) -> str:
    return "{" + ",".join(model.labels[i] for i in np.flatnonzero(row)) + "}"


def almost_invariance_report(
    model: MarkovModel,
    grid=None,
    delta: float | None = None,
    phi: Mapping[str, float] | Callable[[np.ndarray], float] | None = None,
) -> AlmostInvarianceCertificate:
    """Canonical almost-invariance certificate ``phi*(A) = sup_t m(P_t 1_A)``, ``delta = 0``.

    ``m(P_t 1_A) = (m^T P_t) 1_A`` is linear in ``A``, so all subsets are
    evaluated in one matrix product per time.  A user pair ``(delta, phi)``
    (``phi`` keyed by subset name like ``"{a,b}"`` or a callable on boolean
    masks) is additionally checked in report mode.
    """
    _require_markov_auxiliary(model)
    grid = certificate_grid(model) if grid is None else np.asarray(grid, dtype=float)
    subsets, policy = _subset_family(model)
    Sf = subsets.astype(float)
    sup = np.zeros(len(subsets))
    W = []
    for t in grid:
        w = model.measure @ transition_matrix(model, t)
        W.append(w)
        sup = np.maximum(sup, Sf @ w)
    names = [_subset_name(model, r) for r in subsets]
    phi_star = dict(zip(names, sup.tolist()))
    pos = model.measure[model.positive_mass]
    report = None
    if delta is not None and phi is not None:
        mE = float(model.measure.sum())
        worst, where = -math.inf, None
        for row, name in zip(subsets, names):
            ph = phi(row) if callable(phi) else phi.get(name)
            if ph is None:
                continue
            lhs = max(float(row.astype(float) @ w) for w in W[1:]) if len(W) > 1 else 0.0
            gap = lhs - (delta * mE + ph)
            if gap > worst:
                worst, where = gap, name
        report = {
            "delta": delta,
            "worst_gap": worst,
            "worst_subset": where,
            "satisfied": bool(0 <= delta < 1 and worst <= MASS_TOL),
        }
    return AlmostInvarianceCertificate(
        delta=0.0,
        phi=phi_star,
        grid=grid.tolist(),
        satisfied=bool(sup[~subsets.any(axis=1)].max(initial=0.0) == 0.0),
        policy=policy,
        min_atom_mass=float(pos.min()),
        report_mode=report,
    )


def theorem4_harness(model: MarkovModel, rho0=None) -> Verdict:
    """Cross-check almost invariance against the constructive invariant-density route.

    Certificate satisfied <=> a converged density exists.  When ``m`` is also
    sub-invariant, a converged density must further be annihilated by the
    co-generator on the positive-mass states, and a nonzero harmonic function
    (``L v = 0``) must exist.
    """
    _require_markov_auxiliary(model)
    cert = almost_invariance_report(model)
    try:
        dens = cesaro_invariant_density(model, rho0)
        found = dens.converged
    except NoConvergence:
        dens, found = None, False
    details: dict[str, Any] = {
        "almost_invariant": cert.satisfied,
        "density_converged": found,
        "rho": dens.rho.tolist() if dens else None,
    }
    if cert.satisfied != found:
        raise InconsistentVerdict(f"almost invariance {cert.satisfied} but density found {found}")

    classes = recurrent_classes_in_support(model)
    cone = []
    for c in classes:
        pi = stationary_distribution(model, c)
        cone.append(np.where(model.positive_mass, pi / np.where(model.positive_mass, model.measure, 1.0), 0.0))
    details["invariant_density_cone_dimension"] = len(cone)
    details["extreme_densities"] = [c.tolist() for c in cone]

    if check_subinvariant(model).passed:
        dual = dual_model(model)
        cogen = 0.0
        if dens is not None:
            cogen = float(np.abs(dual.generator @ dens.rho[dual.support]).max())
        ones_harmonic = float(np.abs(model.generator @ np.ones(model.n)).max())
        harmonic_exists = ones_harmonic <= STRUCTURE_TOL
        details.update(co_generator_residual=cogen, harmonic_exists=harmonic_exists)
        if found != (harmonic_exists and cogen <= CO_EXCESSIVE_TOL):
            raise InconsistentVerdict(
                f"density found {found} but harmonic {harmonic_exists}, co-generator residual {cogen:.3g}"
            )
    return Verdict(
        property="invariant_measure_equivalence",
        passed=True,
        worst_violation=dens.invariance_residual if dens else math.inf,
        tolerance=INVARIANCE_TOL,
        details=details,
    )
