"""Supermedian / excessive membership and the decomposition into excessive parts.

On a finite space ``u >= 0`` is beta-supermedian iff ``exp(-beta t) P_t u <= u``
for all ``t``; equivalently ``alpha U_{alpha+beta} u <= u`` for all ``alpha > 0``.
Both forms are checked on dense geometric grids.  Fine continuity is automatic
on a discrete space, so the excessive limit ``alpha U_{alpha+beta} u -> u`` is a
consistency check rather than an extra condition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import InconsistentVerdict, NegativeFunction
from .model_core import (
    MarkovModel,
    as_function,
    generator_apply,
    geometric_grid,
    model_grid,
    resolvent_apply,
    resolvent_scale,
    semigroup_apply,
)
from .verdict import Verdict

DEFAULT_TOL = 1e-10
LIMIT_TOL = 1e-8
#: alpha and t grids: 16 points per decade over [2^-5, 2^10]
GRID_LO, GRID_HI, GRID_DENSITY = 2.0**-5, 2.0**10, 16
#: in discrete time the resolvent involves e^alpha; beyond this it is saturated in double precision
DTMC_ALPHA_MAX = 32.0


def alpha_grid(model: MarkovModel | None = None) -> np.ndarray:
    grid = geometric_grid(GRID_LO, GRID_HI, GRID_DENSITY)
    if model is not None and not model.is_ctmc:
        grid = grid[grid <= DTMC_ALPHA_MAX]
    return grid


def time_grid() -> np.ndarray:
    return geometric_grid(GRID_LO, GRID_HI, GRID_DENSITY)


@dataclass
class ExcessiveVerdict(Verdict):
    is_supermedian: bool = False
    is_excessive: bool = False


@dataclass
class RaoDecomposition:
    """``u = u1 - u2`` with ``u1 = U_beta f_plus`` and ``u2 = U_beta f_minus`` both beta-excessive."""

    beta: float
    u1: np.ndarray
    u2: np.ndarray
    f_plus: np.ndarray
    f_minus: np.ndarray
    reassembly_residual: float
    certificates: tuple[ExcessiveVerdict, ExcessiveVerdict] = field(repr=False, default=None)

    def to_json(self, labels=None) -> dict[str, Any]:
        return {
            "beta": self.beta,
            "u1": self.u1.tolist(),
            "u2": self.u2.tolist(),
            "f_plus": self.f_plus.tolist(),
            "f_minus": self.f_minus.tolist(),
            "reassembly_residual": self.reassembly_residual,
        }


def _scaled_tol(u: np.ndarray, coef: float) -> float:
    return coef * (1.0 + float(np.abs(u).max()))


def _require_nonnegative(model: MarkovModel, u: np.ndarray, tol: float) -> None:
    if u.min() < -tol:
        i = int(np.argmin(u))
        raise NegativeFunction(f"u[{model.labels[i]}] = {u[i]} < 0")


def is_supermedian(model: MarkovModel, u, beta: float = 0.0, tol: float = DEFAULT_TOL) -> ExcessiveVerdict:
    """Decide whether ``u >= 0`` is beta-supermedian.

    ``tol`` is relative: violations up to ``tol * (1 + max|u|)`` are accepted.
    """
    u = as_function(model, u)
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    abs_tol = _scaled_tol(u, tol)
    _require_nonnegative(model, u, abs_tol)

    worst, witness = -math.inf, (0, "alpha", math.nan)
    alphas = alpha_grid(model)
    for a in alphas:
        gap = resolvent_scale(model, a) * resolvent_apply(model, a + beta, u) - u
        i = int(np.argmax(gap))
        if gap[i] > worst:
            worst, witness = float(gap[i]), (i, "alpha", float(a))
    times = model_grid(model, time_grid())
    for t in times:
        gap = semigroup_apply(model, t, u, beta) - u
        i = int(np.argmax(gap))
        if gap[i] > worst:
            worst, witness = float(gap[i]), (i, "t", float(t))

    ok = worst <= abs_tol
    return ExcessiveVerdict(
        property="supermedian",
        passed=ok,
        worst_violation=worst,
        tolerance=abs_tol,
        witness_state=model.labels[witness[0]],
        witness_parameter=witness[2],
        details={
            "beta": beta,
            "witness_kind": witness[1],
            "alpha_grid": [float(alphas[0]), float(alphas[-1]), len(alphas)],
            "time_grid": [float(times[0]), float(times[-1]), len(times)],
            "fine_continuity": "automatic on a discrete state space",
        },
        is_supermedian=ok,
        is_excessive=False,
    )


def is_excessive(model: MarkovModel, u, beta: float = 0.0, tol: float = DEFAULT_TOL) -> ExcessiveVerdict:
    """Decide whether ``u >= 0`` is beta-excessive.

    The supermedian verdict is strengthened by the limit ``alpha U_{alpha+beta} u -> u``
    evaluated at one large ``alpha``.  Its error is at most ``||(beta - L) u|| / alpha``,
    so ``alpha`` is scaled with the generator norm to keep it below ``LIMIT_TOL``.
    In discrete time the limit condition is vacuous.
    """
    u = as_function(model, u)
    v = is_supermedian(model, u, beta, tol)
    details = dict(v.details)
    if model.is_ctmc:
        gnorm = float(np.abs(beta * np.eye(model.n) - model.matrix).sum(axis=1).max())
        a = 2.0**20 * max(1.0, 128.0 * gnorm)
        limit_resid = float(np.abs(a * resolvent_apply(model, a + beta, u) - u).max())
        limit_tol = _scaled_tol(u, LIMIT_TOL)
        limit_ok = limit_resid <= limit_tol
        details.update(limit_alpha=a, limit_residual=limit_resid, limit_tolerance=limit_tol)
    else:
        limit_ok = True
        details.update(limit_alpha=None, limit_residual=0.0, limit_tolerance=None)
    if v.is_supermedian and not limit_ok:
        raise InconsistentVerdict(
            f"supermedian function fails the excessive limit (residual {details['limit_residual']:.3g})"
        )
    v.property = "excessive"
    v.is_excessive = v.is_supermedian and limit_ok
    v.passed = v.is_excessive
    v.details = details
    return v


def rao_decompose(model: MarkovModel, u, beta: float, tol: float = DEFAULT_TOL) -> RaoDecomposition:
    """Split ``u`` into a difference of two beta-excessive functions.

    With ``f = (beta - L) u`` (continuous time) or ``f = (e^beta - P) u`` (discrete
    time) we have ``u = U_beta f``; the parts are the potentials of ``f^+`` and ``f^-``.
    """
    u = as_function(model, u)
    if not beta > 0:
        raise ValueError(f"beta must be positive for the decomposition, got {beta}")
    if model.is_ctmc:
        f = beta * u - model.matrix @ u
    else:
        f = math.exp(beta) * u - model.matrix @ u
    f_plus, f_minus = np.maximum(f, 0.0), np.maximum(-f, 0.0)
    # U_beta is a nonnegative matrix: negative outputs are solver round-off
    u1 = np.maximum(resolvent_apply(model, beta, f_plus), 0.0)
    u2 = np.maximum(resolvent_apply(model, beta, f_minus), 0.0)
    resid = float(np.abs(u1 - u2 - u).max())
    cert = (is_excessive(model, u1, beta, tol), is_excessive(model, u2, beta, tol))
    return RaoDecomposition(beta, u1, u2, f_plus, f_minus, resid, cert)


def harmonic_residual(model: MarkovModel, u) -> float:
    """``max |L u|``."""
    return float(np.abs(generator_apply(model, as_function(model, u))).max())


def is_harmonic(model: MarkovModel, u, tol: float = DEFAULT_TOL) -> Verdict:
    u = as_function(model, u)
    Lu = generator_apply(model, u)
    i = int(np.argmax(np.abs(Lu)))
    abs_tol = _scaled_tol(u, tol)
    return Verdict(
        property="harmonic",
        passed=bool(abs(Lu[i]) <= abs_tol),
        worst_violation=float(abs(Lu[i])),
        tolerance=abs_tol,
        witness_state=model.labels[i],
    )
