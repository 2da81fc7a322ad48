"""Trajectory sampling for killed continuous-time chains and empirical martingale checks.

Paths are drawn with the Gillespie rule: an exponential holding time with
rate ``|Q(x, x)|``, then a jump to ``y`` with probability ``Q(x, y) / |Q(x, x)|``
or to the cemetery with the deficit probability.  Random streams are keyed by
``(seed, block)`` where a block is a fixed run of ``BLOCK`` path indices, so any
schedule that evaluates whole blocks reproduces the same paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import PrecisionBudget
from .excessive import harmonic_residual, is_excessive
from .model_core import MarkovModel, as_function, semigroup_apply
from .quasivar import Partition, UniformPartition, variation_on_partition

BLOCK = 4096
Z_LIMIT = 3.0
#: absolute slack added to 3 SE so that zero-variance estimates compare exactly
ABS_SLACK = 1e-12
DEAD = -1


def block_generator(seed: int, block: int) -> np.random.Generator:
    """Counter-based stream for one block of paths."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(block)])))


@dataclass
class Trajectory:
    """Jump times and visited states; ``states[-1] == DEAD`` when killed at ``lifetime``."""

    jump_times: np.ndarray
    states: np.ndarray
    lifetime: float
    horizon: float
    labels: tuple[str, ...] = field(repr=False, default=())

    def state_at(self, t: float) -> int:
        """State index at time ``t`` (``DEAD`` after the lifetime)."""
        if t >= self.lifetime:
            return DEAD
        k = int(np.searchsorted(self.jump_times, t, side="right")) - 1
        return int(self.states[k])

    def evaluate(self, u, t: float) -> float:
        s = self.state_at(t)
        return 0.0 if s == DEAD else float(np.asarray(u)[s])


def _jump_tables(model: MarkovModel):
    if not model.is_ctmc:
        raise ValueError("trajectory sampling needs a continuous-time model")
    Q = model.matrix
    rate = -np.diag(Q).copy()
    off = Q - np.diag(np.diag(Q))
    n = model.n
    # cumulative jump probabilities; the final column is the cemetery
    probs = np.zeros((n, n + 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        probs[:, :n] = np.where(rate[:, None] > 0, off / rate[:, None], 0.0)
    probs[:, n] = np.where(rate > 0, 1.0 - probs[:, :n].sum(axis=1), 0.0)
    probs[:, n] = np.maximum(probs[:, n], 0.0)
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = np.where(rate > 0, 1.0, 0.0)
    return rate, cum


def sample_path(model: MarkovModel, x, horizon: float, seed: int, path_index: int = 0) -> Trajectory:
    """Sample one path from state ``x`` up to ``horizon`` (or until killed)."""
    rate, cum = _jump_tables(model)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(path_index), 1])))
    s = model.space.index(x)
    t = 0.0
    times, states = [0.0], [s]
    lifetime = math.inf
    while True:
        if rate[s] <= 0:
            break
        t += rng.exponential(1.0 / rate[s])
        if t > horizon:
            break
        nxt = int(np.searchsorted(cum[s], rng.random(), side="right"))
        if nxt >= model.n:
            lifetime = t
            times.append(t)
            states.append(DEAD)
            break
        s = nxt
        times.append(t)
        states.append(s)
    return Trajectory(np.array(times), np.array(states), lifetime, horizon, model.labels)


def _simulate_block(rate, cum, n_states, x, times, npaths, rng) -> np.ndarray:
    """States at ``times`` for ``npaths`` paths started at ``x`` (``DEAD`` = killed)."""
    times = np.asarray(times, dtype=float)
    out = np.full((npaths, len(times)), DEAD, dtype=np.int64)
    state = np.full(npaths, x, dtype=np.int64)
    clock = np.zeros(npaths)
    active = np.arange(npaths)
    horizon = times[-1]
    while active.size:
        s = state[active]
        r = rate[s]
        hold = np.full(active.size, np.inf)
        moving = r > 0
        hold[moving] = rng.exponential(1.0, size=int(moving.sum())) / r[moving]
        t_next = clock[active] + hold
        # record the current state at grid times in [clock, t_next)
        lo = np.searchsorted(times, clock[active], side="left")
        hi = np.searchsorted(times, t_next, side="left")
        span = hi - lo
        if span.max(initial=0) > 0:
            rows = np.repeat(active, span)
            starts = np.repeat(lo, span)
            offs = np.arange(span.sum()) - np.repeat(np.cumsum(span) - span, span)
            out[rows, starts + offs] = np.repeat(s, span)
        u = rng.random(active.size)
        go = t_next <= horizon
        nxt = (cum[s[go]] <= u[go, None]).sum(axis=1)
        idx = active[go]
        alive = nxt < n_states
        state[idx[alive]] = nxt[alive]
        clock[idx[alive]] = t_next[go][alive]
        active = idx[alive]
    return out


def simulate_states(model: MarkovModel, x, times: Sequence[float], paths: int, seed: int) -> np.ndarray:
    """Matrix of state indices at ``times`` (rows are paths, ``DEAD`` after killing)."""
    rate, cum = _jump_tables(model)
    x = model.space.index(x)
    times = np.asarray(sorted(times), dtype=float)
    blocks = []
    for b in range(math.ceil(paths / BLOCK)):
        k = min(BLOCK, paths - b * BLOCK)
        blocks.append(_simulate_block(rate, cum, model.n, x, times, k, block_generator(seed, b)))
    return np.vstack(blocks)


def _values(u: np.ndarray, states: np.ndarray) -> np.ndarray:
    ext = np.append(u, 0.0)  # index DEAD = -1 hits the cemetery value 0
    return ext[states]


@dataclass
class EmpiricalReport:
    """Monte Carlo estimates with standard errors and z-scores against analytic targets."""

    test: str
    times: list[float]
    estimate: np.ndarray
    standard_error: np.ndarray
    count: int
    seed: int
    target: np.ndarray
    z_score: np.ndarray
    passed: bool
    details: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "test": self.test,
            "times": list(self.times),
            "estimate": self.estimate.tolist(),
            "standard_error": self.standard_error.tolist(),
            "count": self.count,
            "seed": self.seed,
            "target": self.target.tolist(),
            "z_score": self.z_score.tolist(),
            "pass": self.passed,
            "details": self.details,
        }


def _mean_se(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    sd = samples.std(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
    return mean, sd / math.sqrt(n)


def _z(est, target, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (est - target) / se
    return np.where(np.abs(est - target) <= ABS_SLACK, 0.0, z)


def _check_budget(se: np.ndarray, se_target: float | None, paths: int) -> None:
    if se_target is not None and se.max() > se_target:
        raise PrecisionBudget(f"standard error {se.max():.3g} above target {se_target:.3g} with {paths} paths")


def supermartingale_test(
    model: MarkovModel,
    u,
    beta: float,
    x,
    times: Sequence[float],
    paths: int,
    seed: int,
    check: bool = True,
    se_target: float | None = None,
) -> EmpiricalReport:
    """Estimate ``E^x[exp(-beta t) u(X_t)]`` and test it against ``u(x)`` and ``exp(-beta t) P_t u(x)``.

    Passes when every estimate is at most ``u(x) + 3 SE`` and within ``3 SE`` of
    the analytic value.  ``check=False`` skips the excessiveness precondition
    (used for negative controls).
    """
    u = as_function(model, u)
    if check and not is_excessive(model, u, beta).passed:
        raise ValueError("supermartingale_test requires a beta-excessive function")
    xi = model.space.index(x)
    times = sorted(float(t) for t in times)
    st = simulate_states(model, xi, times, paths, seed)
    disc = np.exp(-beta * np.asarray(times))
    samples = _values(u, st) * disc[None, :]
    est, se = _mean_se(samples)
    _check_budget(se, se_target, paths)
    target = np.array([semigroup_apply(model, t, u, beta)[xi] for t in times])
    z = _z(est, target, se)
    bound = u[xi] + Z_LIMIT * se + ABS_SLACK
    ok = bool(np.all(est <= bound) and np.all(np.abs(est - target) <= Z_LIMIT * se + ABS_SLACK))
    return EmpiricalReport(
        "supermartingale", times, est, se, paths, seed, target, z, ok,
        {"beta": beta, "start": model.labels[xi], "initial_value": float(u[xi]),
         "drift_vs_initial": (est - u[xi]).tolist()},
    )


def martingale_test(
    model: MarkovModel,
    u,
    x,
    times: Sequence[float],
    paths: int,
    seed: int,
    check: bool = True,
    se_target: float | None = None,
) -> EmpiricalReport:
    """Test ``|E^x[u(X_t)] - u(x)| <= 3 SE`` at every time."""
    u = as_function(model, u)
    if check and harmonic_residual(model, u) > 1e-10 * (1.0 + np.abs(u).max()):
        raise ValueError("martingale_test requires a harmonic function")
    xi = model.space.index(x)
    times = sorted(float(t) for t in times)
    st = simulate_states(model, xi, times, paths, seed)
    samples = _values(u, st)
    est, se = _mean_se(samples)
    _check_budget(se, se_target, paths)
    target = np.full(len(times), u[xi])
    z = _z(est, target, se)
    ok = bool(np.all(np.abs(est - target) <= Z_LIMIT * se + ABS_SLACK))
    analytic = np.array([semigroup_apply(model, t, u)[xi] for t in times])
    return EmpiricalReport(
        "martingale", times, est, se, paths, seed, target, z, ok,
        {"start": model.labels[xi], "analytic_mean": analytic.tolist()},
    )


def empirical_variation(
    model: MarkovModel,
    u,
    beta: float,
    x,
    tau: Partition | UniformPartition,
    paths: int,
    seed: int,
    se_target: float | None = None,
) -> EmpiricalReport:
    """Monte Carlo estimate of the quasimartingale variation of ``exp(-beta t) u(X_t)`` on ``tau``.

    The conditional increments are exact by the Markov property:
    ``E[Z_{t_i} - Z_{t_{i-1}} | F_{t_{i-1}}] = exp(-beta t_{i-1}) (P^b_d u - u)(X_{t_{i-1}})``.
    """
    u = as_function(model, u)
    xi = model.space.index(x)
    times = np.asarray(tau.times, dtype=float)
    st = simulate_states(model, xi, times, paths, seed)
    total = np.zeros(paths)
    cache: dict[float, np.ndarray] = {}
    for i in range(1, len(times)):
        d = times[i] - times[i - 1]
        if d not in cache:
            cache[d] = semigroup_apply(model, d, u, beta) - u
        total += math.exp(-beta * times[i - 1]) * np.abs(_values(cache[d], st[:, i - 1]))
    total += math.exp(-beta * times[-1]) * np.abs(_values(u, st[:, -1]))
    est, se = _mean_se(total[:, None])
    _check_budget(se, se_target, paths)
    target = np.array([variation_on_partition(model, u, beta, tau)[xi]])
    z = _z(est, target, se)
    ok = bool(np.all(np.abs(est - target) <= Z_LIMIT * se + ABS_SLACK))
    return EmpiricalReport(
        "variation", [float(times[-1])], est, se, paths, seed, target, z, ok,
        {"beta": beta, "start": model.labels[xi], "partition_points": len(times),
         "note": "fixed partition; the supremum over all partitions is bounded via the dyadic levels"},
    )


def occupation_frequencies(model: MarkovModel, x, t: float, paths: int, seed: int) -> np.ndarray:
    """Empirical distribution of ``X_t`` over states plus the cemetery (last entry)."""
    st = simulate_states(model, x, [t], paths, seed)[:, 0]
    counts = np.bincount(np.where(st == DEAD, model.n, st), minlength=model.n + 1)
    return counts / paths
