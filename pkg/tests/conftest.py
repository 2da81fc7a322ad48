"""Shared models and random model generators.

Random generators build their matrices directly from numpy draws; measures
that must be stationary are computed with scipy's null space, independent of
the package's own solvers.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import null_space

from mpk import MarkovModel


def two_state(**kw) -> MarkovModel:
    return MarkovModel.ctmc([[-1.0, 1.0], [1.0, -1.0]], measure=[0.5, 0.5], labels=["a", "b"], **kw)


def killed_one() -> MarkovModel:
    return MarkovModel.ctmc([[-1.0]], measure=[1.0], labels=["s"])


def three_symmetric() -> MarkovModel:
    Q = [[-1.0, 1.0, 0.0], [1.0, -2.0, 1.0], [0.0, 1.0, -1.0]]
    return MarkovModel.ctmc(Q, measure=[1 / 3, 1 / 3, 1 / 3], labels=["x", "y", "z"])


def two_blocks() -> MarkovModel:
    """Two disconnected 2-cycles."""
    Q = np.zeros((4, 4))
    Q[0, 1] = Q[1, 0] = 1.0
    Q[2, 3] = 2.0
    Q[3, 2] = 1.0
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return MarkovModel.ctmc(Q, measure=[0.5, 0.5, 1 / 3, 2 / 3])


def absorbing(measure) -> MarkovModel:
    """0 -> 1 at rate 1, state 1 absorbing."""
    return MarkovModel.ctmc([[-1.0, 1.0], [0.0, 0.0]], measure=measure)


def periodic_dtmc() -> MarkovModel:
    return MarkovModel.dtmc([[0.0, 1.0], [1.0, 0.0]], measure=[1.0, 1.0])


@pytest.fixture
def m2():
    return two_state()


@pytest.fixture
def m1k():
    return killed_one()


@pytest.fixture
def m3():
    return three_symmetric()


@pytest.fixture
def mblocks():
    return two_blocks()


# --- random generators -------------------------------------------------------


def random_rates(rng, n, density=0.5, scale=2.0):
    R = rng.exponential(scale, (n, n)) * (rng.random((n, n)) < density)
    np.fill_diagonal(R, 0.0)
    return R


def random_submarkov(rng, n, kill_prob=0.5, density=0.5) -> MarkovModel:
    """Arbitrary sub-Markovian generator with a positive measure."""
    R = random_rates(rng, n, density)
    kill = rng.exponential(1.0, n) * (rng.random(n) < kill_prob)
    Q = R - np.diag(R.sum(axis=1) + kill)
    return MarkovModel.ctmc(Q, measure=rng.uniform(0.2, 2.0, n))


def random_subinvariant(rng, n, kill_prob=0.5, density=0.5) -> MarkovModel:
    """Sub-Markovian generator for which a random full-support m is sub-invariant.

    The diagonal is made negative enough for both the row condition (sub-Markov)
    and the column condition ``m^T Q <= 0``.
    """
    R = random_rates(rng, n, density)
    m = rng.uniform(0.2, 2.0, n)
    kill = rng.exponential(1.0, n) * (rng.random(n) < kill_prob)
    row = R.sum(axis=1) + kill
    inflow = (m @ R) / m
    d = np.maximum(row, inflow)
    Q = R - np.diag(d)
    return MarkovModel.ctmc(Q, measure=m)


def random_block_conservative(rng, sizes, transient=0) -> MarkovModel:
    """Closed irreducible blocks with stationary measures, plus zero-mass transient states."""
    n = sum(sizes) + transient
    Q = np.zeros((n, n))
    m = np.zeros(n)
    start = 0
    for s in sizes:
        idx = slice(start, start + s)
        B = rng.exponential(1.0, (s, s)) + 0.05
        np.fill_diagonal(B, 0.0)
        B -= np.diag(B.sum(axis=1))
        Q[idx, idx] = B
        pi = null_space(B.T)[:, 0]
        m[idx] = np.abs(pi) / np.abs(pi).sum() * rng.uniform(0.5, 2.0)
        start += s
    for t in range(start, n):
        Q[t, :] = rng.exponential(1.0, n) * (rng.random(n) < 0.7)
        Q[t, t] = 0.0
        Q[t, rng.integers(0, sum(sizes))] += 0.5  # ensure an exit into the blocks
        Q[t, t] = -Q[t].sum()
    return MarkovModel.ctmc(Q, measure=m)


def random_mixed_model(rng) -> MarkovModel:
    """Mix of killed sub-invariant and conservative block models."""
    kind = rng.integers(0, 3)
    if kind == 0:
        return random_subinvariant(rng, int(rng.integers(1, 8)), kill_prob=0.6)
    if kind == 1:
        sizes = [int(k) for k in rng.integers(1, 4, size=int(rng.integers(1, 4)))]
        return random_block_conservative(rng, sizes, transient=int(rng.integers(0, 3)))
    return random_subinvariant(rng, int(rng.integers(2, 8)), kill_prob=0.0, density=0.3)
