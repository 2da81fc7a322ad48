import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import random_submarkov, two_blocks, two_state
from mpk import MarkovModel, resolvent_apply, semigroup_apply
from mpk.errors import NegativeFunction
from mpk.excessive import (
    harmonic_residual,
    is_excessive,
    is_harmonic,
    is_supermedian,
    rao_decompose,
    time_grid,
)

seeds = st.integers(0, 2**32 - 1)


def drift_oracle(model, u, beta):
    """Finite-space criterion: u >= 0 is beta-supermedian iff (beta - L) u >= 0."""
    if model.is_ctmc:
        return beta * u - model.generator @ u
    return math.exp(beta) * u - model.matrix @ u


# --- examples ----------------------------------------------------------------


def test_constant_on_conservative_model():
    v = is_excessive(two_state(), [1, 1], 0.0)
    assert v.is_supermedian and v.is_excessive and v.passed


def test_indicator_not_supermedian():
    v = is_supermedian(two_state(), [1, 0], 0.0)
    assert not v.passed
    assert v.witness_state == "b"
    # largest violation of P_t u(b) = (1 - e^{-2t})/2 on the time grid
    t_max = time_grid()[-1]
    assert v.worst_violation == pytest.approx((1 - math.exp(-2 * t_max)) / 2, abs=1e-12)


def test_potential_is_excessive():
    u = resolvent_apply(two_state(), 1.0, [1, 0])
    np.testing.assert_allclose(u, [2 / 3, 1 / 3], atol=1e-15)
    assert is_supermedian(two_state(), u, 1.0).passed
    assert is_excessive(two_state(), u, 1.0).passed


@pytest.mark.parametrize("beta", [0.0, 0.5, 3.0])
def test_zero_function(beta):
    assert is_excessive(two_state(), [0, 0], beta).passed


def test_identity_semigroup():
    model = MarkovModel.ctmc(np.zeros((2, 2)))
    assert is_excessive(model, [1, 0], 0.0).passed


def test_negative_function_rejected():
    with pytest.raises(NegativeFunction):
        is_supermedian(two_state(), [1, -0.5])


def test_verdict_json_shape():
    data = json.loads(json.dumps(is_excessive(two_state(), [1, 0], 0.0).to_json()))
    assert data["property"] == "excessive" and data["pass"] is False
    assert set(data["witness"]) == {"state", "parameter"}
    assert data["tolerance"] > 0


def test_decomposition_by_hand():
    dec = rao_decompose(two_state(), [1, 0], 1.0)
    np.testing.assert_allclose(dec.f_plus, [2, 0], atol=1e-15)
    np.testing.assert_allclose(dec.f_minus, [0, 1], atol=1e-15)
    np.testing.assert_allclose(dec.u1, [4 / 3, 2 / 3], atol=1e-14)
    np.testing.assert_allclose(dec.u2, [1 / 3, 2 / 3], atol=1e-14)
    assert dec.reassembly_residual <= 1e-14
    assert all(c.passed for c in dec.certificates)


def test_decomposition_of_zero():
    dec = rao_decompose(two_state(), [0, 0], 2.0)
    assert not dec.u1.any() and not dec.u2.any()


def test_decomposition_of_potential():
    model = two_state()
    u = resolvent_apply(model, 2.0, [0.3, 1.1])
    dec = rao_decompose(model, u, 2.0)
    np.testing.assert_allclose(dec.u1, u, atol=1e-14)
    np.testing.assert_allclose(dec.u2, 0, atol=1e-14)


def test_decomposition_requires_positive_beta():
    with pytest.raises(ValueError):
        rao_decompose(two_state(), [1, 0], 0.0)


def test_harmonic_examples():
    assert harmonic_residual(two_state(), [2, 2]) == 0.0
    assert harmonic_residual(two_blocks(), [1, 1, 0, 0]) <= 1e-15
    assert harmonic_residual(two_state(), [1, 0]) == 1.0
    assert is_harmonic(two_blocks(), [0, 0, 3, 3]).passed
    assert not is_harmonic(two_state(), [1, 0]).passed


def test_dtmc_excessive():
    model = MarkovModel.dtmc([[0.5, 0.5], [0.25, 0.25]])
    u = np.array([1.0, 0.5])
    assert (drift_oracle(model, u, 0.0) >= 0).all()
    assert is_excessive(model, u, 0.0).passed
    assert not is_excessive(model, [0.1, 1.0], 0.0).passed


# --- properties --------------------------------------------------------------


@settings(max_examples=80, deadline=None)
@given(seed=seeds, n=st.integers(1, 8), beta=st.sampled_from([0.0, 0.5, 1.0, 2.0]))
def test_matches_drift_oracle(seed, n, beta):
    rng = np.random.default_rng(seed)
    model = random_submarkov(rng, n)
    u = rng.uniform(0, 1, n) * (rng.random(n) < 0.8)
    f = drift_oracle(model, u, beta)
    # skip the near-boundary cases the grids cannot resolve
    assume(f.min() >= 0 or f.min() < -1e-3 * (1 + np.abs(u).max()))
    assert is_excessive(model, u, beta).passed == bool(f.min() >= 0)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, n=st.integers(1, 8))
def test_potentials_excessive_and_closure(seed, n):
    rng = np.random.default_rng(seed)
    model = random_submarkov(rng, n)
    beta = float(rng.choice([0.5, 1.0, 2.0]))
    u = resolvent_apply(model, beta, rng.uniform(0, 1, n))
    v = resolvent_apply(model, beta, rng.uniform(0, 1, n) * (rng.random(n) < 0.5))
    for w in (u, v, u + v, 3.7 * u, np.minimum(u, v)):
        assert is_excessive(model, w, beta).passed
    # monotone in beta
    assert is_excessive(model, u, beta + 1.5).passed


@settings(max_examples=40, deadline=None)
@given(seed=seeds, n=st.integers(1, 8), beta=st.sampled_from([0.5, 1.0, 2.0]))
def test_decomposition_round_trip(seed, n, beta):
    rng = np.random.default_rng(seed)
    model = random_submarkov(rng, n)
    u = rng.normal(size=n)
    dec = rao_decompose(model, u, beta)
    assert np.abs(dec.u1 - dec.u2 - u).max() <= 1e-10 * (1 + np.abs(u).max())
    assert all(c.passed for c in dec.certificates)
    assert (dec.f_plus >= 0).all() and (dec.f_minus >= 0).all()
    assert not (dec.f_plus * dec.f_minus).any()


@settings(max_examples=40, deadline=None)
@given(seed=seeds, n=st.integers(1, 8), beta=st.sampled_from([0.0, 1.0]))
def test_supermartingale_inequality_on_time_grid(seed, n, beta):
    rng = np.random.default_rng(seed)
    model = random_submarkov(rng, n)
    u = rng.uniform(0, 1, n)
    f = drift_oracle(model, u, beta)
    assume(f.min() >= 0 or f.min() < -1e-3)
    verdict = is_excessive(model, u, beta).passed
    assert verdict == (f.min() >= 0)
    tol = 1e-10 * (1 + u.max())
    on_grid = all((semigroup_apply(model, t, u, beta) - u).max() <= tol for t in time_grid())
    if verdict:
        assert on_grid
    elif on_grid:
        # a violation confined below the smallest grid time: it must show up there
        fine = 2.0 ** -np.arange(6, 30)
        assert any((semigroup_apply(model, t, u, beta) - u).max() > 0 for t in fine)
