import math

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import killed_one, three_symmetric, two_blocks, two_state
from mpk import MarkovModel, resolvent_apply
from mpk.errors import PrecisionBudget
from mpk.quasivar import Partition, dyadic_sequence, variation_on_partition
from mpk.trajectory_sim import (
    DEAD,
    empirical_variation,
    martingale_test,
    occupation_frequencies,
    sample_path,
    simulate_states,
    supermartingale_test,
)

N = 100_000


def test_constant_path_without_jumps():
    model = MarkovModel.ctmc(np.zeros((2, 2)))
    path = sample_path(model, 1, 10.0, seed=3)
    assert path.state_at(0.0) == 1 and path.state_at(9.99) == 1
    assert math.isinf(path.lifetime)


def test_killed_lifetime_mean():
    lifetimes = np.array([sample_path(killed_one(), 0, 1e9, seed=11, path_index=i).lifetime for i in range(20_000)])
    se = lifetimes.std(ddof=1) / math.sqrt(lifetimes.size)
    assert abs(lifetimes.mean() - 1.0) <= 3 * se


def test_trajectory_after_death_is_zero():
    path = sample_path(killed_one(), 0, 1e9, seed=5)
    assert path.state_at(path.lifetime) == DEAD
    assert path.evaluate([7.0], path.lifetime + 1) == 0.0
    assert np.all(np.diff(path.jump_times) > 0)


def test_sample_path_deterministic():
    a = sample_path(three_symmetric(), "x", 20.0, seed=9, path_index=4)
    b = sample_path(three_symmetric(), "x", 20.0, seed=9, path_index=4)
    np.testing.assert_array_equal(a.jump_times, b.jump_times)
    np.testing.assert_array_equal(a.states, b.states)


def test_simulate_states_deterministic_and_blocked():
    a = simulate_states(three_symmetric(), 0, [0.5, 2.0], 10_000, seed=1)
    b = simulate_states(three_symmetric(), 0, [0.5, 2.0], 10_000, seed=1)
    np.testing.assert_array_equal(a, b)
    # the first 4096 paths do not depend on how many paths are requested
    c = simulate_states(three_symmetric(), 0, [0.5, 2.0], 4096, seed=1)
    np.testing.assert_array_equal(a[:4096], c)


def test_occupation_two_state():
    freq = occupation_frequencies(two_state(), "a", 1.0, N, seed=2)
    p = (1 + math.exp(-2)) / 2
    se = math.sqrt(p * (1 - p) / N)
    assert abs(freq[0] - p) <= 3 * se
    assert freq[-1] == 0.0


def test_chapman_kolmogorov_chi_square():
    model = three_symmetric()
    t = 0.7
    freq = occupation_frequencies(model, "y", t, N, seed=4)
    from scipy.linalg import expm

    row = expm(t * model.generator)[1]
    stat = chisquare(freq[:3] * N, row * N)
    assert stat.pvalue > 1e-3


def test_occupation_with_killing():
    model = MarkovModel.ctmc([[-2.0, 1.0], [0.5, -0.5]])
    freq = occupation_frequencies(model, 0, 1.0, N, seed=8)
    from scipy.linalg import expm

    P = expm(model.generator)[0]
    dead = 1 - P.sum()
    stat = chisquare(freq * N, np.append(P, dead) * N)
    assert stat.pvalue > 1e-3


# --- supermartingale / martingale ------------------------------------------------


def test_supermartingale_constant_exact():
    rep = supermartingale_test(two_state(), [1, 1], 0.0, "a", [0.5, 1, 2], 1000, seed=0)
    assert rep.passed
    np.testing.assert_array_equal(rep.estimate, 1.0)


def test_supermartingale_killed_survival():
    rep = supermartingale_test(killed_one(), [1.0], 0.0, 0, [1.0], N, seed=1)
    assert rep.passed
    assert abs(rep.estimate[0] - math.exp(-1)) <= 3 * rep.standard_error[0]
    assert rep.estimate[0] <= 1.0


def test_supermartingale_potential():
    model = two_state()
    u = resolvent_apply(model, 1.0, [1, 0])
    rep = supermartingale_test(model, u, 1.0, "a", [0.25, 0.5, 1, 2], N, seed=2)
    assert rep.passed
    assert max(rep.details["drift_vs_initial"]) <= 0


def test_supermartingale_negative_control():
    rep = supermartingale_test(two_state(), [1, 0], 0.0, "b", [0.5, 1.0], N, seed=3, check=False)
    assert not rep.passed


def test_supermartingale_precondition():
    with pytest.raises(ValueError):
        supermartingale_test(two_state(), [1, 0], 0.0, "b", [1.0], 100, seed=3)


def test_martingale_examples():
    assert martingale_test(two_state(), [2, 2], "a", [1, 5], 1000, seed=0).passed
    rep = martingale_test(two_blocks(), [1, 1, 0, 0], 0, [0.5, 3.0], N, seed=1)
    assert rep.passed
    np.testing.assert_array_equal(rep.estimate, 1.0)


def test_martingale_negative_control():
    rep = martingale_test(two_state(), [1, 0], "a", [0.5, 1.0], N, seed=2, check=False)
    assert not rep.passed


def test_precision_budget():
    with pytest.raises(PrecisionBudget):
        supermartingale_test(two_state(), resolvent_apply(two_state(), 1.0, [1, 0]), 1.0, "a", [1.0], 50,
                             seed=0, se_target=1e-6)


# --- variation -------------------------------------------------------------------


def test_variation_zero_function():
    rep = empirical_variation(two_state(), [0, 0], 1.0, "a", Partition((0, 0.5, 1)), 1000, seed=0)
    assert rep.estimate[0] == 0.0 and rep.passed


def test_variation_two_state_half_steps():
    tau = Partition((0.0, 0.5, 1.0))
    for x in ("a", "b"):
        rep = empirical_variation(two_state(), [1, 0], 1.0, x, tau, N, seed=5)
        assert rep.passed
        i = 0 if x == "a" else 1
        assert rep.target[0] == pytest.approx(variation_on_partition(two_state(), [1, 0], 1.0, tau)[i])


def test_variation_of_excessive_equals_initial_value():
    model = two_state()
    u = resolvent_apply(model, 1.0, [1, 0])
    rep = empirical_variation(model, u, 1.0, "a", dyadic_sequence(1.0, 3).level(3), N, seed=6)
    assert rep.passed
    assert rep.target[0] == pytest.approx(u[0], abs=1e-12)
