import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import (
    killed_one,
    random_mixed_model,
    random_subinvariant,
    three_symmetric,
    two_blocks,
    two_state,
)
from mpk import MarkovModel, resolvent_apply
from mpk.duality import (
    check_subinvariant,
    dirichlet_bound_constant,
    dirichlet_form,
    dual_model,
    dual_resolvent_apply,
    duality_residual,
    equivalence_suite,
    invariant_partition,
    is_U_invariant,
    lattice_closure_check,
)
from mpk.errors import InputNotInvariant, NotSubInvariant
from mpk.excessive import alpha_grid, is_excessive

seeds = st.integers(0, 2**32 - 1)


def blocks_oracle(model):
    """Atoms by brute force: merge states joined by a positive U_1 entry (either direction)."""
    S = [i for i in range(model.n) if model.measure[i] > 0]
    U = np.linalg.inv(np.eye(model.n) - model.generator)
    parent = {i: i for i in S}

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i, j in itertools.product(S, S):
        if U[i, j] > 1e-12:  # inverse round-off leaves ~1e-16 entries
            parent[find(i)] = find(j)
    groups = {}
    for i in S:
        groups.setdefault(find(i), []).append(i)
    return sorted(sorted(g) for g in groups.values())


# --- sub-invariance and the dual ---------------------------------------------


def test_subinvariance_examples():
    assert check_subinvariant(three_symmetric()).passed
    assert check_subinvariant(killed_one()).passed
    bad = MarkovModel.ctmc([[-1.0, 1.0], [0.0, 0.0]], measure=[1.0, 0.0])
    v = check_subinvariant(bad)
    assert not v.passed and v.witness_state == "1"
    assert v.worst_violation == pytest.approx(1.0)


def test_self_dual_symmetric():
    model = three_symmetric()
    dual = dual_model(model)
    np.testing.assert_allclose(dual.generator, model.generator, atol=1e-15)
    f = np.array([0.2, -1.0, 3.0])
    np.testing.assert_allclose(dual_resolvent_apply(dual, 2.0, f), resolvent_apply(model, 2.0, f), atol=1e-14)


def test_dual_two_state_by_hand():
    model = MarkovModel.ctmc([[-2.0, 1.0], [1.0, -1.0]], measure=[1.0, 2.0])
    dual = dual_model(model)
    np.testing.assert_allclose(dual.generator, [[-2.0, 2.0], [0.5, -1.0]], atol=1e-15)
    f, g = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    # <f, U_1 g>_m with (I - Q)^-1 = [[2,1],[1,3]] / 5
    U1 = np.array([[2.0, 1.0], [1.0, 3.0]]) / 5
    lhs = float(f * (U1 @ g) @ model.measure)
    assert lhs == pytest.approx(0.2, abs=1e-15)
    assert duality_residual(dual, 1.0, f, g) <= 1e-14


def test_dual_conservative_constant():
    dual = dual_model(two_state())
    np.testing.assert_allclose(dual_resolvent_apply(dual, 4.0, [1, 1]), [0.25, 0.25], atol=1e-15)


def test_dual_requires_subinvariance():
    with pytest.raises(NotSubInvariant):
        dual_model(MarkovModel.ctmc([[-1.0, 1.0], [0.0, 0.0]], measure=[1.0, 0.0]))


@settings(max_examples=40, deadline=None)
@given(seed=seeds, n=st.integers(1, 10))
def test_duality_pairing(seed, n):
    rng = np.random.default_rng(seed)
    model = random_subinvariant(rng, n)
    dual = dual_model(model)
    k = np.abs(dual.generator).max()
    assert (dual.generator - np.diag(np.diag(dual.generator)) >= 0).all()
    assert (dual.generator.sum(axis=1) <= 1e-12 * (1 + k)).all()
    f, g = rng.normal(size=n), rng.normal(size=n)
    for a in alpha_grid()[::8]:
        assert duality_residual(dual, a, f, g) <= 1e-10 * (1 + np.abs(f).max() * np.abs(g).max())


# --- invariance ----------------------------------------------------------------


def test_invariance_examples():
    assert is_U_invariant(two_state(), [3, 3]).passed
    assert is_U_invariant(two_blocks(), [1, 1, 0, 0]).passed
    v = is_U_invariant(two_state(), [1, 0])
    assert not v.passed
    # the scaled off-diagonal entry of alpha U_alpha is 1/(alpha + 2), largest at alpha = 1/2
    assert v.worst_violation == pytest.approx(0.4, abs=1e-14)


def test_partition_examples():
    assert len(invariant_partition(three_symmetric()).blocks) == 1
    assert [b.tolist() for b in invariant_partition(two_blocks()).blocks] == [[0, 1], [2, 3]]
    assert len(invariant_partition(MarkovModel.ctmc(np.zeros((3, 3)))).blocks) == 3


def test_zero_mass_states_excluded():
    model = MarkovModel.ctmc([[-1.0, 1.0], [0.0, 0.0]], measure=[0.0, 1.0])
    part = invariant_partition(model)
    assert part.excluded == ["0"] and [b.tolist() for b in part.blocks] == [[1]]
    assert is_U_invariant(model, [5.0, 1.0]).passed


@settings(max_examples=60, deadline=None)
@given(seed=seeds)
def test_partition_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    model = random_mixed_model(rng)
    part = invariant_partition(model)
    assert sorted(b.tolist() for b in part.blocks) == blocks_oracle(model)


@settings(max_examples=60, deadline=None)
@given(seed=seeds)
def test_primal_dual_invariance_agree(seed):
    rng = np.random.default_rng(seed)
    model = random_mixed_model(rng)
    part = invariant_partition(model)
    if rng.random() < 0.5:
        v = sum(rng.normal() * part.indicator(b, model.n) for b in range(len(part.blocks)))
    else:
        v = rng.normal(size=model.n)
    assert is_U_invariant(model, v).passed == is_U_invariant(model, v, dual=True).passed


@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_nonnegative_invariant_has_excessive_version(seed):
    rng = np.random.default_rng(seed)
    model = random_mixed_model(rng)
    part = invariant_partition(model)
    v = sum(rng.uniform(0, 2) * part.indicator(b, model.n) for b in range(len(part.blocks)))
    assert is_U_invariant(model, v).passed
    # positive-mass states form a closed set, so raising v to max(v) off it gives L u <= 0
    u = np.where(model.positive_mass, v, v.max())
    assert is_excessive(model, u, 0.0).passed
    np.testing.assert_array_equal(u[model.positive_mass], v[model.positive_mass])


# --- lattice -------------------------------------------------------------------


def test_lattice_examples():
    model = two_blocks()
    assert lattice_closure_check(model, [1, 1, 1, 1], [2, 2, 2, 2]).passed
    v = lattice_closure_check(model, [1, 1, 0, 0], [0, 0, 1, 1])
    assert v.passed and v.details["max"]
    assert lattice_closure_check(model, [1, 1, -3, -3], [-1, -1, 3, 3]).passed


def test_lattice_rejects_non_invariant():
    with pytest.raises(InputNotInvariant):
        lattice_closure_check(two_state(), [1, 0], [1, 1])


# --- equivalence suite ---------------------------------------------------------


def test_all_true_for_constant():
    em = equivalence_suite(three_symmetric(), [2, 2, 2])
    assert all(em.conditions.values()) and em.conservative


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_killed_gap(alpha):
    em = equivalence_suite(killed_one(), [1.0], alpha=alpha)
    c = em.conditions
    assert c["iii"] and c["iv"] and c["v"]
    assert not c["i"] and not c["ii"]
    assert abs(em.residuals["i"] - 1 / (1 + alpha)) <= 1e-12
    assert em.regime == "killed"


def test_block_indicator_all_true():
    em = equivalence_suite(two_blocks(), [1, 1, 0, 0])
    assert all(em.conditions.values())


def test_equivalence_requires_subinvariance():
    with pytest.raises(NotSubInvariant):
        equivalence_suite(MarkovModel.ctmc([[-1.0, 1.0], [0.0, 0.0]], measure=[1.0, 0.0]), [1, 1])


@settings(max_examples=60, deadline=None)
@given(seed=seeds)
def test_structure_on_random_models(seed):
    rng = np.random.default_rng(seed)
    model = random_mixed_model(rng)
    n = model.n
    part = invariant_partition(model)
    h = np.zeros(n)
    if np.abs(model.generator.sum(axis=1)).max() <= 1e-12:
        h = part.indicator(0, n)
    candidates = [
        np.ones(n),
        part.indicator(0, n),
        rng.normal(size=n),
        h,
        np.linspace(-1, 1, n),
    ]
    for u in candidates:
        em = equivalence_suite(model, u)
        assert em.structural_ok()


# --- Dirichlet form ------------------------------------------------------------


def test_dirichlet_examples():
    model = two_state()
    assert dirichlet_form(model, [1, 0], [1, -1]) == pytest.approx(1.0, abs=1e-15)
    assert dirichlet_bound_constant(model, [1, 0]) == pytest.approx(1.0, abs=1e-15)
    assert dirichlet_form(model, [1, 1], [0.3, -7]) == 0.0
    assert dirichlet_bound_constant(model, [1, 1]) == 0.0


def test_dirichlet_needs_full_support():
    model = MarkovModel.ctmc([[-1.0, 1.0], [0.0, 0.0]], measure=[0.0, 1.0])
    with pytest.raises(NotSubInvariant):
        dirichlet_form(model, [1, 0], [1, 0])


@settings(max_examples=40, deadline=None)
@given(seed=seeds, n=st.integers(1, 8))
def test_bound_constant_is_sign_supremum(seed, n):
    rng = np.random.default_rng(seed)
    model = random_subinvariant(rng, n)
    u = rng.normal(size=n)
    F = [i for i in range(n) if rng.random() < 0.6]
    best = 0.0
    for signs in itertools.product((-1.0, 1.0), repeat=len(F)):
        v = np.zeros(n)
        v[F] = signs
        best = max(best, dirichlet_form(model, u, v))
    assert dirichlet_bound_constant(model, u, F) == pytest.approx(best, abs=1e-12)
