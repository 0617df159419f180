import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgating.gating import (
    GatedParams,
    balance_report,
    balanced_from_effective,
    collapse,
    grads_from_effective,
    identity_gated,
    imbalance,
    leave_one_out_products,
    misalignment,
    nonsmooth_penalty,
    squared_factors,
    surrogate_penalty,
)
from dgating.grouping import contiguous, group_norms
from dgating.models import Dataset, LinearModel
from dgating.numerics import ContractError, Rng


def gp(omega, gamma, depth, sizes):
    return GatedParams(np.array(omega, float), np.array(gamma, float), depth, contiguous(sizes))


def test_gated_params_validation():
    part = contiguous([2])
    with pytest.raises(ContractError):
        GatedParams(np.ones(2), np.ones((1, 1)), 1, part)
    with pytest.raises(ContractError):
        GatedParams(np.ones(3), np.ones((1, 1)), 2, part)
    with pytest.raises(ContractError):
        GatedParams(np.ones(2), np.ones((1, 2)), 2, part)
    with pytest.raises(ContractError):
        GatedParams(np.array([1.0, np.nan]), np.ones((1, 1)), 2, part)


def test_collapse_examples():
    np.testing.assert_array_equal(collapse(gp([1, 2], [[2, 3]], 3, [2])), [6, 12])
    omega = Rng(0).normal(5)
    np.testing.assert_array_equal(collapse(identity_gated(omega, contiguous([2, 3]), 4)), omega)
    g = gp([1, 2, 3, 4, 5], [[0, 2], [1, 1]], 3, [2, 3])
    np.testing.assert_array_equal(collapse(g)[:2], [0, 0])


def test_balanced_examples():
    g = balanced_from_effective([6.0, 8.0], contiguous([2]), 2)
    assert g.gamma[0, 0] == pytest.approx(np.sqrt(10))
    np.testing.assert_allclose(g.omega, np.array([6, 8]) / np.sqrt(10))
    assert g.omega @ g.omega == pytest.approx(10.0)

    g = balanced_from_effective([8.0], contiguous([1]), 3)
    np.testing.assert_allclose(g.gamma, [[2.0, 2.0]])
    np.testing.assert_allclose(g.omega, [2.0])
    np.testing.assert_allclose(squared_factors(g), [[4.0, 4.0, 4.0]])

    for D in (2, 3, 5):
        g = balanced_from_effective(np.zeros(3), contiguous([3]), D)
        assert not g.omega.any() and not g.gamma.any()


def test_surrogate_examples():
    g = balanced_from_effective([8.0], contiguous([1]), 3)
    assert surrogate_penalty(g) == pytest.approx(4.0)
    assert surrogate_penalty(gp([0, 0], [[0]], 2, [2])) == 0.0
    assert surrogate_penalty(gp([1, 1], [[3]], 2, [2])) == 5.5


def test_nonsmooth_examples():
    part = contiguous([2, 3])
    w = [3, 4, 0, 0, 0]
    assert nonsmooth_penalty(w, part, 2) == pytest.approx(5.0)
    assert nonsmooth_penalty(w, part, 4) == pytest.approx(2.2360679, abs=1e-7)
    assert nonsmooth_penalty(np.zeros(5), part, 3) == 0.0


def test_misalignment_examples():
    g = balanced_from_effective(Rng(1).normal(6), contiguous([2, 4]), 3)
    assert abs(misalignment(g)) <= 1e-12
    assert misalignment(gp([2], [[1]], 2, [1])) == pytest.approx(0.5)
    assert misalignment(gp([0, 0], [[0, 0]], 3, [2])) == 0.0


def test_misalignment_frozen_value():
    # omega=(1,2), gates (2, 0.5), D=3: (5 + 4 + 0.25)/3 - (sqrt(5))^(2/3)
    g = gp([1, 2], [[2, 0.5]], 3, [2])
    assert misalignment(g) == pytest.approx(9.25 / 3 - 5 ** (1 / 3), rel=1e-14)


def test_imbalance_examples():
    g = balanced_from_effective(Rng(2).normal(5), contiguous([2, 3]), 4)
    for j in range(2):
        for d in range(1, 5):
            for d2 in range(1, 5):
                if d != d2:
                    assert imbalance(g, j, d, d2) == pytest.approx(0.0, abs=1e-12)
    assert imbalance(gp([1, 2], [[2]], 2, [2]), 0, 1, 2) == pytest.approx(1.0)
    assert imbalance(gp([1], [[3, 3]], 3, [1]), 0, 2, 3) == 0.0
    with pytest.raises(ContractError):
        imbalance(g, 0, 2, 2)
    with pytest.raises(ContractError):
        imbalance(g, 0, 1, 5)


def test_imbalance_sign_convention():
    g = gp([1, 2], [[2]], 2, [2])
    assert imbalance(g, 0, 2, 1) == -imbalance(g, 0, 1, 2)


def test_balance_report_examples():
    g = balanced_from_effective(Rng(3).normal(4), contiguous([1, 3]), 3)
    np.testing.assert_allclose(balance_report(g).per_group_imbalance_max, 0.0, atol=1e-12)
    rep = balance_report(gp([1, 2], [[2, 1]], 3, [2]))
    assert rep.per_group_imbalance_max[0] == pytest.approx(4.0)
    rep = balance_report(gp([0, 0], [[0, 0]], 3, [2]))
    assert rep.imbalance_max == 0.0 and rep.misalignment == 0.0


def test_grads_examples():
    g = gp([1], [[1, 1]], 3, [1])
    go, gg = grads_from_effective(g, [-2.0], 0.0)
    np.testing.assert_allclose(go, [-2.0])
    np.testing.assert_allclose(gg, [[-2.0, -2.0]])
    go, gg = grads_from_effective(g, [-2.0], 0.3)
    np.testing.assert_allclose(go, [-1.8])
    np.testing.assert_allclose(gg, [[-1.8, -1.8]])
    g = gp(Rng(4).normal(5), Rng(5).normal((2, 3)), 4, [2, 3])
    go, gg = grads_from_effective(g, np.zeros(5), 0.0)
    assert not go.any() and not gg.any()
    with pytest.raises(ContractError):
        grads_from_effective(g, np.zeros(4), 0.0)


def test_leave_one_out_with_zero_gate():
    gamma = np.array([[0.0, 2.0, 3.0], [1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(leave_one_out_products(gamma), [[6, 0, 0], [0, 0, 0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_leave_one_out_matches_brute_force(J, k, seed):
    r = Rng(seed)
    gamma = r.normal((J, k))
    gamma[r.uniform((J, k)) < 0.2] = 0.0
    brute = np.array([[np.prod(np.delete(row, d)) for d in range(k)] for row in gamma])
    np.testing.assert_allclose(leave_one_out_products(gamma), brute, rtol=1e-14, atol=0)


def test_annihilation():
    g = gp([1, 2, 3], [[0.0, 5.0], [1.0, 2.0]], 3, [2, 1])
    np.testing.assert_array_equal(collapse(g)[:2], [0, 0])
    go, _ = grads_from_effective(g, np.array([1.0, -3.0, 2.0]), 0.0)
    np.testing.assert_array_equal(go[:2], [0, 0])


def test_grads_match_finite_differences():
    rng = Rng(6)
    part = contiguous([2, 3, 1])
    data = Dataset(rng.normal((9, 6)), rng.normal(9))
    model = LinearModel(part)
    lam, h = 0.4, 1e-6
    for D in (2, 3, 4):
        g = GatedParams(rng.normal(6), 0.5 + rng.uniform((3, D - 1)), D, part)

        def f(x):
            gx = GatedParams(x[:6], x[6:].reshape(3, D - 1), D, part)
            return model.loss_grad(data, collapse(gx))[0] + lam * surrogate_penalty(gx)

        go, gg = grads_from_effective(g, model.loss_grad(data, collapse(g))[1], lam)
        x0 = np.concatenate([g.omega, g.gamma.ravel()])
        num = np.array([(f(x0 + h * e) - f(x0 - h * e)) / (2 * h) for e in np.eye(x0.size)])
        ana = np.concatenate([go, gg.ravel()])
        assert np.max(np.abs(ana - num)) / np.max(np.abs(num)) < 1e-5


def random_triple(r):
    sizes = [int(s) for s in 1 + (r.uniform(1 + int(r.uniform() * 6)) * 4).astype(int)]
    part = contiguous(sizes)
    w = r.normal(part.p) * np.exp(r.normal(part.p))
    zero = r.uniform(part.n_groups) < 0.25
    w[zero[part.labels]] = 0.0
    return w, part, 2 + int(r.uniform() * 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_round_trip_and_balance(seed):
    w, part, D = random_triple(Rng(seed))
    g = balanced_from_effective(w, part, D)
    back = collapse(g)
    norms = group_norms(part, w)
    err = group_norms(part, back - w)
    assert np.all(err <= 1e-12 * np.maximum(norms, 1e-300))
    a = squared_factors(g)
    target = norms ** (2.0 / D)
    assert np.allclose(a, target[:, None], rtol=1e-12, atol=0)
    assert abs(misalignment(g)) <= 1e-12 * max(1.0, surrogate_penalty(g))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_misalignment_nonnegative_and_zero_iff_balanced(seed):
    r = Rng(seed)
    part = contiguous([2, 3])
    D = 2 + int(r.uniform() * 3)
    g = GatedParams(r.normal(5), r.normal((2, D - 1)), D, part)
    assert misalignment(g) >= -1e-12
    rep = balance_report(g)
    assert np.all(rep.per_group_imbalance_max >= -1e-12)
    if rep.imbalance_max > 1e-6:
        assert misalignment(g) > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 10.0))
def test_balanced_loss_simplification(seed, lam):
    r = Rng(seed)
    w, part, D = random_triple(r)
    data = Dataset(r.normal((5, part.p)), r.normal(5))
    model = LinearModel(part)
    g = balanced_from_effective(w, part, D)
    gated = model.loss_grad(data, collapse(g))[0] + lam * surrogate_penalty(g)
    direct = model.loss_grad(data, w)[0] + lam * nonsmooth_penalty(w, part, D)
    assert gated == pytest.approx(direct, rel=1e-10, abs=1e-10)


def test_json_round_trip():
    g = gp([1, -2, 3], [[0.5, 2.0], [1.0, -1.0]], 3, [2, 1])
    back = GatedParams.from_json(json.loads(json.dumps(g.to_json())))
    np.testing.assert_array_equal(back.omega, g.omega)
    np.testing.assert_array_equal(back.gamma, g.gamma)
    assert back.depth == 3 and back.partition == g.partition
    assert set(g.to_json()) == {"depth", "omega", "gamma", "partition"}
