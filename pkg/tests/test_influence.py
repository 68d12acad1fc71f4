import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from ifladder.curvature import assemble_hessian, assemble_ladder, materialize
from ifladder.data import SubsetMask, synth_blobs
from ifladder.evaluation import spearman
from ifladder.influence import (BlockInverse, DenseInverse, InverseConfig, KroneckerInverse, group_attribution,
                                ihvp, influence_matrix, influence_scores, make_inverse)
from ifladder.linalg import pinv_sym
from ifladder.model import MLP, MlpConfig

from conftest import random_fixture


@pytest.fixture(scope="module")
def ladder():
    model, theta, X, y = random_fixture(11, 2, 4, n=25)
    return model, theta, X, y, assemble_ladder(model, theta, X, y)


def test_inverse_config_validation():
    assert InverseConfig().threshold == 1e-4
    with pytest.raises(ValueError, match="reserved"):
        InverseConfig(damping=0.1)
    with pytest.raises(ValueError):
        InverseConfig(threshold=-1.0)


def test_identity_curvature():
    v = np.arange(4.0)
    np.testing.assert_allclose(ihvp(DenseInverse(np.eye(4), 1e-4), v), v)


def test_nullspace_projection():
    np.testing.assert_array_equal(ihvp(DenseInverse(np.diag([2.0, 0.0]), 1e-4), np.array([0.0, 1.0])), 0.0)


@pytest.mark.parametrize("method", ["kfac", "ekfac"])
def test_kronecker_path_matches_dense_pinv(ladder, method):
    _, _, _, _, lad = ladder
    v = np.random.default_rng(0).standard_normal((lad.layout.dim, 3))
    dense = pinv_sym(materialize(method, lad), 1e-4) @ v
    fast = make_inverse(method, lad).solve(v)
    assert np.linalg.norm(fast - dense) <= 1e-8 * np.linalg.norm(dense)


def test_block_path_matches_dense_pinv(ladder):
    _, _, _, _, lad = ladder
    v = np.random.default_rng(1).standard_normal(lad.layout.dim)
    dense = pinv_sym(lad.block_ggn.matrix, 1e-4) @ v
    got = make_inverse("block_ggn", lad).solve(v)
    assert isinstance(make_inverse("block_ggn", lad), BlockInverse)
    assert np.linalg.norm(got - dense) <= 1e-8 * np.linalg.norm(dense)


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), method=st.sampled_from(["hessian", "ggn", "block_ggn", "ekfac", "kfac"]))
def test_ihvp_linear(ladder, a, b, method):
    _, _, _, _, lad = ladder
    gen = np.random.default_rng(2)
    v, w = gen.standard_normal(lad.layout.dim), gen.standard_normal(lad.layout.dim)
    inv = make_inverse(method, lad)
    lhs = inv.solve(a * v + b * w)
    rhs = a * inv.solve(v) + b * inv.solve(w)
    assert np.linalg.norm(lhs - rhs) <= 1e-9 * max(1.0, np.linalg.norm(rhs))


def test_full_rank_dense_solve():
    gen = np.random.default_rng(3)
    b = gen.standard_normal((6, 6))
    M = b @ b.T + np.eye(6)
    v = gen.standard_normal(6)
    assert np.linalg.norm(M @ DenseInverse(M, 1e-4).solve(v) - v) <= 1e-7 * np.linalg.norm(v)


def test_scores_identity_curvature():
    inv = DenseInverse(np.eye(3), 1e-4)
    q = np.array([1.0, 0.0, 0.0])
    train = np.array([[0.0, 2.0, -1.0], [3.0, 1.0, 0.0]])
    s = influence_scores("identity", inv, 0, q, train)
    assert s.scores[0] == 0.0 and s.scores[1] == 3.0
    s_self = influence_scores("identity", inv, 0, train[1], train)
    assert s_self.scores[1] == pytest.approx(np.sum(train[1] ** 2))


def test_influence_matrix_matches_per_query_scores(ladder):
    model, theta, X, y, lad = ladder
    inv = make_inverse("ekfac", lad)
    G = model.per_example_grads(theta, X, y)
    Q = G[:3]
    tau = influence_matrix(inv, Q, G)
    for q in range(3):
        np.testing.assert_allclose(tau[q], influence_scores("ekfac", inv, q, Q[q], G).scores, rtol=1e-12, atol=1e-14)


def test_scores_invariant_to_training_order(ladder):
    model, theta, X, y, lad = ladder
    inv = make_inverse("hessian", lad)
    G = model.per_example_grads(theta, X, y)
    perm = np.random.default_rng(0).permutation(len(y))
    a = influence_matrix(inv, G[:2], G)
    b = influence_matrix(inv, G[:2], G[perm])
    np.testing.assert_allclose(a[:, perm], b, rtol=1e-12)


def test_group_attribution():
    scores = np.array([1.0, -2.0, 0.5, 4.0])
    everything = SubsetMask(np.ones(4, dtype=bool), 0, 0.5)
    assert group_attribution(scores, everything) == pytest.approx(3.5)
    single = np.array([False, False, True, False])
    assert group_attribution(scores, single) == 0.5
    a = np.array([True, False, False, True])
    b = np.array([False, True, False, False])
    assert group_attribution(scores, a | b) == group_attribution(scores, a) + group_attribution(scores, b)
    with pytest.raises(ValueError):
        group_attribution(scores, np.ones(3, dtype=bool))


def test_influence_tracks_leave_one_out_on_convex_model():
    d = synth_blobs(41, 3, 2, 0)
    X, y = d.features[:40], d.labels[:40]
    xq, yq = d.features[40:], d.labels[40:]
    model = MLP(MlpConfig.uniform(0, 1, input_dim=2, classes=3))

    def fit(Xs, ys, t0):
        res = minimize(lambda t: model.loss_and_grad(t, Xs, ys), t0, jac=True, method="BFGS",
                       options={"gtol": 1e-12, "maxiter": 10_000})
        return res.x

    theta = fit(X, y, np.zeros(model.dim))
    H = assemble_hessian(model, theta, X, y).matrix
    tau = influence_scores("hessian", DenseInverse(H, 1e-4), 0, model.grad(theta, xq, yq),
                           model.per_example_grads(theta, X, y)).scores
    base = model.loss(theta, xq, yq)
    loo = [model.loss(fit(np.delete(X, m, 0), np.delete(y, m), theta), xq, yq) - base for m in range(40)]
    assert spearman(tau / 40, loo) >= 0.8


def test_kronecker_inverse_thresholds_product_spectrum(ladder):
    _, _, _, _, lad = ladder
    big = 1e6
    inv = KroneckerInverse(lad.kfac, lad.layout, big)
    assert all(np.all(s == 0.0) for s in inv.inv_scales)
