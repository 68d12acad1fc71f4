import numpy as np
import pytest

from ifladder.curvature import (CurvatureTooLarge, assemble_ggn, assemble_hessian, assemble_ladder,
                                assemble_residual, block_diagonal, ekfac_correct, kfac_factors, layer_blocks,
                                materialize, output_hessian, output_hessian_factor)
from ifladder.linalg import basis_overlap
from ifladder.model import MLP, MlpConfig, softmax

from conftest import random_fixture


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def fd_hessian_entry(model, theta, X, y, i, j, h=1e-4):
    def f(di, dj):
        t = theta.copy()
        t[i] += di
        t[j] += dj
        return model.loss(t, X, y)
    return (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4 * h * h)


def test_output_hessian_and_factor():
    p = softmax(np.random.default_rng(0).standard_normal((3, 5)))
    Hu = output_hessian(p)
    np.testing.assert_allclose(Hu.sum(axis=-1), 0.0, atol=1e-15)
    assert np.all(np.linalg.eigvalsh(Hu) >= -1e-15)
    B = output_hessian_factor(p)
    np.testing.assert_allclose(B @ np.swapaxes(B, 1, 2), Hu, atol=1e-15)


def test_output_hessian_matches_finite_differences_of_gradient():
    u = np.random.default_rng(1).standard_normal(4)
    h = 1e-6
    fd = np.stack([(softmax(u + h * e) - softmax(u - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    np.testing.assert_allclose(output_hessian(softmax(u)), fd, atol=1e-9)


def test_hessian_of_quadratic_like_linear_model_is_psd():
    model, theta, X, y = random_fixture(0, 0, 1)
    H = assemble_hessian(model, theta, X, y).matrix
    assert np.linalg.eigvalsh(H).min() >= -1e-8


def test_hessian_matches_double_finite_differences():
    model, theta, X, y = random_fixture(1, 2, 3)
    H = assemble_hessian(model, theta, X, y).matrix
    gen = np.random.default_rng(0)
    pairs = gen.integers(0, model.dim, size=(100, 2))
    fd = np.array([fd_hessian_entry(model, theta, X, y, i, j) for i, j in pairs])
    got = H[pairs[:, 0], pairs[:, 1]]
    assert np.linalg.norm(got - fd) / np.linalg.norm(fd) < 1e-5


@pytest.mark.parametrize("seed, depth, width", [(0, 1, 4), (1, 2, 3), (2, 3, 4)])
def test_hessian_equals_ggn_plus_residual(seed, depth, width):
    model, theta, X, y = random_fixture(seed, depth, width)
    H = assemble_hessian(model, theta, X, y).matrix
    G = assemble_ggn(model, theta, X, y).matrix
    R = assemble_residual(model, theta, X, y).matrix
    assert rel(G + R, H) < 1e-7
    assert np.linalg.eigvalsh(G).min() >= -1e-8 * np.linalg.norm(G)


def test_linear_model_has_no_residual():
    model, theta, X, y = random_fixture(2, 0, 1)
    H = assemble_hessian(model, theta, X, y).matrix
    G = assemble_ggn(model, theta, X, y).matrix
    assert rel(G, H) < 1e-10
    assert np.linalg.norm(assemble_residual(model, theta, X, y).matrix) < 1e-10


def test_single_example_uniform_probabilities():
    model = MLP(MlpConfig.uniform(1, 3, input_dim=2, classes=10))
    theta = model.init_params(0)
    W = model.layout.unflatten(theta)
    W[-1][:] = 0.0   # zero output layer gives p = 1/10
    theta = model.layout.flatten(W)
    x = np.array([[0.3, -0.7]])
    J = model.output_jacobian(theta, x[0])
    Hu = (np.eye(10) - np.ones((10, 10)) / 10) / 10
    np.testing.assert_allclose(assemble_ggn(model, theta, x, np.array([2])).matrix, J.T @ Hu @ J, atol=1e-15)


def test_residual_vanishes_with_output_gradient():
    """Saturating the logits on the labelled class drives p - y, and with it R, to zero."""
    model = MLP(MlpConfig.uniform(1, 4, input_dim=3, classes=3))
    X = np.random.default_rng(0).standard_normal((6, 3))
    y = np.zeros(6, dtype=int)

    def with_margin(margin):
        W = model.layout.unflatten(model.init_params(0))
        W[-1][:, -1] = [margin, 0.0, 0.0]
        return model.layout.flatten(W)

    H_ref = assemble_hessian(model, with_margin(0.0), X, y).matrix
    R_sat = assemble_residual(model, with_margin(20.0), X, y).matrix
    assert np.linalg.norm(R_sat) <= 1e-6 * np.linalg.norm(H_ref)


def test_cross_block_couplings_match_jacobian_blocks():
    model, theta, X, y = random_fixture(3, 2, 3)
    G = assemble_ggn(model, theta, X, y).matrix
    lay = model.layout
    for i in range(lay.n_layers):
        for j in range(lay.n_layers):
            acc = 0.0
            for k in range(len(y)):
                J = model.output_jacobian(theta, X[k])
                Hu = output_hessian(softmax(model.forward(theta, X[k])))
                acc = acc + J[:, lay.block(i)].T @ Hu @ J[:, lay.block(j)]
            np.testing.assert_allclose(G[lay.block(i), lay.block(j)], acc / len(y), atol=1e-8)


def test_block_diagonal():
    model, theta, X, y = random_fixture(4, 2, 3)
    G = assemble_ggn(model, theta, X, y)
    BG = block_diagonal(G)
    mask = np.zeros_like(G.matrix, dtype=bool)
    for l in range(model.layout.n_layers):
        mask[model.layout.block(l), model.layout.block(l)] = True
    assert np.all(BG.matrix[~mask] == 0.0)
    np.testing.assert_array_equal(BG.matrix[mask], G.matrix[mask])
    assert np.linalg.norm(G.matrix - BG.matrix) == pytest.approx(np.linalg.norm(G.matrix[~mask]), rel=1e-14)
    lin, t, X1, y1 = random_fixture(5, 0, 1)
    G1 = assemble_ggn(lin, t, X1, y1)
    np.testing.assert_array_equal(block_diagonal(G1).matrix, G1.matrix)


@pytest.mark.parametrize("seed, depth", [(0, 1), (1, 2), (2, 3)])
def test_single_sample_kronecker_exactness(seed, depth):
    model, theta, X, y = random_fixture(seed, depth, 4, n=1)
    G = assemble_ggn(model, theta, X, y)
    blocks = layer_blocks(G, model.layout)
    kf = kfac_factors(model, theta, X)
    ek = ekfac_correct(kf, model, theta, X)
    for G_l, k, e in zip(blocks, kf, ek):
        assert rel(k.materialize(), G_l) < 1e-8
        assert rel(e.materialize(), G_l) < 1e-8


def test_kfac_factor_properties():
    model, theta, X, y = random_fixture(6, 2, 3, n=20)
    kf = kfac_factors(model, theta, X)
    for b in kf:
        for M in (b.A, b.S):
            assert np.linalg.eigvalsh(M).min() >= -1e-10 * np.linalg.norm(M)
    ek = ekfac_correct(kf, model, theta, X)
    assert all(np.all(e.corrected_diag >= 0) for e in ek)


def test_kfac_input_factor_with_zero_inputs():
    model = MLP(MlpConfig.uniform(0, 1, input_dim=3, classes=2))
    A = kfac_factors(model, np.zeros(model.dim), np.zeros((4, 3)))[0].A
    expected = np.zeros((4, 4))
    expected[3, 3] = 1.0
    np.testing.assert_array_equal(A, expected)


def test_zero_pseudo_gradients_give_zero_correction():
    model = MLP(MlpConfig.uniform(1, 3, input_dim=2, classes=2))
    theta = model.init_params(0)
    W = model.layout.unflatten(theta)
    W[-1][:, -1] = [80.0, -80.0]   # p is one-hot up to underflow, so diag(p) - pp^T vanishes
    W[-1][:, :-1] = 0.0
    theta = model.layout.flatten(W)
    kf = kfac_factors(model, theta, np.ones((3, 2)))
    for e in ekfac_correct(kf, model, theta, np.ones((3, 2))):
        assert np.all(e.corrected_diag <= 1e-30)


def test_ekfac_is_frobenius_closer_and_shares_basis():
    model, theta, X, y = random_fixture(7, 2, 4, n=30)
    lad = assemble_ladder(model, theta, X, y)
    for G_l, k, e in zip(layer_blocks(lad.ggn, lad.layout), lad.kfac, lad.ekfac):
        assert np.linalg.norm(e.materialize() - G_l) <= np.linalg.norm(k.materialize() - G_l)
        u = k.basis()[:, k.basis_order()]
        for kk in (1, 3, k.dim):
            assert basis_overlap(u, u, kk) == pytest.approx(1.0, abs=1e-12)


def test_materialize_views():
    model, theta, X, y = random_fixture(8, 2, 3, n=15)
    lad = assemble_ladder(model, theta, X, y)
    K = materialize("kfac", lad)
    mask = np.zeros_like(K, dtype=bool)
    for l in range(lad.layout.n_layers):
        mask[lad.layout.block(l), lad.layout.block(l)] = True
    assert np.all(K[~mask] == 0.0)
    for kind in ("ggn", "block_ggn", "kfac", "ekfac"):
        M = materialize(kind, lad)
        assert np.linalg.eigvalsh(M).min() >= -1e-8 * np.linalg.norm(M)
    np.testing.assert_array_equal(materialize("hessian", lad), lad.hessian.matrix)
    with pytest.raises(ValueError):
        materialize("fisher", lad)


def test_dense_cap():
    model, theta, X, y = random_fixture(0, 1, 4)
    with pytest.raises(CurvatureTooLarge, match="block-only"):
        assemble_hessian(model, theta, X, y, max_dim=10)


def test_ladder_is_deterministic():
    model, theta, X, y = random_fixture(9, 2, 3)
    a = assemble_ladder(model, theta, X, y)
    b = assemble_ladder(model, theta, X, y)
    assert a.hessian.matrix.tobytes() == b.hessian.matrix.tobytes()
    assert a.ggn.matrix.tobytes() == b.ggn.matrix.tobytes()
    assert all(x.corrected_diag.tobytes() == z.corrected_diag.tobytes() for x, z in zip(a.ekfac, b.ekfac))
