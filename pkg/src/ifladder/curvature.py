"""The curvature approximation ladder at a fixed parameter vector.

Hessian -> GGN -> block-diagonal GGN -> EK-FAC -> K-FAC. Every dense
matrix is D x D in the flat parameter ordering of :class:`ParamLayout`.
Per-example contributions are accumulated in ascending example order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import EigenDecomp, eig_sym, kron
from .model import MLP, ParamLayout, softmax

MAX_DENSE_DIM = 12_000
METHODS = ("hessian", "ggn", "block_ggn", "ekfac", "kfac")
REDUCTION_ORDER = "sequential over examples in ascending index order, chunked; chunk sums added in order"
# Elements of the per-chunk (examples, classes, D) Jacobian tensor.
_GGN_BUDGET = 4_000_000


class CurvatureTooLarge(ValueError):
    pass


@dataclass
class CurvatureMatrix:
    kind: str
    matrix: np.ndarray
    layout: ParamLayout
    sample_count: int


@dataclass
class KroneckerBlock:
    layer: int
    A: np.ndarray
    S: np.ndarray
    eigA: EigenDecomp
    eigS: EigenDecomp
    corrected_diag: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.A.shape[0] * self.S.shape[0]

    def kron_eigenvalues(self) -> np.ndarray:
        """Products of factor eigenvalues in flat parameter order."""
        return np.kron(self.eigA.eigenvalues, self.eigS.eigenvalues)

    def scaling(self) -> np.ndarray:
        """Diagonal of the block in the Kronecker eigenbasis."""
        return self.kron_eigenvalues() if self.corrected_diag is None else self.corrected_diag

    def basis(self) -> np.ndarray:
        return np.kron(self.eigA.eigenvectors, self.eigS.eigenvectors)

    def basis_order(self) -> np.ndarray:
        """Column order of :meth:`basis` by descending Kronecker eigenvalue, shared by K-FAC and EK-FAC."""
        return np.argsort(-self.kron_eigenvalues(), kind="stable")

    def materialize(self) -> np.ndarray:
        if self.corrected_diag is None:
            return kron(self.A, self.S)
        u = self.basis()
        m = (u * self.corrected_diag) @ u.T
        return 0.5 * (m + m.T)


@dataclass
class CurvatureLadder:
    layout: ParamLayout
    hessian: CurvatureMatrix | None
    ggn: CurvatureMatrix
    residual: CurvatureMatrix | None
    block_ggn: CurvatureMatrix
    kfac: list[KroneckerBlock]
    ekfac: list[KroneckerBlock]
    meta: dict = field(default_factory=dict)


def _check_dim(layout: ParamLayout, max_dim: int):
    if layout.dim > max_dim:
        raise CurvatureTooLarge(
            f"D={layout.dim} exceeds the dense cap {max_dim}; use block-only mode "
            "(K-FAC/EK-FAC and per-layer blocks) for a model this size"
        )


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def output_hessian(p: np.ndarray) -> np.ndarray:
    """``diag(p) - p p^T`` for a probability vector or a stack of them."""
    p = np.asarray(p, dtype=np.float64)
    return p[..., :, None] * np.eye(p.shape[-1]) - p[..., :, None] * p[..., None, :]


def output_hessian_factor(p: np.ndarray) -> np.ndarray:
    """``B = diag(sqrt p) - p sqrt(p)^T``, which satisfies ``B B^T = diag(p) - p p^T`` when sum(p) = 1."""
    p = np.asarray(p, dtype=np.float64)
    q = np.sqrt(p)
    return q[..., :, None] * np.eye(p.shape[-1]) - p[..., :, None] * q[..., None, :]


def assemble_hessian(model: MLP, theta, X, y, max_dim: int = MAX_DENSE_DIM) -> CurvatureMatrix:
    _check_dim(model.layout, max_dim)
    H = model.hvp(theta, X, y, np.eye(model.dim))
    return CurvatureMatrix("hessian", _sym(H), model.layout, len(y))


def assemble_residual(model: MLP, theta, X, y, max_dim: int = MAX_DENSE_DIM) -> CurvatureMatrix:
    _check_dim(model.layout, max_dim)
    R = model.residual_hvp(theta, X, y, np.eye(model.dim))
    return CurvatureMatrix("residual", _sym(R), model.layout, len(y))


def assemble_ggn(model: MLP, theta, X, y, max_dim: int = MAX_DENSE_DIM) -> CurvatureMatrix:
    """``G = mean_i J_i^T H_i J_i`` from explicit output Jacobians."""
    _check_dim(model.layout, max_dim)
    X = np.atleast_2d(X)
    n, D, C = X.shape[0], model.dim, model.cfg.classes
    G = np.zeros((D, D))
    chunk = max(1, _GGN_BUDGET // (C * D))
    for start in range(0, n, chunk):
        xb = X[start:start + chunk]
        J = model.output_jacobians(theta, xb)
        Hu = output_hessian(softmax(model.forward(theta, xb)))
        HJ = np.matmul(Hu, J)
        G += J.reshape(-1, D).T @ HJ.reshape(-1, D)
    return CurvatureMatrix("ggn", _sym(G / n), model.layout, n)


def block_mask(layout: ParamLayout) -> np.ndarray:
    mask = np.zeros((layout.dim, layout.dim), dtype=bool)
    for l in range(layout.n_layers):
        sl = layout.block(l)
        mask[sl, sl] = True
    return mask


def block_diagonal(g: CurvatureMatrix) -> CurvatureMatrix:
    out = np.zeros_like(g.matrix)
    for l in range(g.layout.n_layers):
        sl = g.layout.block(l)
        out[sl, sl] = g.matrix[sl, sl]
    return CurvatureMatrix("block_ggn", out, g.layout, g.sample_count)


def layer_blocks(m: CurvatureMatrix | np.ndarray, layout: ParamLayout) -> list[np.ndarray]:
    mat = m.matrix if isinstance(m, CurvatureMatrix) else m
    return [mat[layout.block(l), layout.block(l)] for l in range(layout.n_layers)]


def _pseudo_backprop(model: MLP, theta, X):
    """Layer inputs and pre-activation pseudo-gradients from the columns of B."""
    B = output_hessian_factor(softmax(model.forward(theta, X)))
    # Cotangent m of example i is column m of B_i.
    return model.backprop(theta, X, np.swapaxes(B, 1, 2))


def kfac_factors(model: MLP, theta, X, y=None) -> list[KroneckerBlock]:
    """Per-layer ``A = E[abar abar^T]`` and ``S = E[sum_m ds_m ds_m^T]`` with GGN pseudo-gradients."""
    X = np.atleast_2d(X)
    n = X.shape[0]
    abars, deltas = _pseudo_backprop(model, theta, X)
    blocks = []
    for l, (abar, delta) in enumerate(zip(abars, deltas)):
        A = _sym(abar.T @ abar / n)
        d2 = delta.reshape(-1, delta.shape[-1])
        S = _sym(d2.T @ d2 / n)
        blocks.append(KroneckerBlock(l, A, S, eig_sym(A), eig_sym(S)))
    return blocks


def ekfac_correct(blocks: list[KroneckerBlock], model: MLP, theta, X, y=None,
                  gradients: str = "ggn") -> list[KroneckerBlock]:
    """Refit the diagonal in each layer's Kronecker eigenbasis: ``s*_k = E[(U^T g)_k^2]``.

    ``gradients="ggn"`` uses the same pseudo-gradients as :func:`kfac_factors`
    (summed over the factor columns); ``"empirical"`` uses per-example loss
    gradients with the true labels instead.
    """
    X = np.atleast_2d(X)
    n = X.shape[0]
    if gradients == "ggn":
        abars, deltas = _pseudo_backprop(model, theta, X)
    elif gradients == "empirical":
        if y is None:
            raise ValueError("empirical EK-FAC gradients need labels")
        p = softmax(model.forward(theta, X))
        p[np.arange(n), np.atleast_1d(y)] -= 1.0
        abars, deltas = model.backprop(theta, X, p[:, None, :])
    else:
        raise ValueError(f"unknown gradient source {gradients!r}")
    out = []
    for blk, abar, delta in zip(blocks, abars, deltas):
        a_rot = abar @ blk.eigA.eigenvectors
        d_rot = np.sum((delta @ blk.eigS.eigenvectors) ** 2, axis=1)
        s_star = ((a_rot ** 2).T @ d_rot / n).ravel()
        out.append(KroneckerBlock(blk.layer, blk.A, blk.S, blk.eigA, blk.eigS, s_star))
    return out


def block_diag_from(blocks: list[np.ndarray], layout: ParamLayout) -> np.ndarray:
    out = np.zeros((layout.dim, layout.dim))
    for l, b in enumerate(blocks):
        sl = layout.block(l)
        out[sl, sl] = b
    return out


def materialize(kind: str, ladder: CurvatureLadder, max_dim: int = MAX_DENSE_DIM) -> np.ndarray:
    """Dense D x D view of one rung of the ladder."""
    _check_dim(ladder.layout, max_dim)
    if kind in ("hessian", "ggn", "block_ggn", "residual"):
        cm = getattr(ladder, kind)
        if cm is None:
            raise ValueError(f"{kind} was not assembled")
        return cm.matrix
    if kind in ("kfac", "ekfac"):
        blocks = getattr(ladder, kind)
        return block_diag_from([b.materialize() for b in blocks], ladder.layout)
    raise ValueError(f"unknown curvature kind {kind!r}")


def assemble_ladder(model: MLP, theta, X, y, max_dim: int = MAX_DENSE_DIM,
                    ekfac_gradients: str = "ggn", with_hessian: bool = True) -> CurvatureLadder:
    X = np.atleast_2d(X)
    y = np.atleast_1d(y)
    H = assemble_hessian(model, theta, X, y, max_dim) if with_hessian else None
    R = assemble_residual(model, theta, X, y, max_dim) if with_hessian else None
    G = assemble_ggn(model, theta, X, y, max_dim)
    kf = kfac_factors(model, theta, X, y)
    ek = ekfac_correct(kf, model, theta, X, y, gradients=ekfac_gradients)
    meta = {"reduction_order": REDUCTION_ORDER, "ekfac_gradients": ekfac_gradients, "samples": len(y)}
    return CurvatureLadder(model.layout, H, G, R, block_diagonal(G), kf, ek, meta)
