"""Influence scores through pseudo-inverse curvature for each rung of the ladder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curvature import CurvatureLadder, KroneckerBlock, layer_blocks
from .data import SubsetMask
from .linalg import eig_sym, pinv_from_eig
from .model import ParamLayout


@dataclass(frozen=True)
class InverseConfig:
    threshold: float = 1e-4
    damping: float = 0.0

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        if self.damping != 0.0:
            raise ValueError("damping is reserved; only the undamped pseudo-inverse is implemented")


@dataclass
class InfluenceScores:
    method: str
    query: int
    scores: np.ndarray


class DenseInverse:
    """``M^+ V`` through an eigendecomposition pseudo-inverse of the full matrix."""

    def __init__(self, matrix: np.ndarray, threshold: float):
        self.pinv = pinv_from_eig(eig_sym(matrix), threshold)

    def solve(self, v: np.ndarray) -> np.ndarray:
        return self.pinv @ v


class BlockInverse:
    """Pseudo-inverse applied block by block; equal to the dense pseudo-inverse of a block-diagonal matrix."""

    def __init__(self, blocks: list[np.ndarray], layout: ParamLayout, threshold: float):
        self.layout = layout
        self.pinvs = [pinv_from_eig(eig_sym(b), threshold) for b in blocks]

    def solve(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros_like(v, dtype=np.float64)
        for l, p in enumerate(self.pinvs):
            sl = self.layout.block(l)
            out[sl] = p @ v[sl]
        return out


class KroneckerInverse:
    """Per-layer rotation into ``U_A (x) U_S``, division by the (thresholded) scaling, rotation back."""

    def __init__(self, blocks: list[KroneckerBlock], layout: ParamLayout, threshold: float):
        self.layout = layout
        self.blocks = blocks
        self.inv_scales = []
        for b in blocks:
            s = b.scaling()
            keep = np.abs(s) > threshold
            inv = np.zeros_like(s)
            inv[keep] = 1.0 / s[keep]
            self.inv_scales.append(inv.reshape(b.A.shape[0], b.S.shape[0]))

    def solve(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        vec = v.ndim == 1
        V = v[:, None] if vec else v
        out = np.empty_like(V)
        m = V.shape[1]
        for l, (b, inv) in enumerate(zip(self.blocks, self.inv_scales)):
            sl = self.layout.block(l)
            UA = b.eigA.eigenvectors
            US = b.eigS.eigenvectors
            # flat index i * fan_out + k -> [i, k]
            mats = V[sl].T.reshape(m, UA.shape[0], US.shape[0])
            rot = UA.T @ mats @ US
            back = UA @ (rot * inv) @ US.T
            out[sl] = back.reshape(m, -1).T
        return out[:, 0] if vec else out


def make_inverse(method: str, ladder: CurvatureLadder, cfg: InverseConfig = InverseConfig()):
    if method in ("hessian", "ggn"):
        cm = getattr(ladder, method)
        if cm is None:
            raise ValueError(f"{method} was not assembled")
        return DenseInverse(cm.matrix, cfg.threshold)
    if method == "block_ggn":
        return BlockInverse(layer_blocks(ladder.ggn, ladder.layout), ladder.layout, cfg.threshold)
    if method in ("kfac", "ekfac"):
        return KroneckerInverse(getattr(ladder, method), ladder.layout, cfg.threshold)
    raise ValueError(f"unknown method {method!r}")


def ihvp(inverse, v: np.ndarray) -> np.ndarray:
    return inverse.solve(v)


def influence_matrix(inverse, query_grads: np.ndarray, train_grads: np.ndarray) -> np.ndarray:
    """``tau[q, m] = grad m(z_q)^T M^+ grad L(z_m)`` as a ``(Q, N)`` array."""
    w = inverse.solve(np.atleast_2d(query_grads).T)
    return (train_grads @ w).T


def influence_scores(method: str, inverse, query_index: int, query_grad: np.ndarray,
                     train_grads: np.ndarray) -> InfluenceScores:
    w = inverse.solve(query_grad)
    return InfluenceScores(method, query_index, train_grads @ w)


def group_attribution(scores: InfluenceScores | np.ndarray, mask: SubsetMask | np.ndarray) -> float:
    values = scores.scores if isinstance(scores, InfluenceScores) else np.asarray(scores)
    kept = mask.kept if isinstance(mask, SubsetMask) else np.asarray(mask, dtype=bool)
    if kept.shape != values.shape:
        raise ValueError(f"mask length {kept.shape} does not match scores {values.shape}")
    return float(values[kept].sum())
