"""Where the approximation error comes from: residual size, cross-layer mass, spectral and basis fidelity."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .curvature import CurvatureLadder, KroneckerBlock, layer_blocks
from .linalg import basis_overlap, eig_sym, spectrum_overlap

TOP_FRACTION = 0.2
COLUMNS = (
    "setting", "epochs", "depth", "width", "seed",
    "r_rel", "rho_cross",
    "eval_overlap_kfac", "eval_overlap_ekfac",
    "basis_overlap_kfac", "basis_overlap_ekfac",
)


@dataclass
class DiagnosticsRow:
    setting: str
    epochs: int
    depth: int
    width: int
    seed: int
    r_rel: float
    rho_cross: float
    eval_overlap_kfac: float
    eval_overlap_ekfac: float
    basis_overlap_kfac: float
    basis_overlap_ekfac: float

    def as_dict(self) -> dict:
        return asdict(self)


def residual_ratio(H: np.ndarray, G: np.ndarray) -> float:
    nh = np.linalg.norm(H)
    if nh == 0.0:
        raise ValueError("Hessian has zero norm")
    return float(np.linalg.norm(H - G) / nh)


def cross_layer_ratio(G: np.ndarray, BG: np.ndarray) -> float:
    ng = np.linalg.norm(G)
    if ng == 0.0:
        raise ValueError("GGN has zero norm")
    return float(np.linalg.norm(G - BG) / ng)


def aggregate_blocks(values, dims) -> float:
    """Parameter-count weighted mean of per-block values."""
    values = np.asarray(values, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.float64)
    if values.shape != dims.shape:
        raise ValueError("one dimension per value required")
    total = dims.sum()
    if total <= 0:
        raise ValueError("block dimensions must sum to a positive number")
    return float(np.sum(dims / total * values))


def top_k(dim: int) -> int:
    return max(1, math.ceil(TOP_FRACTION * dim))


def spectral_diagnostics(blocks: list[np.ndarray], kfac: list[KroneckerBlock],
                         ekfac: list[KroneckerBlock]) -> dict:
    """Aggregated eigenvalue and eigenbasis overlap of K-FAC and EK-FAC against exact GGN blocks.

    Both factored methods use the Kronecker eigenbasis ordered by the K-FAC
    eigenvalues, so their basis overlaps agree exactly.
    """
    per = {k: [] for k in ("eval_kfac", "eval_ekfac", "basis_kfac", "basis_ekfac")}
    dims = []
    for G_l, kf, ek in zip(blocks, kfac, ekfac):
        ref = eig_sym(G_l)
        d = G_l.shape[0]
        k = top_k(d)
        dims.append(d)
        per["eval_kfac"].append(spectrum_overlap(kf.kron_eigenvalues(), ref.eigenvalues))
        per["eval_ekfac"].append(spectrum_overlap(ek.scaling(), ref.eigenvalues))
        for name, blk in (("basis_kfac", kf), ("basis_ekfac", ek)):
            u = blk.basis()[:, blk.basis_order()]
            per[name].append(basis_overlap(u, ref.eigenvectors, k))
    return {
        "eval_overlap_kfac": aggregate_blocks(per["eval_kfac"], dims),
        "eval_overlap_ekfac": aggregate_blocks(per["eval_ekfac"], dims),
        "basis_overlap_kfac": aggregate_blocks(per["basis_kfac"], dims),
        "basis_overlap_ekfac": aggregate_blocks(per["basis_ekfac"], dims),
        "per_layer": per,
    }


def diagnostics_row(ladder: CurvatureLadder, setting: str, epochs: int, depth: int, width: int,
                    seed: int) -> DiagnosticsRow:
    G = ladder.ggn.matrix
    spectral = spectral_diagnostics(layer_blocks(ladder.ggn, ladder.layout), ladder.kfac, ladder.ekfac)
    r_rel = residual_ratio(ladder.hessian.matrix, G) if ladder.hessian is not None else float("nan")
    return DiagnosticsRow(
        setting, epochs, depth, width, seed,
        r_rel=r_rel,
        rho_cross=cross_layer_ratio(G, ladder.block_ggn.matrix),
        eval_overlap_kfac=spectral["eval_overlap_kfac"],
        eval_overlap_ekfac=spectral["eval_overlap_ekfac"],
        basis_overlap_kfac=spectral["basis_overlap_kfac"],
        basis_overlap_ekfac=spectral["basis_overlap_ekfac"],
    )
