"""Dense symmetric linear algebra.

Everything here works on plain ``float64`` numpy arrays. Symmetric matrices
are not wrapped in a class; :func:`check_symmetric` validates them at the
boundaries where it matters.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
# Above this size the round-robin Jacobi solver is too slow in numpy and the
# LAPACK divide-and-conquer routine takes over.
JACOBI_MAX_DIM = 160
KRON_MAX_DIM = 20_000


class EigenDecompositionError(RuntimeError):
    pass


class EigenDecomp(NamedTuple):
    """Eigenvalues sorted descending and matching orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def check_symmetric(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    gap = np.abs(m - m.T)
    if np.any(gap > 1e-10 * np.maximum(1.0, np.abs(m))):
        raise ValueError(f"{name} is not symmetric (max asymmetry {gap.max():.3e})")
    return m


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint (p, q) pairings covering every index pair once per sweep.

    Circle method; an odd ``n`` gets a dummy index that is dropped.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.linalg.norm(off))


def jacobi_eigh(m: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi diagonalisation with round-robin ordering.

    Each round applies n/2 disjoint rotations at once, so a sweep is n-1
    vectorised steps. Returns unsorted ``(eigenvalues, eigenvectors)``.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n < 2 or scale == 0.0:
        return np.diag(a).copy(), v
    target = tol * scale
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        if _off_norm(a) <= target:
            return np.diag(a).copy(), v
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            nz = apq != 0.0
            theta = np.where(nz, (aqq - app) / np.where(nz, 2.0 * apq, 1.0), 0.0)
            sign = np.where(theta >= 0.0, 1.0, -1.0)
            t = np.where(nz, sign / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rp = a[p, :].copy()
            rq = a[q, :]
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp = a[:, p].copy()
            cq = a[:, q]
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp = v[:, p].copy()
            vq = v[:, q]
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
    residual = _off_norm(a)
    if residual <= target:
        return np.diag(a).copy(), v
    raise EigenDecompositionError(
        f"Jacobi did not converge for dim={n} after {max_sweeps} sweeps "
        f"(off-diagonal residual {residual:.3e}, target {target:.3e})"
    )


def _canonicalise(w: np.ndarray, q: np.ndarray) -> EigenDecomp:
    order = np.argsort(-w, kind="stable")
    w = w[order]
    q = q[:, order]
    pivot = np.argmax(np.abs(q), axis=0)
    signs = np.where(q[pivot, np.arange(q.shape[1])] < 0.0, -1.0, 1.0)
    return EigenDecomp(w, q * signs)


def eig_sym(m: np.ndarray, method: str = "auto") -> EigenDecomp:
    """Eigendecomposition of a symmetric matrix.

    Eigenvalues come back sorted non-increasing (ties keep their original
    index order) and every eigenvector has its largest-magnitude entry
    positive, so the output is reproducible bit for bit.

    ``method`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi up to
    ``JACOBI_MAX_DIM``).
    """
    m = check_symmetric(m)
    if method == "auto":
        method = "jacobi" if m.shape[0] <= JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        w, q = jacobi_eigh(m)
    elif method == "lapack":
        w, q = np.linalg.eigh(m)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    return _canonicalise(w, q)


def pinv_from_eig(eig: EigenDecomp, threshold: float) -> np.ndarray:
    w = eig.eigenvalues
    keep = np.abs(w) > threshold
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    q = eig.eigenvectors
    out = (q * inv) @ q.T
    return 0.5 * (out + out.T)


def pinv_sym(m: np.ndarray, threshold: float = 1e-4, method: str = "auto") -> np.ndarray:
    """Pseudo-inverse that inverts eigenvalues with ``|lambda| > threshold`` and drops the rest."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return pinv_from_eig(eig_sym(m, method=method), threshold)


def kron(a: np.ndarray, b: np.ndarray, max_dim: int = KRON_MAX_DIM) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dim = a.shape[0] * b.shape[0]
    if dim > max_dim:
        raise ValueError(f"Kronecker product dim {dim} exceeds max_dim={max_dim}")
    return np.kron(a, b)


def eval_overlap(approx: np.ndarray, reference: np.ndarray) -> float:
    """1 - ||sorted spectrum difference|| / ||sorted reference spectrum||."""
    if approx.shape != reference.shape:
        raise ValueError(f"shape mismatch {approx.shape} vs {reference.shape}")
    la = eig_sym(approx).eigenvalues
    lr = eig_sym(reference).eigenvalues
    return spectrum_overlap(la, lr)


def spectrum_overlap(approx_eigs: np.ndarray, ref_eigs: np.ndarray) -> float:
    la = np.sort(np.asarray(approx_eigs, dtype=np.float64))[::-1]
    lr = np.sort(np.asarray(ref_eigs, dtype=np.float64))[::-1]
    denom = np.linalg.norm(lr)
    if denom == 0.0:
        raise ValueError("reference spectrum is identically zero; eigenvalue overlap undefined")
    return float(1.0 - np.linalg.norm(la - lr) / denom)


def basis_overlap(approx_vecs: np.ndarray, ref_vecs: np.ndarray, k: int) -> float:
    """Mean squared cosine of the principal angles between the leading k columns."""
    if k < 1:
        raise ValueError("k must be positive")
    if k > approx_vecs.shape[1] or k > ref_vecs.shape[1]:
        raise ValueError(
            f"k={k} exceeds column count ({approx_vecs.shape[1]}, {ref_vecs.shape[1]})"
        )
    if approx_vecs.shape[0] != ref_vecs.shape[0]:
        raise ValueError("ambient dimensions differ")
    cross = ref_vecs[:, :k].T @ approx_vecs[:, :k]
    return float(np.sum(cross * cross) / k)
