"""Leave-some-out ground truth, LDS with bootstrap intervals, approximation error and error shares."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import rankdata
from threadpoolctl import threadpool_limits

from .data import SubsetMask, sample_subsets
from .model import MLP, MlpConfig, TrainConfig, TrainingDiverged, train
from .seeding import derive_seed, rng

log = logging.getLogger(__name__)

PATH = ("hessian", "ggn", "block_ggn", "ekfac", "kfac")
STEP_LABELS = ("Hessian->GGN", "GGN->B-GGN", "B-GGN->EK-FAC", "EK-FAC->K-FAC")
MAX_DIVERGED_FRACTION = 0.05
PROBE_FULL_LIMIT = 2048
PROBE_SUBSAMPLE = 1024


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ElsoConfig:
    alpha: float = 0.5
    K: int = 100
    R: int = 50
    base_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0 or self.K < 1 or self.R < 1:
            raise ValueError(f"invalid ELSO config {self}")


@dataclass
class ElsoGroundTruth:
    masks: list[SubsetMask]
    seeds: np.ndarray          # (K, R)
    measurements: np.ndarray   # (K, R, Q); NaN where a retrain diverged
    baseline: np.ndarray       # (Q,)
    diverged: int = 0

    def mean_measurements(self) -> np.ndarray:
        """``(K, Q)`` seed-averaged measurements."""
        return np.nanmean(self.measurements, axis=1)

    def mask_matrix(self) -> np.ndarray:
        return np.stack([m.kept for m in self.masks]).astype(np.float64)


# -- rank statistics -----------------------------------------------------------


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("spearman needs two equal-length vectors of length >= 2")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    sx = np.sqrt(np.sum(rx * rx))
    sy = np.sqrt(np.sum(ry * ry))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero rank variance; Spearman correlation undefined")
    return float(np.clip(np.sum(rx * ry) / (sx * sy), -1.0, 1.0))


def _rowwise_spearman(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Spearman per row of two ``(Q, K)`` arrays; NaN where a row has no rank variance."""
    rx = rankdata(x, axis=1)
    ry = rankdata(y, axis=1)
    rx -= rx.mean(axis=1, keepdims=True)
    ry -= ry.mean(axis=1, keepdims=True)
    den = np.sqrt(np.sum(rx * rx, axis=1) * np.sum(ry * ry, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(den > 0, np.sum(rx * ry, axis=1) / np.where(den > 0, den, 1.0), np.nan)
    return np.clip(rho, -1.0, 1.0)


def bootstrap_ci(values, resamples: int = 1000, level: float = 0.95, seed: int = 0,
                 statistic=np.mean) -> tuple[float, float]:
    """Percentile bootstrap interval of ``statistic`` over resampled rows of ``values``.

    Resamples where ``statistic`` returns NaN are dropped.
    """
    values = np.asarray(values)
    n = values.shape[0]
    if n < 2:
        raise ValueError("bootstrap needs at least two values")
    idx = rng(seed, "bootstrap").integers(0, n, size=(resamples, n))
    stats = np.array([statistic(values[i]) for i in idx], dtype=np.float64)
    stats = stats[np.isfinite(stats)]
    if stats.size == 0:
        raise EvaluationError("every bootstrap resample produced an undefined statistic")
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return float(lo), float(hi)


# -- ground truth ----------------------------------------------------------------

_WORKER_DATA: dict = {}


def _init_worker(X, y, Xq, yq):
    _WORKER_DATA.update(X=X, y=y, Xq=Xq, yq=yq)


def _retrain_measure(task):
    """Train on the rows not removed and return the query losses (None if training diverged)."""
    mlp_cfg, train_cfg, removed = task
    X, y = _WORKER_DATA["X"], _WORKER_DATA["y"]
    keep = np.ones(X.shape[0], dtype=bool)
    keep[removed] = False
    with threadpool_limits(limits=1):
        try:
            theta = train(mlp_cfg, train_cfg, X[keep], y[keep])
        except TrainingDiverged as exc:
            log.warning("retrain diverged: %s", exc)
            return None
        losses = MLP(mlp_cfg).per_example_losses(theta, _WORKER_DATA["Xq"], _WORKER_DATA["yq"])
    return losses if np.all(np.isfinite(losses)) else None


def _run_tasks(tasks, data, jobs: int):
    if jobs <= 1:
        _init_worker(*data)
        try:
            return [_retrain_measure(t) for t in tasks]
        finally:
            _WORKER_DATA.clear()
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=data) as pool:
        return list(pool.map(_retrain_measure, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def elso_seeds(cfg: ElsoConfig) -> np.ndarray:
    """Seed r is shared by every subset, so subsets are compared under common random numbers."""
    row = [derive_seed(cfg.base_seed, "elso-seed", r) for r in range(cfg.R)]
    return np.tile(np.array(row, dtype=np.int64), (cfg.K, 1))


def build_ground_truth(cfg: ElsoConfig, X, y, Xq, yq, mlp_cfg: MlpConfig, train_cfg: TrainConfig,
                       jobs: int = 1, masks: list[SubsetMask] | None = None,
                       seeds: np.ndarray | None = None) -> ElsoGroundTruth:
    """Retrain from scratch on ``D \\ S_j`` under R seeds for every subset and record the query losses.

    ``train_cfg.seed`` is ignored; every run takes its seed from ``seeds``.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if masks is None:
        masks = sample_subsets(n, cfg.alpha, cfg.K, derive_seed(cfg.base_seed, "elso-subsets"))
    if seeds is None:
        seeds = elso_seeds(replace(cfg, K=len(masks)))
    seeds = np.asarray(seeds, dtype=np.int64)
    K, R = seeds.shape
    if K != len(masks):
        raise ValueError("seed rows must match the number of masks")
    q = np.atleast_2d(Xq).shape[0]
    data = (X, np.asarray(y), np.atleast_2d(np.asarray(Xq, dtype=np.float64)), np.atleast_1d(yq))
    empty = np.zeros(0, dtype=np.intp)

    tasks = [(mlp_cfg, replace(train_cfg, seed=int(seeds[j, r])), masks[j].indices)
             for j in range(K) for r in range(R)]
    base_tasks = [(mlp_cfg, replace(train_cfg, seed=int(seeds[0, r])), empty) for r in range(R)]
    results = _run_tasks(tasks + base_tasks, data, jobs)

    measurements = np.full((K, R, q), np.nan)
    diverged = 0
    for t, res in enumerate(results[:K * R]):
        if res is None:
            diverged += 1
        else:
            measurements[t // R, t % R] = res
    base = [r for r in results[K * R:] if r is not None]
    if diverged:
        log.warning("%d of %d retrains diverged and were excluded", diverged, K * R)
    if diverged > MAX_DIVERGED_FRACTION * K * R:
        raise EvaluationError(f"{diverged} of {K * R} retrains diverged (limit 5%)")
    if not base:
        raise EvaluationError("every full-data baseline run diverged")
    baseline = np.mean(np.stack(base), axis=0)
    return ElsoGroundTruth(list(masks), seeds, measurements, baseline, diverged)


# -- LDS -------------------------------------------------------------------------


def group_attributions(gt: ElsoGroundTruth, scores: np.ndarray) -> np.ndarray:
    """``(Q, K)`` sums of each query's scores over each removed subset."""
    return np.atleast_2d(scores) @ gt.mask_matrix().T


def lds(gt: ElsoGroundTruth, scores: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-query LDS (NaN where skipped) and their mean.

    ``scores`` is ``(Q, n_train)``; row q holds the influence of every
    training point on query q.
    """
    measured = gt.mean_measurements().T
    predicted = group_attributions(gt, scores)
    if predicted.shape != measured.shape:
        raise ValueError(f"scores give {predicted.shape}, ground truth has {measured.shape}")
    per_query = _rowwise_spearman(measured, predicted)
    skipped = int(np.sum(np.isnan(per_query)))
    if skipped:
        log.warning("LDS undefined for %d of %d queries; skipped", skipped, per_query.size)
    if skipped == per_query.size:
        raise EvaluationError("LDS undefined for every query")
    return per_query, float(np.nanmean(per_query))


def lds_bootstrap(gt: ElsoGroundTruth, scores: np.ndarray, resamples: int = 1000,
                  level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """Mean LDS and a percentile interval from resampling the K subsets."""
    measured = gt.mean_measurements().T
    predicted = group_attributions(gt, scores)
    _, mean = lds(gt, scores)

    def stat(idx):
        rho = _rowwise_spearman(measured[:, idx], predicted[:, idx])
        return np.nan if np.all(np.isnan(rho)) else np.nanmean(rho)

    lo, hi = bootstrap_ci(np.arange(measured.shape[1]), resamples, level, seed, statistic=stat)
    return mean, min(lo, mean), max(hi, mean)


# -- approximation error -----------------------------------------------------------


def probe_indices(n: int, seed: int = 0) -> np.ndarray:
    if n <= PROBE_FULL_LIMIT:
        return np.arange(n)
    return np.sort(rng(seed, "probes").choice(n, size=PROBE_SUBSAMPLE, replace=False))


def approx_error(H: np.ndarray, inverse, probes: np.ndarray) -> float:
    """``mean_i ||H M^+ v_i - v_i||^2 / ||v_i||^2`` over probe rows ``v_i``."""
    probes = np.atleast_2d(probes)
    norms = np.sum(probes * probes, axis=1)
    ok = norms > 0
    if not np.all(ok):
        log.warning("skipping %d zero probes", int(np.sum(~ok)))
    if not np.any(ok):
        raise EvaluationError("no non-zero probes")
    V = probes[ok].T
    resid = H @ inverse.solve(V) - V
    return float(np.mean(np.sum(resid * resid, axis=0) / norms[ok]))


# -- error decomposition -------------------------------------------------------------


def _path_values(values) -> np.ndarray:
    if isinstance(values, dict):
        values = [values[m] for m in PATH]
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(PATH),):
        raise ValueError(f"need one value per method along {PATH}")
    return values


def error_shares(errors) -> np.ndarray:
    """Percentage of the Hessian -> K-FAC error gap taken by each step along the path."""
    e = _path_values(errors)
    gap = e[-1] - e[0]
    if gap == 0.0:
        raise EvaluationError("zero Hessian -> K-FAC error gap; shares undefined")
    return np.diff(e) / gap * 100.0


LDS_DELTA_CONVENTION = "dLDS_pct = 100*(LDS_next - LDS_prev)/|LDS_kfac - LDS_hessian|"


def lds_deltas(lds_values) -> np.ndarray:
    """Each step's LDS change as a percentage of the magnitude of the total Hessian -> K-FAC change."""
    v = _path_values(lds_values)
    gap = abs(v[-1] - v[0])
    if gap == 0.0:
        raise EvaluationError("zero Hessian -> K-FAC LDS change; deltas undefined")
    return np.diff(v) / gap * 100.0
