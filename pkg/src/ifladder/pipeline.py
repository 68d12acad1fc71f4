"""Staged, cached experiment pipeline.

Layout of an output directory::

    OUT/manifest.json, OUT/config.yaml
    OUT/<setting>/<stage>/manifest.json + stage outputs
    OUT/report/{scatter.csv, steps.csv, diagnostics.csv}

Each stage's cache key hashes its own config sections, the software version
and the keys of the stages it reads, so keys follow from the config alone.
A stage whose manifest carries the expected key and whose outputs still
hash to the recorded values is skipped.
"""

from __future__ import annotations

import logging
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_info

from . import __version__
from . import io
from .config import ConfigError, RunConfig, Setting, dumps
from .curvature import (REDUCTION_ORDER, CurvatureLadder, CurvatureMatrix, KroneckerBlock,
                        assemble_ladder, block_diagonal)
from .data import Dataset, SubsetMask, load_digits, stratified_split, synth_blobs
from .diagnostics import COLUMNS as DIAG_COLUMNS
from .diagnostics import diagnostics_row
from .evaluation import (LDS_DELTA_CONVENTION, PATH, STEP_LABELS, ElsoConfig, ElsoGroundTruth, EvaluationError,
                         approx_error, build_ground_truth, error_shares, lds_bootstrap, lds_deltas,
                         probe_indices)
from .influence import InverseConfig, influence_matrix, make_inverse
from .linalg import eig_sym
from .model import MLP, ParamLayout, TrainConfig, train
from .seeding import derive_seed, rng

log = logging.getLogger(__name__)

STAGES = ("train", "curvature", "influence", "elso", "evaluate", "diagnostics")
UPSTREAM = {
    "train": (),
    "curvature": ("train",),
    "influence": ("train", "curvature"),
    "elso": ("train",),
    "evaluate": ("influence", "elso"),
    "diagnostics": ("curvature",),
}
SECTIONS = {
    "train": ("seed", "dataset", "model", "train", "elso.queries"),
    "curvature": ("curvature",),
    "influence": ("inverse", "methods"),
    "elso": ("elso",),
    "evaluate": ("evaluation",),
    "diagnostics": (),
}
# Config fields allowed to differ between runs combined in one report.
SWEEP_FIELDS = ("seed", "model.depth", "model.width", "train.epochs", "sweep")


class UpstreamMissing(RuntimeError):
    pass


# -- keys and manifests ------------------------------------------------------------


def _lookup(d: dict, dotted: str):
    for part in dotted.split("."):
        d = d[part]
    return d


def stage_key(cfg: RunConfig, stage: str) -> str:
    d = cfg.to_dict()
    payload = {
        "stage": stage,
        "version": __version__,
        "config": {s: _lookup(d, s) for s in SECTIONS[stage]},
        "upstream": {u: stage_key(cfg, u) for u in UPSTREAM[stage]},
    }
    return io.sha256_bytes(io.canonical_json(payload).encode())


def environment() -> dict:
    return {
        "software_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "blas": [{k: i.get(k) for k in ("internal_api", "version", "num_threads")} for i in threadpool_info()],
    }


@dataclass
class Run:
    """One sweep point of a run directory."""
    cfg: RunConfig
    setting: Setting
    root: Path
    jobs: int = 1

    @property
    def dir(self) -> Path:
        return self.root / self.setting.name

    def stage_dir(self, stage: str) -> Path:
        return self.dir / stage

    def manifest_path(self, stage: str) -> Path:
        return self.stage_dir(stage) / "manifest.json"

    def is_current(self, stage: str) -> bool:
        path = self.manifest_path(stage)
        if not path.exists():
            return False
        man = io.read_json(path)
        if man.get("key") != stage_key(self.cfg, stage):
            return False
        for name, digest in man.get("outputs", {}).items():
            f = self.stage_dir(stage) / name
            if not f.exists() or io.sha256_file(f) != digest:
                return False
        return True

    def require(self, stage: str) -> dict:
        for up in UPSTREAM[stage]:
            if not self.is_current(up):
                raise UpstreamMissing(
                    f"{self.setting.name}: stage '{stage}' needs current output of stage '{up}'; "
                    f"run --stage {up} first"
                )
        return {u: io.read_json(self.manifest_path(u)) for u in UPSTREAM[stage]}

    def write_manifest(self, stage: str, outputs: dict, extra: dict | None = None) -> dict:
        data = prepare_data(self.cfg)
        man = {
            "stage": stage,
            "key": stage_key(self.cfg, stage),
            "setting": self.setting.name,
            "config": self.cfg.to_dict(),
            "seeds": seed_table(self.cfg),
            "dataset": data.meta,
            "reduction_order": REDUCTION_ORDER,
            "environment": environment(),
            "upstream": {u: stage_key(self.cfg, u) for u in UPSTREAM[stage]},
            "outputs": outputs,
        }
        man.update(extra or {})
        io.write_json(self.manifest_path(stage), man)
        return man


def seed_table(cfg: RunConfig) -> dict:
    """Every seed a stage draws, keyed by purpose."""
    return {
        "base": cfg.seed,
        "split": cfg.seed,
        "subsample": cfg.seed,
        "queries": cfg.seed,
        "init_and_shuffle": cfg.seed,
        "elso_base": cfg.seed,
        "elso_subsets": derive_seed(cfg.seed, "elso-subsets"),
        "bootstrap": derive_seed(cfg.seed, "bootstrap"),
        "probes": derive_seed(cfg.seed, "probes"),
    }


# -- data -------------------------------------------------------------------------


@dataclass
class PreparedData:
    train: Dataset
    train_index: np.ndarray    # rows of the source dataset
    query_X: np.ndarray
    query_y: np.ndarray
    query_index: np.ndarray    # rows of the source dataset
    meta: dict


def prepare_data(cfg: RunConfig) -> PreparedData:
    ds = cfg.dataset
    if ds.source == "digits":
        full = load_digits(ds.path)
    else:
        full = synth_blobs(ds.blobs_n, ds.blobs_classes, ds.blobs_dim, cfg.seed)
    split = stratified_split(full, ds.test_fraction, cfg.seed)
    train_idx = split.train
    if ds.n_train is not None and ds.n_train < train_idx.size:
        train_idx = np.sort(rng(cfg.seed, "subsample").choice(train_idx, ds.n_train, replace=False))
    q = min(cfg.elso.queries, split.test.size)
    query_idx = np.sort(rng(cfg.seed, "queries").choice(split.test, q, replace=False))
    meta = {
        "name": full.name,
        "sha256": full.source_hash,
        "n_total": len(full),
        "n_train": int(train_idx.size),
        "n_query": int(query_idx.size),
        "train_index_sha256": io.array_hash(train_idx.astype(np.int64)),
        "query_index": query_idx.tolist(),
    }
    return PreparedData(full.subset(train_idx), train_idx, full.features[query_idx],
                        full.labels[query_idx], query_idx, meta)


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(lr0=t.lr0, batch=t.batch, epochs=t.epochs, weight_decay=t.weight_decay,
                       seed=cfg.seed)


# -- ladder persistence ---------------------------------------------------------------


def save_ladder(d: Path, ladder: CurvatureLadder) -> dict:
    out = {}
    for kind in ("hessian", "residual", "ggn"):
        cm = getattr(ladder, kind)
        out[f"{kind}.bin"] = io.write_array(d / f"{kind}.bin", cm.matrix,
                                            {"kind": kind, "samples": cm.sample_count})
    for b, e in zip(ladder.kfac, ladder.ekfac):
        out[f"A_{b.layer}.bin"] = io.write_array(d / f"A_{b.layer}.bin", b.A, {"layer": b.layer})
        out[f"S_{b.layer}.bin"] = io.write_array(d / f"S_{b.layer}.bin", b.S, {"layer": b.layer})
        out[f"ekfac_{b.layer}.bin"] = io.write_array(d / f"ekfac_{b.layer}.bin", e.corrected_diag,
                                                     {"layer": b.layer})
    return out


def load_ladder(d: Path, layout: ParamLayout) -> CurvatureLadder:
    mats = {}
    for kind in ("hessian", "residual", "ggn"):
        m, h = io.read_array(d / f"{kind}.bin")
        mats[kind] = CurvatureMatrix(kind, m, layout, h["samples"])
    kfac, ekfac = [], []
    for l in range(layout.n_layers):
        A, _ = io.read_array(d / f"A_{l}.bin")
        S, _ = io.read_array(d / f"S_{l}.bin")
        diag, _ = io.read_array(d / f"ekfac_{l}.bin")
        eA, eS = eig_sym(A), eig_sym(S)
        kfac.append(KroneckerBlock(l, A, S, eA, eS))
        ekfac.append(KroneckerBlock(l, A, S, eA, eS, diag))
    return CurvatureLadder(layout, mats["hessian"], mats["ggn"], mats["residual"],
                           block_diagonal(mats["ggn"]), kfac, ekfac, {"reduction_order": REDUCTION_ORDER})


def load_checkpoint(run: Run) -> np.ndarray:
    theta, _ = io.read_array(run.stage_dir("train") / "checkpoint.bin")
    return theta


# -- stages -----------------------------------------------------------------------


def stage_train(run: Run) -> dict:
    cfg = run.cfg
    data = prepare_data(cfg)
    mlp_cfg = cfg.mlp_config()
    theta = train(mlp_cfg, train_config(cfg), data.train.features, data.train.labels)
    model = MLP(mlp_cfg)
    d = run.stage_dir("train")
    header = {"layout": model.layout.to_dict(), "seed": cfg.seed, "epochs": cfg.train.epochs}
    outputs = {"checkpoint.bin": io.write_array(d / "checkpoint.bin", theta, header)}
    return run.write_manifest("train", outputs, {
        "train_loss": model.loss(theta, data.train.features, data.train.labels),
        "train_accuracy": model.accuracy(theta, data.train.features, data.train.labels),
        "query_accuracy": model.accuracy(theta, data.query_X, data.query_y),
    })


def stage_curvature(run: Run) -> dict:
    cfg = run.cfg
    data = prepare_data(cfg)
    model = MLP(cfg.mlp_config())
    theta = load_checkpoint(run)
    ladder = assemble_ladder(model, theta, data.train.features, data.train.labels,
                             max_dim=cfg.curvature.max_dim,
                             ekfac_gradients=cfg.curvature.ekfac_gradients)
    outputs = save_ladder(run.stage_dir("curvature"), ladder)
    return run.write_manifest("curvature", outputs, {"dim": model.dim})


def stage_influence(run: Run) -> dict:
    cfg = run.cfg
    data = prepare_data(cfg)
    model = MLP(cfg.mlp_config())
    theta = load_checkpoint(run)
    ladder = load_ladder(run.stage_dir("curvature"), model.layout)
    X, y = data.train.features, data.train.labels
    train_grads = model.per_example_grads(theta, X, y)
    query_grads = model.per_example_grads(theta, data.query_X, data.query_y)
    probes = train_grads[probe_indices(len(y), derive_seed(cfg.seed, "probes"))]
    inv_cfg = InverseConfig(cfg.inverse.threshold, cfg.inverse.damping)
    score_rows, err_rows = [], []
    for method in cfg.methods:
        inverse = make_inverse(method, ladder, inv_cfg)
        tau = influence_matrix(inverse, query_grads, train_grads)
        for qi in range(tau.shape[0]):
            for m in range(tau.shape[1]):
                score_rows.append((method, qi, m, tau[qi, m]))
        err_rows.append((method, approx_error(ladder.hessian.matrix, inverse, probes), probes.shape[0]))
    d = run.stage_dir("influence")
    outputs = {
        "scores.csv": io.write_csv(d / "scores.csv", ("method", "query_idx", "train_idx", "tau"), score_rows),
        "approx_error.csv": io.write_csv(d / "approx_error.csv", ("method", "approx_error", "probes"), err_rows),
    }
    return run.write_manifest("influence", outputs)


def stage_elso(run: Run) -> dict:
    cfg = run.cfg
    data = prepare_data(cfg)
    e = cfg.elso
    gt = build_ground_truth(ElsoConfig(e.alpha, e.K, e.R, cfg.seed), data.train.features, data.train.labels,
                            data.query_X, data.query_y, cfg.mlp_config(), train_config(cfg), jobs=run.jobs)
    K, R, Q = gt.measurements.shape
    d = run.stage_dir("elso")
    meas = ((j, r, q, gt.measurements[j, r, q]) for j in range(K) for r in range(R) for q in range(Q))
    subsets = ((m.subset_id, int(i)) for m in gt.masks for i in m.indices)
    seeds = ((j, r, int(gt.seeds[j, r])) for j in range(K) for r in range(R))
    outputs = {
        "measurements.csv": io.write_csv(d / "measurements.csv", ("subset_id", "seed_idx", "query_idx", "metric"), meas),
        "subsets.csv": io.write_csv(d / "subsets.csv", ("subset_id", "train_idx"), subsets),
        "seeds.csv": io.write_csv(d / "seeds.csv", ("subset_id", "seed_idx", "seed"), seeds),
        "baseline.csv": io.write_csv(d / "baseline.csv", ("query_idx", "metric"), enumerate(gt.baseline)),
    }
    return run.write_manifest("elso", outputs, {"diverged": gt.diverged, "shape": [K, R, Q]})


def load_ground_truth(run: Run) -> ElsoGroundTruth:
    d = run.stage_dir("elso")
    man = io.read_json(d / "manifest.json")
    K, R, Q = man["shape"]
    n = man["dataset"]["n_train"]
    meas = np.full((K, R, Q), np.nan)
    for row in io.read_csv(d / "measurements.csv"):
        meas[int(row["subset_id"]), int(row["seed_idx"]), int(row["query_idx"])] = float(row["metric"])
    kept = np.zeros((K, n), dtype=bool)
    for row in io.read_csv(d / "subsets.csv"):
        kept[int(row["subset_id"]), int(row["train_idx"])] = True
    seeds = np.zeros((K, R), dtype=np.int64)
    for row in io.read_csv(d / "seeds.csv"):
        seeds[int(row["subset_id"]), int(row["seed_idx"])] = int(row["seed"])
    baseline = np.array([float(r["metric"]) for r in io.read_csv(d / "baseline.csv")])
    masks = [SubsetMask(kept[j], j, run.cfg.elso.alpha) for j in range(K)]
    return ElsoGroundTruth(masks, seeds, meas, baseline, man["diverged"])


def load_scores(run: Run) -> dict[str, np.ndarray]:
    data_meta = io.read_json(run.manifest_path("train"))["dataset"]
    Q, N = data_meta["n_query"], data_meta["n_train"]
    out = {}
    for row in io.read_csv(run.stage_dir("influence") / "scores.csv"):
        m = row["method"]
        if m not in out:
            out[m] = np.full((Q, N), np.nan)
        out[m][int(row["query_idx"]), int(row["train_idx"])] = float(row["tau"])
    return out


def load_errors(run: Run) -> dict[str, float]:
    return {r["method"]: float(r["approx_error"])
            for r in io.read_csv(run.stage_dir("influence") / "approx_error.csv")}


def _or_nan(fn, values, name: str) -> np.ndarray:
    """A zero Hessian -> K-FAC gap leaves the step percentages undefined; record NaN, keep the setting."""
    try:
        return fn(values)
    except EvaluationError as exc:
        log.warning("%s: %s", name, exc)
        return np.full(len(STEP_LABELS), np.nan)


def stage_evaluate(run: Run) -> dict:
    cfg = run.cfg
    gt = load_ground_truth(run)
    scores = load_scores(run)
    errors = load_errors(run)
    ev = cfg.evaluation
    boot_seed = derive_seed(cfg.seed, "bootstrap")
    rows, lds_means = [], {}
    for method in cfg.methods:
        mean, lo, hi = lds_bootstrap(gt, scores[method], ev.resamples, ev.level, boot_seed)
        lds_means[method] = mean
        rows.append((method, errors[method], mean, lo, hi))
    d = run.stage_dir("evaluate")
    outputs = {"lds.csv": io.write_csv(d / "lds.csv", ("method", "approx_error", "lds_mean", "lds_lo", "lds_hi"), rows)}
    extra = {"lds_delta_convention": LDS_DELTA_CONVENTION}
    if all(m in errors for m in PATH):
        shares = _or_nan(error_shares, errors, run.setting.name)
        deltas = _or_nan(lds_deltas, lds_means, run.setting.name)
        step_rows = list(zip(STEP_LABELS, shares, deltas))
        outputs["error_shares.csv"] = io.write_csv(d / "error_shares.csv", ("step", "dES_pct", "dLDS_pct"), step_rows)
    else:
        log.warning("%s: error shares need all of %s; skipped", run.setting.name, list(PATH))
    return run.write_manifest("evaluate", outputs, extra)


def stage_diagnostics(run: Run) -> dict:
    cfg = run.cfg
    ladder = load_ladder(run.stage_dir("curvature"), ParamLayout.for_config(cfg.mlp_config()))
    st = run.setting
    row = diagnostics_row(ladder, st.name, st.epochs, st.depth, st.width, st.seed).as_dict()
    d = run.stage_dir("diagnostics")
    outputs = {"diagnostics.csv": io.write_csv(d / "diagnostics.csv", DIAG_COLUMNS, [[row[c] for c in DIAG_COLUMNS]])}
    return run.write_manifest("diagnostics", outputs)


STAGE_FUNCS = {
    "train": stage_train,
    "curvature": stage_curvature,
    "influence": stage_influence,
    "elso": stage_elso,
    "evaluate": stage_evaluate,
    "diagnostics": stage_diagnostics,
}


def run_stage(run: Run, stage: str, force: bool = False) -> tuple[bool, dict]:
    """Run one stage for one setting. Returns ``(cache_hit, manifest)``."""
    if not force and run.is_current(stage):
        return True, io.read_json(run.manifest_path(stage))
    run.require(stage)
    run.stage_dir(stage).mkdir(parents=True, exist_ok=True)
    return False, STAGE_FUNCS[stage](run)


def setting_runs(cfg: RunConfig, out: Path, jobs: int = 1) -> list[Run]:
    return [Run(cfg.for_setting(st), st, Path(out), jobs) for st in cfg.settings()]


def write_root_manifest(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dumps(cfg))
    io.write_json(out / "manifest.json", {
        "config": cfg.to_dict(),
        "settings": [st.name for st in cfg.settings()],
        "seeds": {st.name: seed_table(cfg.for_setting(st)) for st in cfg.settings()},
        "reduction_order": REDUCTION_ORDER,
        "environment": environment(),
    })


# -- report -----------------------------------------------------------------------


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _comparable(config: dict) -> dict:
    flat = _flatten(config)
    return {k: v for k, v in flat.items() if not any(k == f or k.startswith(f + ".") for f in SWEEP_FIELDS)}


def check_homogeneous(manifests: list[dict]) -> None:
    base = _comparable(manifests[0]["config"])
    bad = set()
    for man in manifests[1:]:
        other = _comparable(man["config"])
        bad |= {k for k in base.keys() | other.keys() if base.get(k) != other.get(k)}
    if bad:
        raise ConfigError(f"runs have heterogeneous configs; mismatched fields: {sorted(bad)}")


def report(setting_dirs: list[Path], out: Path) -> dict:
    """Combine evaluated settings into figure-data CSVs."""
    if not setting_dirs:
        raise UpstreamMissing("report needs at least one evaluated setting; run --stage evaluate first")
    mans = []
    for d in setting_dirs:
        path = Path(d) / "evaluate" / "manifest.json"
        if not path.exists():
            raise UpstreamMissing(f"{d}: no evaluate output; run --stage evaluate first")
        mans.append(io.read_json(path))
    check_homogeneous(mans)
    scatter, steps, diag = [], [], []
    for d, man in zip(setting_dirs, mans):
        d = Path(d)
        name = man["setting"]
        for r in io.read_csv(d / "evaluate" / "lds.csv"):
            scatter.append((r["method"], name, r["approx_error"], r["lds_mean"], r["lds_lo"], r["lds_hi"]))
        shares = d / "evaluate" / "error_shares.csv"
        if shares.exists():
            steps.extend((name, r["step"], r["dES_pct"], r["dLDS_pct"]) for r in io.read_csv(shares))
        dg = d / "diagnostics" / "diagnostics.csv"
        if dg.exists():
            diag.extend([r[c] for c in DIAG_COLUMNS] for r in io.read_csv(dg))
    out.mkdir(parents=True, exist_ok=True)
    outputs = {
        "scatter.csv": io.write_csv(out / "scatter.csv",
                                    ("method", "setting", "approx_error", "lds_mean", "lds_lo", "lds_hi"), scatter),
        "steps.csv": io.write_csv(out / "steps.csv", ("setting", "step", "dES_pct", "dLDS_pct"), steps),
    }
    if diag:
        outputs["diagnostics.csv"] = io.write_csv(out / "diagnostics.csv", DIAG_COLUMNS, diag)
    man = {
        "stage": "report",
        "runs": [str(d) for d in setting_dirs],
        "settings": [m["setting"] for m in mans],
        "upstream": {m["setting"]: m["key"] for m in mans},
        "lds_delta_convention": LDS_DELTA_CONVENTION,
        "environment": environment(),
        "outputs": outputs,
    }
    io.write_json(out / "manifest.json", man)
    return man


def evaluated_settings(root: Path) -> list[Path]:
    return sorted(p.parent.parent for p in Path(root).glob("*/evaluate/manifest.json"))
