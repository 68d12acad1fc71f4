"""Run configuration: one YAML file, strict keys, lossless round-trip.

Example::

    seed: 0
    dataset:
      source: digits          # digits | blobs
      path: null              # null = copy bundled with scikit-learn
      n_train: null           # optional subsample of the training split
      test_fraction: 0.1
    model: {depth: 4, width: 16}
    train: {lr0: 0.03, batch: 32, epochs: 100, weight_decay: 0.0}
    elso: {alpha: 0.5, K: 100, R: 50, queries: 20}
    inverse: {threshold: 1.0e-4, damping: 0.0}
    methods: [hessian, ggn, block_ggn, ekfac, kfac]
    curvature: {max_dim: 12000, ekfac_gradients: ggn}
    evaluation: {resamples: 1000, level: 0.95}
    sweep: {epochs: [10, 100, 1000], depth: [], width: [], seeds: [0, 1, 2]}

Every sweep axis left empty takes the single value from ``model``/``train``/``seed``.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .curvature import MAX_DENSE_DIM, METHODS
from .model import MlpConfig, ParamLayout


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "digits"
    path: str | None = None
    n_train: int | None = None
    test_fraction: float = 0.1
    blobs_n: int = 300
    blobs_classes: int = 3
    blobs_dim: int = 8


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 1
    width: int = 16


@dataclass(frozen=True)
class TrainSpec:
    lr0: float = 0.03
    batch: int = 32
    epochs: int = 100
    weight_decay: float = 0.0


@dataclass(frozen=True)
class ElsoSpec:
    alpha: float = 0.5
    K: int = 100
    R: int = 50
    queries: int = 20


@dataclass(frozen=True)
class InverseSpec:
    threshold: float = 1e-4
    damping: float = 0.0


@dataclass(frozen=True)
class CurvatureSpec:
    max_dim: int = MAX_DENSE_DIM
    ekfac_gradients: str = "ggn"


@dataclass(frozen=True)
class EvaluationSpec:
    resamples: int = 1000
    level: float = 0.95


@dataclass(frozen=True)
class SweepSpec:
    epochs: tuple[int, ...] = ()
    depth: tuple[int, ...] = ()
    width: tuple[int, ...] = ()
    seeds: tuple[int, ...] = ()


_SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelSpec,
    "train": TrainSpec,
    "elso": ElsoSpec,
    "inverse": InverseSpec,
    "curvature": CurvatureSpec,
    "evaluation": EvaluationSpec,
    "sweep": SweepSpec,
}


@dataclass(frozen=True)
class Setting:
    """One point of the sweep."""
    epochs: int
    depth: int
    width: int
    seed: int

    @property
    def name(self) -> str:
        return f"e{self.epochs}_d{self.depth}_w{self.width}_s{self.seed}"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    elso: ElsoSpec = field(default_factory=ElsoSpec)
    inverse: InverseSpec = field(default_factory=InverseSpec)
    methods: tuple[str, ...] = METHODS
    curvature: CurvatureSpec = field(default_factory=CurvatureSpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["sweep"] = {k: list(v) for k, v in d["sweep"].items()}
        return d

    def settings(self) -> list[Setting]:
        s = self.sweep
        axes = (s.epochs or (self.train.epochs,), s.depth or (self.model.depth,),
                s.width or (self.model.width,), s.seeds or (self.seed,))
        return [Setting(*p) for p in itertools.product(*axes)]

    def for_setting(self, st: Setting) -> "RunConfig":
        """Collapse the sweep to one point."""
        return replace(self, seed=st.seed, model=ModelSpec(st.depth, st.width),
                       train=replace(self.train, epochs=st.epochs), sweep=SweepSpec())

    def mlp_config(self) -> MlpConfig:
        input_dim = 64 if self.dataset.source == "digits" else self.dataset.blobs_dim
        classes = 10 if self.dataset.source == "digits" else self.dataset.blobs_classes
        return MlpConfig.uniform(self.model.depth, self.model.width, input_dim, classes)


def _coerce(name: str, value, typ):
    """Check one leaf value against its declared type. Strings like '1e-4' count as floats."""
    typ = str(typ)
    optional = "None" in typ
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{name}: null is not allowed")
    if typ.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        inner = "int" if "int" in typ else "str"
        return tuple(_coerce(f"{name}[{i}]", v, inner) for i, v in enumerate(value))
    if typ.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if typ.startswith("float"):
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    if typ.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{name}: unsupported field type {typ}")


def _section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{name}: unknown keys {unknown}")
    return cls(**{k: _coerce(f"{name}.{k}", v, known[k].type) for k, v in raw.items()})


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    allowed = {"seed", "methods", *_SECTIONS}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kw = {k: _section(k, cls, raw[k]) for k, cls in _SECTIONS.items() if k in raw}
    if "seed" in raw:
        kw["seed"] = _coerce("seed", raw["seed"], "int")
    if "methods" in raw:
        kw["methods"] = _coerce("methods", raw["methods"], "tuple[str]")
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    d, t, e = cfg.dataset, cfg.train, cfg.elso
    if d.source not in ("digits", "blobs"):
        raise ConfigError(f"dataset.source: expected digits or blobs, got {d.source!r}")
    if not 0.0 < d.test_fraction < 1.0:
        raise ConfigError("dataset.test_fraction must lie in (0, 1)")
    if d.n_train is not None and d.n_train < 2:
        raise ConfigError("dataset.n_train must be at least 2")
    if min(d.blobs_n, d.blobs_classes, d.blobs_dim) < 1 or d.blobs_classes < 2:
        raise ConfigError("dataset blobs parameters must be positive with at least 2 classes")
    if t.lr0 <= 0 or t.batch < 1 or t.epochs < 1 or t.weight_decay < 0:
        raise ConfigError("train: need lr0 > 0, batch >= 1, epochs >= 1, weight_decay >= 0")
    if not 0.0 < e.alpha < 1.0 or e.K < 1 or e.R < 1 or e.queries < 1:
        raise ConfigError("elso: need 0 < alpha < 1 and K, R, queries >= 1")
    if cfg.inverse.threshold < 0:
        raise ConfigError("inverse.threshold must be non-negative")
    if cfg.inverse.damping != 0.0:
        raise ConfigError("inverse.damping is reserved and must be 0")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad or not cfg.methods or len(set(cfg.methods)) != len(cfg.methods):
        raise ConfigError(f"methods: expected distinct entries from {list(METHODS)}, got {list(cfg.methods)}")
    if cfg.curvature.ekfac_gradients not in ("ggn", "empirical"):
        raise ConfigError("curvature.ekfac_gradients: expected ggn or empirical")
    if cfg.evaluation.resamples < 1 or not 0.0 < cfg.evaluation.level < 1.0:
        raise ConfigError("evaluation: need resamples >= 1 and 0 < level < 1")
    if cfg.seed < 0 or any(s < 0 for s in cfg.sweep.seeds):
        raise ConfigError("seeds must be non-negative")
    for st in cfg.settings():
        if st.epochs < 1 or st.depth < 0 or st.width < 1:
            raise ConfigError(f"sweep point {st.name}: need epochs >= 1, depth >= 0, width >= 1")
        D = ParamLayout.for_config(cfg.for_setting(st).mlp_config()).dim
        if D > cfg.curvature.max_dim:
            raise ConfigError(f"sweep point {st.name}: D={D} exceeds curvature.max_dim={cfg.curvature.max_dim}")


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def loads(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return from_dict(raw or {})


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
