"""Run configuration: TOML file plus command-line overrides, and its hash.

The hash covers every setting that affects results plus the bytes of the
input files, so two outputs carry the same hash only if they came from the
same data and the same settings. Output directory and worker count are
excluded because they cannot change any number.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .evaluation import DEFAULT_SWEEP, GRID_MODELS, LEVELS
from .features import DEFAULT_THRESHOLD, KINDS, FeatureScheme
from .geo_grid import GridSpec
from .models import MODEL_KINDS, ModelSpec, canonical_kind

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUT_ENV = "POVMAP_OUT"
DEFAULT_OUT = "povmap_out"
HASH_LEN = 16

# settings that never change a computed number
_UNHASHED = ("out", "jobs")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    detections: str | None = None
    survey: str | None = None
    out: str | None = None
    seed: int = 0
    jobs: int = 1
    grid: dict = field(default_factory=dict)  # GridSpec overrides
    scheme: str = "counts"
    level: str = "parent"
    threshold: float = DEFAULT_THRESHOLD
    nms_iou: float | None = None
    model: str = "gbdt"
    tune: bool = False
    inner_folds: int = 5
    params: dict = field(default_factory=dict)  # model kind -> fixed hyperparameters
    grids: dict = field(default_factory=dict)  # model kind -> search grid
    grid_kinds: list = field(default_factory=lambda: list(KINDS))
    grid_levels: list = field(default_factory=lambda: list(LEVELS))
    grid_models: list = field(default_factory=lambda: list(GRID_MODELS))
    sweep_thresholds: list = field(default_factory=lambda: list(DEFAULT_SWEEP))
    sweep_kinds: list = field(default_factory=lambda: list(KINDS))
    explain_feature: str | None = None  # None: the top-ranked feature
    interaction: str = "auto"
    synth: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        try:
            self.grid_spec().validate()
            self.scheme_obj()
            for m in [self.model, *self.grid_models]:
                canonical_kind(m)
            for k in self.grid_kinds + self.sweep_kinds:
                FeatureScheme(k, self.level, self.threshold)
            for lvl in self.grid_levels:
                FeatureScheme(self.scheme, lvl, self.threshold)
            for t in self.sweep_thresholds:
                FeatureScheme(self.scheme, self.level, t)
            for table in (self.params, self.grids):
                for k in table:
                    if canonical_kind(k) not in MODEL_KINDS:
                        raise ValueError(k)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.nms_iou is not None and not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError("nms_iou must lie in (0, 1]")

    def grid_spec(self) -> GridSpec:
        return GridSpec(**self.grid)

    def scheme_obj(self, kind=None, level=None, threshold=None) -> FeatureScheme:
        return FeatureScheme(
            kind or self.scheme,
            level or self.level,
            self.threshold if threshold is None else threshold,
        )

    def model_spec(self, kind=None) -> ModelSpec:
        kind = canonical_kind(kind or self.model)
        params = {**self.params.get(kind, {})}
        grid = self.grids.get(kind, {})
        return ModelSpec(kind, params, self.tune, grid, self.inner_folds)

    def model_specs(self) -> dict:
        return {canonical_kind(m): self.model_spec(m) for m in self.grid_models}

    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def load_config(path) -> RunConfig:
    """Read a TOML run configuration. Relative data paths resolve against
    the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open("rb") as fh:
        try:
            d = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for key in ("detections", "survey", "out"):
        if key in d and not Path(d[key]).is_absolute():
            d[key] = str(path.parent / d[key])
    return RunConfig.from_dict(d)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Return a copy with every non-None override applied; flags win."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    new = replace(cfg, **changes)
    new.validate()
    return new


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(cfg: RunConfig, inputs=()) -> str:
    """Short sha256 over the result-relevant settings and input file bytes."""
    d = {k: v for k, v in cfg.to_dict().items() if k not in _UNHASHED}
    # paths are identified by content, not by where they live
    d["detections"] = d["survey"] = None
    d["inputs"] = [file_digest(p) for p in inputs]
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:HASH_LEN]


def _toml_key(key: str) -> str:
    bare = key and all(ch.isalnum() or ch in "-_" for ch in key) and key.isascii()
    return key if bare else json.dumps(key)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if v != v or v in (float("inf"), float("-inf")):
            raise ConfigError(f"cannot write non-finite number {v} to TOML")
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot write {type(v).__name__} to TOML")


def dump_toml(d: dict, comment: str | None = None) -> str:
    """Serialize nested dicts of scalars and lists. ``None`` values are omitted."""
    lines = [f"# {comment}"] if comment else []

    def table(prefix, obj):
        scalars = [(k, v) for k, v in obj.items() if v is not None and not isinstance(v, dict)]
        subs = [(k, v) for k, v in obj.items() if isinstance(v, dict)]
        if prefix and (scalars or not subs):
            lines.append("")
            lines.append("[" + ".".join(_toml_key(p) for p in prefix) + "]")
        for k, v in scalars:
            lines.append(f"{_toml_key(k)} = {_toml_value(v)}")
        for k, v in subs:
            table(prefix + [k], v)

    table([], d)
    return "\n".join(lines) + "\n"


def save_config(path, cfg: RunConfig, chash: str):
    d = {k: v for k, v in cfg.to_dict().items() if k not in _UNHASHED}
    Path(path).write_text(dump_toml(d, comment=f"config_hash={chash}"), encoding="utf-8")
