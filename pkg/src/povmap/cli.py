"""Command-line entry point: ``povmap <command> [options]``.

Exit codes: 0 success, 1 computation error, 2 input or usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    OUT_ENV,
    ConfigError,
    RunConfig,
    apply_overrides,
    config_hash,
    file_digest,
    load_config,
    save_config,
)
from .data_io import DataError, Dataset, load_dataset, write_csv
from .evaluation import (
    EvaluationError,
    UndefinedCorrelationError,
    comparison_grid,
    dataset_overlap,
    loocv,
    loocv_ablation,
    threshold_sweep,
)
from .explain import ExplainError, dependence_data, shap_summary
from .features import KINDS, DetectionArrays, build_matrix, save_features
from .models import MODEL_KINDS, ALIASES, ConvergenceError, fit_model, save_model
from .synth import DEFAULT_RELATION, SynthConfig, SynthError, generate
from .taxonomy import HierarchyError, default_hierarchy

log = logging.getLogger("povmap")

COMMANDS = ("synth", "featurize", "evaluate", "grid", "sweep", "explain", "ablate", "report")
BUNDLE_FILES = (
    "grid.csv",
    "sweep.csv",
    "shap_summary.csv",
    "importance.csv",
    "dependence.csv",
    "ablation.csv",
    "scatter.csv",
)
MANIFEST = "manifest.json"

# ready-made synthetic relations selectable with ``synth --relation``
RELATION_PRESETS = {
    "linear": DEFAULT_RELATION,
    "ratio": {
        "kind": "ratio",
        "numerator": "Truck",
        "denominator": "Passenger-Vehicle",
        "scale": 20.0,
        "intercept": 0.2,
    },
    "single": {"kind": "linear", "weights": {"Truck": 0.05}, "intercept": 0.5},
    "threshold": {"kind": "threshold", "class": "Truck", "cutpoint": 30, "low": 0.5, "high": 2.0},
}

INPUT_ERRORS = (DataError, HierarchyError, ConfigError, SynthError, ExplainError, FileNotFoundError)
COMPUTE_ERRORS = (UndefinedCorrelationError, ConvergenceError, EvaluationError, FloatingPointError)


class BundleError(ValueError):
    """Output directory already holds files from a different configuration."""


@dataclass
class Context:
    cfg: RunConfig
    out: Path
    chash: str
    force: bool = False

    def meta(self, **extra) -> dict:
        return {"config_hash": self.chash, "seed": self.cfg.seed, **extra}

    def path(self, name: str) -> Path:
        p = self.out / name
        existing = embedded_hash(p)
        if existing is not None and existing != self.chash and not self.force:
            raise BundleError(
                f"{p} was produced by config {existing}, not {self.chash}; "
                "use a fresh --out or pass --force"
            )
        return p


def embedded_hash(path: Path) -> str | None:
    """Config hash recorded in an output file, or None if absent."""
    if not path.is_file():
        return None
    if path.suffix == ".json":
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            return None
        prov = d.get("provenance", d) if isinstance(d, dict) else {}
        return prov.get("config_hash") if isinstance(prov, dict) else None
    if path.suffix in (".csv", ".toml"):
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if not line.startswith("# "):
                    break
                key, _, value = line[2:].rstrip("\n").partition("=")
                if key == "config_hash":
                    return value
    return None


def verify_bundle(out_dir) -> str:
    """Check a report directory: every listed file present, unmodified and
    carrying the manifest's config hash. Returns that hash."""
    out = Path(out_dir)
    manifest = json.loads((out / MANIFEST).read_text(encoding="utf-8"))
    chash = manifest["config_hash"]
    for name, digest in manifest["files"].items():
        p = out / name
        if not p.is_file():
            raise BundleError(f"{p} listed in manifest but missing")
        if file_digest(p) != digest:
            raise BundleError(f"{p} does not match its manifest digest")
        if embedded_hash(p) != chash:
            raise BundleError(f"{p} carries a different config hash")
    return chash


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="TOML run configuration; flags override it")
    g.add_argument("--seed", type=int, help="global random seed")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./povmap_out)")
    g.add_argument("--jobs", type=int, help="worker processes for LOOCV folds")
    g.add_argument("--force", action="store_true", help="overwrite outputs from another config")
    g.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    d = data.add_argument_group("data and features")
    d.add_argument("--detections", help="detections JSONL (default <out>/detections.jsonl)")
    d.add_argument("--survey", help="survey CSV (default <out>/survey.csv)")
    d.add_argument("--scheme", choices=KINDS)
    d.add_argument("--level", choices=("parent", "child"))
    d.add_argument("--threshold", type=float, help="minimum detection confidence kept")
    d.add_argument("--nms-iou", type=float, dest="nms_iou", help="apply per-tile NMS at this IoU")

    model = argparse.ArgumentParser(add_help=False)
    m = model.add_argument_group("model")
    m.add_argument("--model", choices=sorted(MODEL_KINDS + tuple(ALIASES)))
    m.add_argument("--tune", action="store_true", default=None, help="inner k-fold grid search")

    parser = argparse.ArgumentParser(prog="povmap", description="Poverty mapping from object counts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n-clusters", type=int, dest="n_clusters")
    p.add_argument("--relation", choices=sorted(RELATION_PRESETS))
    p.add_argument("--noise", type=float, help="noise sigma as a fraction of the target range")

    sub.add_parser("featurize", parents=[common, data], help="write the feature matrix")
    sub.add_parser("evaluate", parents=[common, data, model], help="LOOCV r^2 for one configuration")
    sub.add_parser("grid", parents=[common, data, model], help="features x level x model comparison")
    p = sub.add_parser("sweep", parents=[common, data, model], help="confidence threshold sweep")
    p.add_argument("--thresholds", type=float, nargs="+")
    p = sub.add_parser("explain", parents=[common, data, model], help="SHAP summary and dependence")
    p.add_argument("--feature", help="feature for dependence data (default: most important)")
    p.add_argument("--interaction", help="coloring feature, 'auto' or 'none'")
    sub.add_parser("ablate", parents=[common, data, model], help="test-time feature ablation")
    sub.add_parser("report", parents=[common, data, model], help="full analysis bundle")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        key: getattr(args, key, None)
        for key in ("seed", "out", "jobs", "detections", "survey", "scheme", "level", "threshold",
                    "nms_iou", "model", "tune")
    }
    if getattr(args, "thresholds", None):
        overrides["sweep_thresholds"] = args.thresholds
    if getattr(args, "feature", None):
        overrides["explain_feature"] = args.feature
    if getattr(args, "interaction", None):
        overrides["interaction"] = args.interaction
    if args.command == "synth":
        synth = dict(cfg.synth)
        if args.n_clusters is not None:
            synth["n_clusters"] = args.n_clusters
        if args.relation is not None:
            synth["relation"] = RELATION_PRESETS[args.relation]
        if args.noise is not None:
            synth["noise_sigma"] = args.noise
        overrides["synth"] = synth
    return apply_overrides(cfg, **overrides)


def input_paths(cfg: RunConfig) -> tuple[Path, Path]:
    out = cfg.out_dir()
    det = Path(cfg.detections) if cfg.detections else out / "detections.jsonl"
    sur = Path(cfg.survey) if cfg.survey else out / "survey.csv"
    for p in (det, sur):
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
    return det, sur


def open_context(cfg: RunConfig, force: bool, inputs=()) -> Context:
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return Context(cfg, out, config_hash(cfg, inputs), force)


def load_inputs(cfg: RunConfig, force: bool):
    det, sur = input_paths(cfg)
    ctx = open_context(cfg, force, (det, sur))
    dataset = load_dataset(det, sur, default_hierarchy(), cfg.grid_spec())
    if cfg.nms_iou is not None:
        dataset = Dataset(dataset.surveys, dataset.detections.suppressed(cfg.nms_iou))
        log.info("NMS at IoU %.2f kept %d detections", cfg.nms_iou, len(dataset.detections))
    return ctx, dataset


# -- shared computations ----------------------------------------------------


def _features(ctx: Context, dataset: Dataset, arrays=None, **scheme):
    hierarchy = default_hierarchy()
    if arrays is None:
        arrays = DetectionArrays.from_dataset(dataset, hierarchy)
    return build_matrix(dataset, ctx.cfg.scheme_obj(**scheme), hierarchy, arrays=arrays)


def _scheme_meta(ctx: Context, **extra) -> dict:
    c = ctx.cfg
    return ctx.meta(scheme=c.scheme, level=c.level, threshold=c.threshold, model=c.model, **extra)


def _write_grid(ctx, res):
    write_csv(ctx.path("grid.csv"), res.header(), res.table_rows(), ctx.meta(threshold=ctx.cfg.threshold))


def _write_sweep(ctx, res):
    write_csv(ctx.path("sweep.csv"), res.header(), res.rows(), ctx.meta(level=ctx.cfg.level, model=ctx.cfg.model))


def _write_scatter(ctx, results):
    rows = (
        [kind, r.scheme.level, r.model_spec.kind, cid, t, p]
        for kind, r in results
        for cid, t, p, _ in r.rows()
    )
    write_csv(ctx.path("scatter.csv"), ["scheme", "level", "model", "cluster_id", "y_true", "y_pred"], rows,
              ctx.meta(threshold=ctx.cfg.threshold))


def _explain(ctx: Context, dataset: Dataset, fm):
    cfg = ctx.cfg
    model = fit_model(cfg.model_spec(), fm.values, fm.targets, seed=cfg.seed)
    summary = shap_summary(model, fm.values, fm.names)
    importance = summary.importance
    meta = _scheme_meta(ctx, base_value=summary.base_value)
    write_csv(ctx.path("shap_summary.csv"), ["cluster_id", "feature", "value", "phi"],
              summary.long_rows(fm.cluster_ids), meta)
    write_csv(ctx.path("importance.csv"), ["rank", "feature", "mean_abs", "sum_abs"], importance.rows(),
              _scheme_meta(ctx))
    feature = cfg.explain_feature or importance.ranking()[0]
    interaction = None if cfg.interaction == "none" else cfg.interaction
    rows, inter = dependence_data(summary, feature, interaction, fm.cluster_ids)
    write_csv(
        ctx.path("dependence.csv"),
        ["cluster_id", "value", "phi", "interaction_value"],
        ([r.sample, r.value, r.phi, "" if r.interaction_value is None else r.interaction_value] for r in rows),
        _scheme_meta(ctx, feature=feature, interaction=inter or ""),
    )
    return model, importance


def _ablate(ctx: Context, dataset: Dataset, fm, overlap):
    cfg = ctx.cfg
    full, ablated = loocv_ablation(fm, overlap, cfg.model_spec(), seed=cfg.seed, jobs=cfg.jobs)
    rows = sorted(
        ((name, full, float(a), full - float(a)) for name, a in zip(fm.names, ablated)),
        key=lambda r: (-r[3], r[0]),
    )
    write_csv(ctx.path("ablation.csv"), ["feature", "r2_full", "r2_ablated", "delta"], rows, _scheme_meta(ctx))
    return full, rows


# -- commands ---------------------------------------------------------------


def cmd_synth(cfg: RunConfig, force: bool) -> int:
    ctx = open_context(cfg, force)
    # the global seed is the one source of randomness for a run
    sc = SynthConfig.from_dict({**cfg.synth, "seed": cfg.seed})
    for name in ("detections.jsonl", "survey.csv", "ground_truth.json"):
        ctx.path(name)
    paths, truth = generate(sc, ctx.out, grid=cfg.grid_spec())
    gt_path = paths["ground_truth"]
    gt = json.loads(gt_path.read_text(encoding="utf-8"))
    gt["provenance"] = ctx.meta()
    gt_path.write_text(json.dumps(gt, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    n_det = sum(1 for _ in paths["detections"].open(encoding="utf-8"))
    print(f"wrote {len(truth.cluster_ids)} clusters, {n_det} detections to {ctx.out}")
    return 0


def cmd_featurize(cfg: RunConfig, force: bool) -> int:
    ctx, dataset = load_inputs(cfg, force)
    fm = _features(ctx, dataset)
    save_features(ctx.path("features.csv"), fm,
                  ctx.meta(threshold=cfg.threshold, scheme=cfg.scheme, level=cfg.level))
    print(f"features.csv: {fm.shape[0]} x {fm.shape[1]}")
    return 0


def cmd_evaluate(cfg: RunConfig, force: bool) -> int:
    ctx, dataset = load_inputs(cfg, force)
    fm = _features(ctx, dataset)
    res = loocv(dataset, fm.scheme, cfg.model_spec(), seed=cfg.seed, grid=cfg.grid_spec(), jobs=cfg.jobs,
                features=fm)
    write_csv(ctx.path("predictions.csv"), ["cluster_id", "y_true", "y_pred", "n_excluded"], res.rows(),
              _scheme_meta(ctx, r2=res.r2))
    _write_scatter(ctx, [(cfg.scheme, res)])
    model = fit_model(cfg.model_spec(), fm.values, fm.targets, seed=cfg.seed)
    save_model(ctx.path("model.json"), model, {**_scheme_meta(ctx), "features": fm.names})
    print(f"r2 = {res.r2:.3f}")
    return 0


def cmd_grid(cfg: RunConfig, force: bool) -> int:
    ctx, dataset = load_inputs(cfg, force)
    res = comparison_grid(dataset, cfg.grid_kinds, cfg.grid_levels, cfg.grid_models,
                          threshold=cfg.threshold, specs=cfg.model_specs(), seed=cfg.seed,
                          grid=cfg.grid_spec(), jobs=cfg.jobs)
    _write_grid(ctx, res)
    print(res.render())
    return 0


def cmd_sweep(cfg: RunConfig, force: bool) -> int:
    ctx, dataset = load_inputs(cfg, force)
    res = threshold_sweep(dataset, cfg.sweep_thresholds, cfg.sweep_kinds, cfg.model_spec(), level=cfg.level,
                          seed=cfg.seed, grid=cfg.grid_spec(), jobs=cfg.jobs)
    _write_sweep(ctx, res)
    for row in res.rows():
        thr, r2s = row[0], row[1:1 + len(res.kinds)]
        print(f"{thr:.2f}  " + "  ".join(f"{k}={v:.3f}" for k, v in zip(res.kinds, r2s)))
    return 0


def cmd_explain(cfg: RunConfig, force: bool) -> int:
    ctx, dataset = load_inputs(cfg, force)
    fm = _features(ctx, dataset)
    _, importance = _explain(ctx, dataset, fm)
    for rank, name, mean_abs, _ in list(importance.rows())[:5]:
        print(f"{rank:>2}  {name:<32} {mean_abs:.4f}")
    return 0


def cmd_ablate(cfg: RunConfig, force: bool) -> int:
    ctx, dataset = load_inputs(cfg, force)
    fm = _features(ctx, dataset)
    full, rows = _ablate(ctx, dataset, fm, dataset_overlap(dataset, cfg.grid_spec()))
    print(f"full r2 = {full:.3f}")
    for name, _, r2, delta in rows[:5]:
        print(f"{name:<32} r2={r2:.3f}  delta={delta:+.3f}")
    return 0


def cmd_report(cfg: RunConfig, force: bool) -> int:
    ctx, dataset = load_inputs(cfg, force)
    for name in BUNDLE_FILES + (MANIFEST,):
        ctx.path(name)  # refuse before computing anything
    hierarchy = default_hierarchy()
    arrays = DetectionArrays.from_dataset(dataset, hierarchy)
    overlap = dataset_overlap(dataset, cfg.grid_spec())

    grid = comparison_grid(dataset, cfg.grid_kinds, cfg.grid_levels, cfg.grid_models,
                           threshold=cfg.threshold, specs=cfg.model_specs(), seed=cfg.seed,
                           grid=cfg.grid_spec(), jobs=cfg.jobs, hierarchy=hierarchy)
    _write_grid(ctx, grid)
    sweep = threshold_sweep(dataset, cfg.sweep_thresholds, cfg.sweep_kinds, cfg.model_spec(), level=cfg.level,
                            seed=cfg.seed, grid=cfg.grid_spec(), jobs=cfg.jobs, hierarchy=hierarchy)
    _write_sweep(ctx, sweep)

    scatter = []
    spec = cfg.model_spec()
    for kind in KINDS:
        key = (kind, cfg.level, spec.kind)
        res = grid.results.get(key)
        if res is None or spec.tune != cfg.tune:
            fm_k = _features(ctx, dataset, arrays, kind=kind)
            res = loocv(dataset, fm_k.scheme, spec, seed=cfg.seed, jobs=cfg.jobs, features=fm_k,
                        overlap=overlap)
        scatter.append((kind, res))
    _write_scatter(ctx, scatter)

    fm = _features(ctx, dataset, arrays)
    _explain(ctx, dataset, fm)
    _ablate(ctx, dataset, fm, overlap)

    manifest = {
        "config_hash": ctx.chash,
        "seed": cfg.seed,
        "versions": {
            "povmap": __version__,
            "numpy": np.__version__,
            "python": ".".join(platform.python_version_tuple()[:2]),
        },
        "files": {name: file_digest(ctx.out / name) for name in BUNDLE_FILES},
    }
    (ctx.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(grid.render())
    print(f"report bundle in {ctx.out} (config {ctx.chash})")
    return 0


def _record_run(cfg: RunConfig, command: str, force: bool):
    """Write the resolved configuration next to the command's outputs."""
    inputs = () if command == "synth" else input_paths(cfg)
    ctx = open_context(cfg, force, inputs)
    save_config(ctx.path(f"run_{command}.toml"), cfg, ctx.chash)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        code = HANDLERS[args.command](cfg, args.force)
        _record_run(cfg, args.command, args.force)
        return code
    except COMPUTE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except INPUT_ERRORS + (BundleError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
