"""Spatially-aware leave-one-out evaluation.

Scores use Pearson's r^2, the squared sample correlation between predictions
and targets. This is *not* the coefficient of determination: it ignores
scale and offset, so a model whose predictions are anti-correlated with the
truth still scores above zero.
"""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data_io import Dataset
from .features import KIND_TITLES, KINDS, DetectionArrays, FeatureMatrix, FeatureScheme, build_matrix
from .geo_grid import GridSpec, overlap_matrix
from .models import MODEL_KINDS, MODEL_TITLES, ModelSpec, fit_model, predict
from .taxonomy import ClassHierarchy, default_hierarchy

log = logging.getLogger(__name__)

DEFAULT_SWEEP = tuple(round(0.1 * k, 1) for k in range(1, 10))
GRID_MODELS = ("gbdt", "ols", "lasso", "ridge")
LEVELS = ("parent", "child")


class UndefinedCorrelationError(ArithmeticError):
    """Correlation is undefined because one input has zero variance."""


class EvaluationError(RuntimeError):
    pass


def pearson_r2(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError("pred and truth must be 1-d arrays of equal length")
    if len(pred) < 2:
        raise ValueError("need at least 2 points")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValueError("inputs must be finite")
    a = pred - pred.mean()
    b = truth - truth.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if np.ptp(pred) == 0 or np.ptp(truth) == 0 or saa == 0.0 or sbb == 0.0:
        which = "predictions" if np.ptp(pred) == 0 or saa == 0.0 else "targets"
        raise UndefinedCorrelationError(f"Pearson correlation undefined: {which} have zero variance")
    r = float(a @ b) / np.sqrt(saa * sbb)
    return float(min(r * r, 1.0))


def fold_seed(global_seed: int, cluster_id: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{cluster_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def training_exclusion(test: int, overlap: np.ndarray) -> tuple[np.ndarray, int]:
    """Training indices for held-out cluster ``test``.

    ``overlap`` is the pairwise neighborhood-overlap matrix. The test cluster
    and every cluster overlapping it are removed; the returned count excludes
    the test cluster itself.
    """
    drop = overlap[test].copy()
    drop[test] = True
    train = np.flatnonzero(~drop)
    return train, int(drop.sum()) - 1


def dataset_overlap(dataset: Dataset, grid: GridSpec = GridSpec()) -> np.ndarray:
    lat = [s.location.lat for s in dataset.surveys]
    lon = [s.location.lon for s in dataset.surveys]
    return overlap_matrix(lat, lon, grid)


@dataclass
class LoocvResult:
    cluster_ids: list[str]
    y_true: np.ndarray
    y_pred: np.ndarray
    n_excluded: np.ndarray
    r2: float
    model_spec: ModelSpec
    scheme: FeatureScheme | None = None
    seed: int = 0

    def rows(self):
        for cid, t, p, n in zip(self.cluster_ids, self.y_true, self.y_pred, self.n_excluded):
            yield cid, float(t), float(p), int(n)


_WORKER: dict = {}


def _init_worker(X, y, spec):
    _WORKER.update(X=X, y=y, spec=spec)


def _run_fold(task):
    test, train, seed, zero_cols = task
    X, y, spec = _WORKER["X"], _WORKER["y"], _WORKER["spec"]
    model = fit_model(spec, X[train], y[train], seed)
    x = X[test : test + 1]
    out = [float(predict(model, x)[0])]
    for j in zero_cols:
        xz = x.copy()
        xz[:, j] = 0.0
        out.append(float(predict(model, xz)[0]))
    return out


def _fold_tasks(cluster_ids, overlap, seed, zero_cols=()):
    tasks, n_excl = [], []
    for i, cid in enumerate(cluster_ids):
        train, n = training_exclusion(i, overlap)
        if i in train:
            raise EvaluationError(f"leakage: cluster {cid!r} appears in its own training fold")
        if len(train) == 0:
            raise EvaluationError(f"training set empty when holding out cluster {cid!r}")
        tasks.append((i, train, fold_seed(seed, cid), tuple(zero_cols)))
        n_excl.append(n)
    return tasks, np.asarray(n_excl, dtype=np.int64)


def _run_folds(X, y, spec, tasks, jobs):
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(X, y, spec)) as ex:
            return list(ex.map(_run_fold, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    _init_worker(X, y, spec)
    try:
        return [_run_fold(t) for t in tasks]
    finally:
        _WORKER.clear()


def loocv_matrix(X, y, cluster_ids, overlap, model_spec: ModelSpec, seed: int = 0, jobs: int = 1):
    """Leave-one-out predictions and exclusion counts for a design matrix."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) < 3:
        raise EvaluationError("LOOCV needs at least 3 clusters")
    tasks, n_excl = _fold_tasks(cluster_ids, overlap, seed)
    preds = np.array([o[0] for o in _run_folds(X, y, model_spec, tasks, jobs)])
    return preds, n_excl


def loocv(
    dataset: Dataset,
    scheme: FeatureScheme,
    model_spec: ModelSpec,
    *,
    seed: int = 0,
    grid: GridSpec = GridSpec(),
    jobs: int = 1,
    features: FeatureMatrix | None = None,
    hierarchy: ClassHierarchy | None = None,
    overlap: np.ndarray | None = None,
) -> LoocvResult:
    """Hold out each cluster, train on non-overlapping clusters, predict it."""
    fm = features if features is not None else build_matrix(dataset, scheme, hierarchy)
    if overlap is None:
        overlap = dataset_overlap(dataset, grid)
    preds, n_excl = loocv_matrix(fm.values, fm.targets, fm.cluster_ids, overlap, model_spec, seed, jobs)
    r2 = pearson_r2(preds, fm.targets)
    return LoocvResult(list(fm.cluster_ids), fm.targets.copy(), preds, n_excl, r2, model_spec, scheme, seed)


@dataclass
class GridResult:
    kinds: tuple[str, ...]
    levels: tuple[str, ...]
    models: tuple[str, ...]
    r2: dict = field(default_factory=dict)  # (kind, level, model) -> float
    results: dict = field(default_factory=dict)  # (kind, level, model) -> LoocvResult

    def ranked(self, top: int = 3):
        cells = sorted(self.r2.items(), key=lambda kv: (-kv[1], kv[0]))
        return [k for k, _ in cells[:top]]

    def header(self) -> list[str]:
        return ["features"] + [f"{MODEL_TITLES[m]}:{lvl}" for m in self.models for lvl in self.levels]

    def table_rows(self):
        for kind in self.kinds:
            yield [kind] + [self.r2[(kind, lvl, m)] for m in self.models for lvl in self.levels]

    def render(self) -> str:
        marks = dict(zip(self.ranked(), ("[1]", "[2]", "[3]")))
        head = self.header()
        first = max(len(head[0]), *(len(KIND_TITLES[k]) for k in self.kinds))
        lines = [f"{head[0]:<{first}}  " + "  ".join(f"{h:>16}" for h in head[1:])]
        for kind in self.kinds:
            cells = []
            for m in self.models:
                for lvl in self.levels:
                    key = (kind, lvl, m)
                    cells.append(f"{self.r2[key]:>13.3f}{marks.get(key, ''):>3}")
            lines.append(f"{KIND_TITLES[kind]:<{first}}  " + "  ".join(cells))
        return "\n".join(lines)


def comparison_grid(
    dataset: Dataset,
    kinds=KINDS,
    levels=LEVELS,
    models=GRID_MODELS,
    *,
    threshold: float = 0.6,
    specs: dict | None = None,
    seed: int = 0,
    grid: GridSpec = GridSpec(),
    jobs: int = 1,
    hierarchy: ClassHierarchy | None = None,
) -> GridResult:
    """LOOCV r^2 for every (feature kind, level, model) combination."""
    hierarchy = hierarchy or default_hierarchy()
    specs = specs or {}
    arrays = DetectionArrays.from_dataset(dataset, hierarchy)
    overlap = dataset_overlap(dataset, grid)
    out = GridResult(tuple(kinds), tuple(levels), tuple(models))
    for kind in kinds:
        for lvl in levels:
            scheme = FeatureScheme(kind, lvl, threshold)
            fm = build_matrix(dataset, scheme, hierarchy, arrays=arrays)
            for m in models:
                spec = specs.get(m, ModelSpec(m))
                res = loocv(dataset, scheme, spec, seed=seed, jobs=jobs, features=fm, overlap=overlap)
                log.info("grid %s/%s/%s r2=%.3f", kind, lvl, m, res.r2)
                out.r2[(kind, lvl, m)] = res.r2
                out.results[(kind, lvl, m)] = res
    return out


@dataclass
class SweepResult:
    thresholds: list[float]
    kinds: tuple[str, ...]
    r2: dict  # kind -> list of r^2, one per threshold
    mean_counts: np.ndarray  # (T, n_classes) mean Counts per class across clusters
    class_names: list[str]

    def rows(self):
        for t, thr in enumerate(self.thresholds):
            yield [thr] + [self.r2[k][t] for k in self.kinds] + list(self.mean_counts[t])

    def header(self):
        return ["threshold"] + [f"r2:{k}" for k in self.kinds] + [f"mean:{c}" for c in self.class_names]


def validate_thresholds(thresholds) -> list[float]:
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("threshold grid is empty")
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ValueError("thresholds must lie in [0, 1]")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    return thresholds


def threshold_sweep(
    dataset: Dataset,
    thresholds=DEFAULT_SWEEP,
    kinds=KINDS,
    model_spec: ModelSpec = ModelSpec("gbdt"),
    *,
    level: str = "parent",
    seed: int = 0,
    grid: GridSpec = GridSpec(),
    jobs: int = 1,
    hierarchy: ClassHierarchy | None = None,
) -> SweepResult:
    """Rebuild features and rerun LOOCV at each confidence threshold."""
    thresholds = validate_thresholds(thresholds)
    hierarchy = hierarchy or default_hierarchy()
    arrays = DetectionArrays.from_dataset(dataset, hierarchy)
    overlap = dataset_overlap(dataset, grid)
    r2 = {k: [] for k in kinds}
    means = []
    for thr in thresholds:
        counts = arrays.featurize(FeatureScheme("counts", level, thr), hierarchy)
        means.append(counts.mean(axis=0))
        for kind in kinds:
            scheme = FeatureScheme(kind, level, thr)
            fm = build_matrix(dataset, scheme, hierarchy, arrays=arrays)
            res = loocv(dataset, scheme, model_spec, seed=seed, jobs=jobs, features=fm, overlap=overlap)
            r2[kind].append(res.r2)
    return SweepResult(thresholds, tuple(kinds), r2, np.asarray(means), list(hierarchy.labels(level)))


def class_ratio_drift(mean_counts: np.ndarray) -> float:
    """Largest relative change of any pairwise class-count ratio between
    consecutive thresholds. Classes absent at either threshold are skipped."""
    mean_counts = np.asarray(mean_counts, dtype=float)
    worst = 0.0
    for a, b in zip(mean_counts[:-1], mean_counts[1:]):
        ok = (a > 0) & (b > 0)
        if ok.sum() < 2:
            continue
        ra = a[ok][:, None] / a[ok][None, :]
        rb = b[ok][:, None] / b[ok][None, :]
        worst = max(worst, float(np.max(np.abs(rb / ra - 1.0))))
    return worst


def loocv_ablation(
    features: FeatureMatrix,
    overlap: np.ndarray,
    model_spec: ModelSpec,
    *,
    seed: int = 0,
    jobs: int = 1,
):
    """LOOCV where each fold's model also predicts the held-out cluster with
    one feature zeroed at a time.

    Returns ``(r2_full, r2_ablated)``; ``r2_ablated[j]`` is the LOOCV r^2
    with column ``j`` collapsed to zero at test time only.
    """
    X, y = features.values, features.targets
    L = X.shape[1]
    tasks, _ = _fold_tasks(features.cluster_ids, overlap, seed, zero_cols=range(L))
    out = np.asarray(_run_folds(X, y, model_spec, tasks, jobs))
    full = pearson_r2(out[:, 0], y)
    ablated = np.array([pearson_r2(out[:, 1 + j], y) for j in range(L)])
    return full, ablated


__all__ = [
    "MODEL_KINDS",
    "UndefinedCorrelationError",
    "EvaluationError",
    "pearson_r2",
    "training_exclusion",
    "loocv",
    "loocv_matrix",
    "comparison_grid",
    "threshold_sweep",
    "class_ratio_drift",
    "loocv_ablation",
]
