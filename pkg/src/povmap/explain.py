"""Shapley-value explanations for tree ensembles.

:func:`tree_shap` is the path-dependent TreeSHAP recursion: conditional
expectations are taken with respect to the training covers stored in each
node, so no background dataset is needed. On correlated features this differs
from interventional SHAP.

:func:`brute_force_shap` enumerates all feature subsets and serves as an
independent check; it is exponential in the number of features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .evaluation import pearson_r2
from .models import LinearModel, TreeEnsemble, predict
from .models.gbdt import RegressionTree

BRUTE_FORCE_MAX_FEATURES = 15
INTERACTION_BINS = 64


class ExplainError(ValueError):
    pass


@dataclass
class ShapExplanation:
    base_value: float
    phi: np.ndarray
    sample: int | str | None = None

    @property
    def output(self) -> float:
        return self.base_value + float(self.phi.sum())


def _check_covers(ensemble: TreeEnsemble):
    for t in ensemble.trees:
        if t.cover is None or len(t.cover) != t.n_nodes or np.any(~np.isfinite(t.cover)):
            raise ExplainError("tree is missing node covers; refit the model to record them")
        if np.any(t.cover <= 0):
            raise ExplainError("tree has non-positive node covers; refit the model")


def expected_value(ensemble: TreeEnsemble) -> float:
    """Cover-weighted mean output, equal to the training mean for fitted models."""
    total = ensemble.base_value
    for t in ensemble.trees:
        leaves = t.feature < 0
        total += ensemble.learning_rate * float(t.value[leaves] @ t.cover[leaves]) / t.cover[0]
    return total


# Path-dependent TreeSHAP. A path entry is [feature, zero_fraction, one_fraction, weight].


def _extend(path, zero_fraction, one_fraction, feature):
    depth = len(path)
    path.append([feature, zero_fraction, one_fraction, 1.0 if depth == 0 else 0.0])
    for i in range(depth - 1, -1, -1):
        path[i + 1][3] += one_fraction * path[i][3] * (i + 1) / (depth + 1)
        path[i][3] = zero_fraction * path[i][3] * (depth - i) / (depth + 1)


def _unwind(path, index):
    depth = len(path) - 1
    _, zero_fraction, one_fraction, _ = path[index]
    next_one = path[depth][3]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0:
            tmp = path[i][3]
            path[i][3] = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - path[i][3] * zero_fraction * (depth - i) / (depth + 1)
        else:
            path[i][3] = path[i][3] * (depth + 1) / (zero_fraction * (depth - i))
    for i in range(index, depth):
        path[i][0:3] = path[i + 1][0:3]
    path.pop()


def _unwound_sum(path, index):
    depth = len(path) - 1
    _, zero_fraction, one_fraction, _ = path[index]
    total = 0.0
    if one_fraction != 0:
        next_one = path[depth][3]
        for i in range(depth - 1, -1, -1):
            tmp = next_one / ((i + 1) * one_fraction)
            total += tmp
            next_one = path[i][3] - tmp * zero_fraction * (depth - i)
    else:
        for i in range(depth - 1, -1, -1):
            total += path[i][3] / (zero_fraction * (depth - i))
    return total * (depth + 1)


def _tree_shap_single(tree: RegressionTree, x, phi, scale):
    feature, threshold = tree.feature, tree.threshold
    left, right, value, cover = tree.left, tree.right, tree.value, tree.cover

    def recurse(node, path, zero_fraction, one_fraction, parent_feature):
        path = [p[:] for p in path]
        _extend(path, zero_fraction, one_fraction, parent_feature)
        f = feature[node]
        if f < 0:
            for i in range(1, len(path)):
                w = _unwound_sum(path, i)
                el = path[i]
                phi[el[0]] += scale * w * (el[2] - el[1]) * value[node]
            return
        if x[f] <= threshold[node]:
            hot, cold = left[node], right[node]
        else:
            hot, cold = right[node], left[node]
        incoming_zero = incoming_one = 1.0
        for k in range(1, len(path)):
            if path[k][0] == f:
                incoming_zero, incoming_one = path[k][1], path[k][2]
                _unwind(path, k)
                break
        recurse(hot, path, incoming_zero * cover[hot] / cover[node], incoming_one, f)
        recurse(cold, path, incoming_zero * cover[cold] / cover[node], 0.0, f)

    recurse(0, [], 1.0, 1.0, -1)


def tree_shap(ensemble: TreeEnsemble, x, sample=None) -> ShapExplanation:
    """Exact path-dependent Shapley values for one sample."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != ensemble.n_features:
        raise ValueError(f"expected {ensemble.n_features} features, got {x.shape[0]}")
    _check_covers(ensemble)
    phi = np.zeros(ensemble.n_features)
    for t in ensemble.trees:
        _tree_shap_single(t, x, phi, ensemble.learning_rate)
    return ShapExplanation(expected_value(ensemble), phi, sample)


def shap_values(ensemble: TreeEnsemble, X) -> tuple[float, np.ndarray]:
    """``(base_value, phi)`` with ``phi`` of shape ``(N, L)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != ensemble.n_features:
        raise ValueError(f"expected {ensemble.n_features} features, got {X.shape[1]}")
    _check_covers(ensemble)
    phi = np.zeros(X.shape)
    for i, x in enumerate(X):
        for t in ensemble.trees:
            _tree_shap_single(t, x, phi[i], ensemble.learning_rate)
    return expected_value(ensemble), phi


def _leaf_paths(tree: RegressionTree):
    """Every leaf with its root path as ``(feature, went_left, child_cover/parent_cover)``."""
    out = []
    stack = [(0, [])]
    while stack:
        node, steps = stack.pop()
        f = tree.feature[node]
        if f < 0:
            out.append((tree.value[node], steps))
            continue
        for child, went_left in ((tree.left[node], True), (tree.right[node], False)):
            frac = tree.cover[child] / tree.cover[node]
            stack.append((child, steps + [(int(f), went_left, frac, float(tree.threshold[node]))]))
    return out


def coalition_values(ensemble: TreeEnsemble, x) -> np.ndarray:
    """Model output conditioned on every feature subset.

    Entry ``s`` is the expectation given only the features whose bits are set
    in ``s``: known features follow ``x``; unknown features are averaged over
    both branches weighted by training cover.
    """
    L = ensemble.n_features
    subsets = np.arange(2**L)
    known = (subsets[:, None] >> np.arange(L)) & 1 == 1
    out = np.full(2**L, ensemble.base_value)
    for tree in ensemble.trees:
        for leaf_value, steps in _leaf_paths(tree):
            weight = np.ones(2**L)
            for f, went_left, frac, thr in steps:
                follows = (x[f] <= thr) == went_left
                weight *= np.where(known[:, f], 1.0 if follows else 0.0, frac)
            out += ensemble.learning_rate * leaf_value * weight
    return out


def brute_force_shap(ensemble: TreeEnsemble, x, sample=None) -> ShapExplanation:
    """Shapley values by explicit enumeration of all 2^L coalitions."""
    x = np.asarray(x, dtype=float).ravel()
    L = ensemble.n_features
    if L > BRUTE_FORCE_MAX_FEATURES:
        raise ExplainError(f"brute force limited to {BRUTE_FORCE_MAX_FEATURES} features, got {L}")
    if x.shape[0] != L:
        raise ValueError(f"expected {L} features, got {x.shape[0]}")
    f_s = coalition_values(ensemble, x)
    subsets = np.arange(2**L)
    size = np.array([bin(s).count("1") for s in subsets])
    weight = np.array([math.factorial(k) * math.factorial(L - k - 1) / math.factorial(L)
                       if k < L else 0.0 for k in size])
    phi = np.zeros(L)
    for j in range(L):
        without = subsets[(subsets >> j) & 1 == 0]
        phi[j] = float(np.sum(weight[without] * (f_s[without | (1 << j)] - f_s[without])))
    return ShapExplanation(float(f_s[0]), phi, sample)


@dataclass
class ImportanceTable:
    names: list[str]
    mean_abs: np.ndarray
    sum_abs: np.ndarray

    def order(self) -> np.ndarray:
        return np.lexsort((np.arange(len(self.names)), -self.mean_abs))

    def rows(self):
        for rank, j in enumerate(self.order(), start=1):
            yield rank, self.names[j], float(self.mean_abs[j]), float(self.sum_abs[j])

    def ranking(self) -> list[str]:
        return [self.names[j] for j in self.order()]


@dataclass
class ShapSummary:
    base_value: float
    phi: np.ndarray  # (N, L)
    values: np.ndarray  # feature values, for red/blue coloring
    names: list[str]
    importance: ImportanceTable

    def long_rows(self, sample_ids):
        for i, sid in enumerate(sample_ids):
            for j, name in enumerate(self.names):
                yield sid, name, float(self.values[i, j]), float(self.phi[i, j])


def importance_from_phi(phi, names) -> ImportanceTable:
    a = np.abs(np.asarray(phi, dtype=float))
    return ImportanceTable(list(names), a.mean(axis=0), a.sum(axis=0))


def shap_summary(model, X, names=None) -> ShapSummary:
    """Per-sample attributions plus a global importance ranking.

    Tree ensembles use TreeSHAP. Linear models report exact linear Shapley
    values ``coef * (z - mean z)``; their importance equals the absolute
    standardized coefficient times the mean absolute deviation.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    names = list(names) if names is not None else [f"f{j}" for j in range(X.shape[1])]
    if isinstance(model, TreeEnsemble):
        base, phi = shap_values(model, X)
    elif isinstance(model, LinearModel):
        Z = model.standardize(X)
        phi = (Z - Z.mean(axis=0)) * model.coef
        base = float(model.predict(X).mean())
    else:
        raise TypeError(f"cannot explain {type(model).__name__}")
    return ShapSummary(base, phi, X, names, importance_from_phi(phi, names))


def linear_importance(model: LinearModel, names) -> ImportanceTable:
    """|standardized coefficient| in the same table format as SHAP importance."""
    a = np.abs(model.coef)
    return ImportanceTable(list(names), a, a)


def _quantile_bins(values, n_bins):
    """Equal-frequency bin ids; tied values always share a bin."""
    values = np.asarray(values, dtype=float)
    edges = np.unique(np.quantile(values, np.linspace(0, 1, n_bins + 1)[1:-1]))
    return np.searchsorted(edges, values, side="right")


def binned_variance_explained(target, by, n_bins: int = INTERACTION_BINS) -> float:
    """Fraction of ``target``'s variance explained by equal-frequency bins of ``by``."""
    target = np.asarray(target, dtype=float)
    total = float(np.sum((target - target.mean()) ** 2))
    if total == 0.0:
        return 0.0
    bins = _quantile_bins(by, n_bins)
    counts = np.bincount(bins)
    sums = np.bincount(bins, weights=target)
    nz = counts > 0
    means = sums[nz] / counts[nz]
    between = float(np.sum(counts[nz] * (means - target.mean()) ** 2))
    return between / total


def interaction_strength(phi_main, main_values, candidate, n_bins: int = INTERACTION_BINS) -> float:
    """Mean absolute correlation between ``phi_main`` and ``candidate`` within
    equal-frequency bins of the main feature, weighted by bin size.

    Conditioning on the main feature's bins removes its own effect, so what
    remains is how the candidate modulates it. Bins where either series is
    constant contribute zero.
    """
    phi_main = np.asarray(phi_main, dtype=float)
    candidate = np.asarray(candidate, dtype=float)
    # keep roughly ten samples per bin so the correlations are not pure noise
    n_bins = max(1, min(n_bins, len(phi_main) // 10))
    bins = _quantile_bins(main_values, n_bins)
    total = 0.0
    for b in np.unique(bins):
        m = bins == b
        p, c = phi_main[m] - phi_main[m].mean(), candidate[m] - candidate[m].mean()
        denom = np.sqrt(np.sum(p * p) * np.sum(c * c))
        if denom > 0:
            total += m.sum() * abs(float(np.sum(p * c)) / denom)
    return total / len(phi_main)


@dataclass
class DependenceRow:
    sample: str
    value: float
    phi: float
    interaction_value: float | None


def _feature_index(feature, names):
    if isinstance(feature, (int, np.integer)):
        if not 0 <= feature < len(names):
            raise ExplainError(f"feature index {feature} out of range")
        return int(feature)
    if feature in names:
        return names.index(feature)
    # accept bare class names like "Truck" for "parent:Truck"
    matches = [j for j, n in enumerate(names) if n.split(":")[-1] == feature]
    if len(matches) == 1:
        return matches[0]
    raise ExplainError(f"invalid feature name {feature!r}")


def dependence_data(summary: ShapSummary, feature, interaction="auto", sample_ids=None):
    """Rows of (value, phi, interaction value) for one feature's dependence plot.

    Returns ``(rows, interaction_name)``. With ``interaction="auto"`` the
    candidate with the largest ``interaction_strength`` is chosen; ``None``
    disables coloring.
    """
    names = summary.names
    j = _feature_index(feature, names)
    n = summary.phi.shape[0]
    sample_ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(n)]
    k = None
    if interaction == "auto":
        best = -1.0
        for c in range(len(names)):
            if c == j:
                continue
            s = interaction_strength(summary.phi[:, j], summary.values[:, j], summary.values[:, c])
            if s > best:
                best, k = s, c
    elif interaction is not None:
        k = _feature_index(interaction, names)
    rows = [
        DependenceRow(
            sample_ids[i],
            float(summary.values[i, j]),
            float(summary.phi[i, j]),
            None if k is None else float(summary.values[i, k]),
        )
        for i in range(n)
    ]
    return rows, (names[k] if k is not None else None)


def ablate_feature(model, X_test, y_test, feature: int) -> float:
    """``r2_full - r2_ablated`` when column ``feature`` is zeroed at test time."""
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    full = pearson_r2(predict(model, X_test), y_test)
    Xz = X_test.copy()
    Xz[:, feature] = 0.0
    return full - pearson_r2(predict(model, Xz), y_test)


def ablation_table(model, X_test, y_test, names):
    """Full-model r^2 and the per-feature ablated r^2 and delta."""
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    full = pearson_r2(predict(model, X_test), y_test)
    rows = []
    for j, name in enumerate(names):
        Xz = X_test.copy()
        Xz[:, j] = 0.0
        r2 = pearson_r2(predict(model, Xz), y_test)
        rows.append((name, r2, full - r2))
    return full, rows
