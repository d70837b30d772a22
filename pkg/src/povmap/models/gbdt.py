"""Least-squares gradient boosting with depth-limited regression trees.

Trees keep per-node training covers so path-dependent TreeSHAP can compute
conditional expectations without a background dataset.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class GbdtParams:
    n_estimators: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 2
    seed: int = 0

    def validate(self):
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


@dataclass
class RegressionTree:
    """Array-backed binary tree. ``x[feature] <= threshold`` goes left.

    Leaves have ``feature == -1``; ``value`` of an internal node is the mean
    target of the rows routed through it.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            r = rows[internal]
            n = node[internal]
            go_left = X[r, f[internal]] <= self.threshold[n]
            node[internal] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def depth(self) -> int:
        def rec(i):
            return 0 if self.feature[i] < 0 else 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [None if np.isnan(t) else float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.array([np.nan if t is None else t for t in d["threshold"]], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=float),
            cover=np.asarray(d["cover"], dtype=float),
        )


@dataclass
class TreeEnsemble:
    base_value: float
    learning_rate: float
    trees: list[RegressionTree]
    n_features: int
    params: GbdtParams = GbdtParams()

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.full(len(X), self.base_value)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def staged_predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(len(X), self.base_value)
        yield out.copy()
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
            yield out.copy()

    def used_features(self) -> set[int]:
        return {int(f) for t in self.trees for f in t.feature if f >= 0}

    def to_dict(self) -> dict:
        return {
            "kind": "gbdt",
            "base_value": self.base_value,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "params": asdict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        return cls(
            base_value=d["base_value"],
            learning_rate=d["learning_rate"],
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            n_features=d["n_features"],
            params=GbdtParams(**d["params"]),
        )


class _TreeBuilder:
    """Greedy variance-reduction splits over presorted feature columns."""

    def __init__(self, X, max_depth, min_samples_leaf):
        self.X = X
        self.order_T = np.argsort(X, axis=0, kind="stable").T  # (L, N)
        self.xs_sorted = np.take_along_axis(X.T, self.order_T, axis=1)
        self.max_depth = max_depth
        self.msl = min_samples_leaf

    def best_split(self, mask, r, r_sorted):
        n = int(mask.sum())
        L = self.X.shape[1]
        if n < 2 * self.msl or L == 0:
            return None
        node_r = r[mask]
        sse = float(np.sum((node_r - node_r.mean()) ** 2))
        if sse == 0.0:
            return None
        in_node = mask[self.order_T]
        xs = self.xs_sorted[in_node].reshape(L, n)
        csum = np.cumsum(r_sorted[in_node].reshape(L, n), axis=1)
        total = csum[:, -1:]
        n_left = np.arange(1, n, dtype=float)
        s_left = csum[:, :-1]
        gain = s_left**2 / n_left
        gain += (total - s_left) ** 2 / (n - n_left)
        gain -= total**2 / n
        invalid = xs[:, :-1] >= xs[:, 1:]
        if self.msl > 1:
            invalid[:, : self.msl - 1] = True
            invalid[:, n - self.msl :] = True
        gain[invalid] = -np.inf
        k = int(np.argmax(gain))  # first max: lowest feature, then lowest threshold
        f, i = divmod(k, n - 1)
        if not gain[f, i] > 1e-12 * sse:
            return None
        lo, hi = xs[f, i], xs[f, i + 1]
        thr = (lo + hi) / 2.0
        if not lo <= thr < hi:
            thr = lo
        return f, float(thr)

    def build(self, r) -> RegressionTree:
        feature, threshold, left, right, value, cover = [], [], [], [], [], []
        r_sorted = r[self.order_T]

        def new_node(mask):
            idx = len(feature)
            feature.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
            value.append(float(r[mask].mean()))
            cover.append(float(mask.sum()))
            return idx

        def grow(mask, depth):
            node = new_node(mask)
            if depth >= self.max_depth:
                return node
            split = self.best_split(mask, r, r_sorted)
            if split is None:
                return node
            f, thr = split
            go_left = mask & (self.X[:, f] <= thr)
            go_right = mask & ~go_left
            feature[node] = f
            threshold[node] = thr
            left[node] = grow(go_left, depth + 1)
            right[node] = grow(go_right, depth + 1)
            return node

        grow(np.ones(len(r), dtype=bool), 0)
        return RegressionTree(
            feature=np.asarray(feature, dtype=np.int64),
            threshold=np.asarray(threshold, dtype=float),
            left=np.asarray(left, dtype=np.int64),
            right=np.asarray(right, dtype=np.int64),
            value=np.asarray(value, dtype=float),
            cover=np.asarray(cover, dtype=float),
        )


def fit_tree(X, r, max_depth=3, min_samples_leaf=1) -> RegressionTree:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return _TreeBuilder(X, max_depth, min_samples_leaf).build(np.asarray(r, dtype=float))


def fit_gbdt(X, y, params: GbdtParams = GbdtParams()) -> TreeEnsemble:
    """Stagewise least-squares boosting starting from the target mean."""
    params.validate()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    base = float(y.mean())
    builder = _TreeBuilder(X, params.max_depth, params.min_samples_leaf)
    F = np.full(len(y), base)
    trees = []
    for _ in range(params.n_estimators):
        tree = builder.build(y - F)
        F += params.learning_rate * tree.value[tree.apply(X)]
        trees.append(tree)
    return TreeEnsemble(base, params.learning_rate, trees, X.shape[1], params)
