"""Regressor suite: ols, ridge, lasso and gbdt behind one spec/fit interface."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gbdt import GbdtParams, RegressionTree, TreeEnsemble, fit_gbdt, fit_tree
from .linear import (
    ConvergenceError,
    LinearModel,
    fit_lasso,
    fit_ols,
    fit_ridge,
    kkt_violation,
    lasso_null_alpha,
    soft_threshold,
)

MODEL_KINDS = ("gbdt", "ols", "lasso", "ridge")
ALIASES = {"linear": "ols"}
MODEL_TITLES = {"gbdt": "GBDT", "ols": "Linear", "lasso": "Lasso", "ridge": "Ridge"}

DEFAULT_PARAMS = {
    "gbdt": asdict(GbdtParams()),
    "ols": {},
    "ridge": {"alpha": 1.0},
    "lasso": {"alpha": 0.01},
}

DEFAULT_GRIDS = {
    "gbdt": {"n_estimators": [50, 100, 200], "max_depth": [2, 3, 4], "learning_rate": [0.05, 0.1]},
    "ols": {},
    "ridge": {"alpha": [0.01, 0.1, 1.0, 10.0, 100.0]},
    "lasso": {"alpha": [1e-4, 1e-3, 1e-2, 1e-1, 1.0]},
}


def canonical_kind(name: str) -> str:
    kind = ALIASES.get(name, name)
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_KINDS + tuple(ALIASES))}")
    return kind


@dataclass(frozen=True)
class ModelSpec:
    """Which regressor to fit and how.

    With ``tune`` set, hyperparameters are chosen by an inner k-fold search over
    ``grid`` using only the rows passed to :func:`fit_model`.
    """

    kind: str = "gbdt"
    params: dict = field(default_factory=dict)
    tune: bool = False
    grid: dict = field(default_factory=dict)
    inner_folds: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))

    def resolved_params(self) -> dict:
        return {**DEFAULT_PARAMS[self.kind], **self.params}

    def resolved_grid(self) -> dict:
        return self.grid or DEFAULT_GRIDS[self.kind]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.resolved_params(),
            "tune": self.tune,
            "grid": self.resolved_grid() if self.tune else {},
            "inner_folds": self.inner_folds,
        }


def _fit_fixed(kind, params, X, y, seed):
    if kind == "ols":
        return fit_ols(X, y)
    if kind == "ridge":
        return fit_ridge(X, y, float(params["alpha"]))
    if kind == "lasso":
        return fit_lasso(X, y, float(params["alpha"]))
    gp = {k: v for k, v in params.items() if k in GbdtParams.__dataclass_fields__}
    gp["seed"] = seed
    return fit_gbdt(X, y, GbdtParams(**gp))


def _grid_points(grid: dict):
    keys = sorted(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, values))


def select_params(spec: ModelSpec, X, y, seed: int = 0) -> dict:
    """Inner k-fold grid search minimizing held-out mean squared error."""
    base = spec.resolved_params()
    grid = spec.resolved_grid()
    if not grid:
        return base
    n = len(y)
    k = max(2, min(spec.inner_folds, n))
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    best, best_err = base, np.inf
    for point in _grid_points(grid):
        params = {**base, **point}
        err = 0.0
        for fold in folds:
            train = np.setdiff1d(perm, fold)
            model = _fit_fixed(spec.kind, params, X[train], y[train], seed)
            err += float(np.sum((model.predict(X[fold]) - y[fold]) ** 2))
        if err < best_err:
            best, best_err = params, err
    return best


def fit_model(spec: ModelSpec, X, y, seed: int = 0):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    params = select_params(spec, X, y, seed) if spec.tune else spec.resolved_params()
    return _fit_fixed(spec.kind, params, X, y, seed)


def predict(model, X) -> np.ndarray:
    out = model.predict(X)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("model produced non-finite predictions")
    return out


def model_to_dict(model) -> dict:
    return model.to_dict()


def model_from_dict(d: dict):
    if d["kind"] == "gbdt":
        return TreeEnsemble.from_dict(d)
    return LinearModel.from_dict(d)


def save_model(path, model, meta: dict | None = None):
    d = model_to_dict(model)
    if meta:
        d["provenance"] = meta
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def feature_importance(model) -> np.ndarray:
    """Absolute standardized coefficients of a linear model."""
    if isinstance(model, LinearModel):
        return model.importance()
    raise TypeError("use povmap.explain.shap_summary for tree ensembles")


__all__ = [
    "MODEL_KINDS",
    "MODEL_TITLES",
    "ModelSpec",
    "GbdtParams",
    "RegressionTree",
    "TreeEnsemble",
    "LinearModel",
    "ConvergenceError",
    "fit_gbdt",
    "fit_tree",
    "fit_ols",
    "fit_ridge",
    "fit_lasso",
    "fit_model",
    "predict",
    "kkt_violation",
    "lasso_null_alpha",
    "soft_threshold",
    "save_model",
    "load_model",
]
