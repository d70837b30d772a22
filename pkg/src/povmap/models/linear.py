"""Linear regressors on standardized features.

Features are standardized to zero mean and unit (population) variance at fit
time. Constant columns are marked inactive and get a zero coefficient. The
intercept is never penalized.

Objectives, on standardized ``Z`` and centered ``y``:

* ols    ``||y - Zw||^2``
* ridge  ``||y - Zw||^2 + alpha ||w||^2``
* lasso  ``||y - Zw||^2 / (2N) + alpha ||w||_1``
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LASSO_TOL = 1e-8
LASSO_MAX_SWEEPS = 10_000


class ConvergenceError(RuntimeError):
    """Coordinate descent hit its sweep limit."""

    def __init__(self, message, sweeps, max_change):
        super().__init__(f"{message} (sweeps={sweeps}, last max coefficient change={max_change:.3e})")
        self.sweeps = sweeps
        self.max_change = max_change


@dataclass
class LinearModel:
    kind: str
    alpha: float
    intercept: float
    coef: np.ndarray  # standardized-space coefficients
    mean: np.ndarray
    scale: np.ndarray
    active: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.coef)

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return self.intercept + self.standardize(X) @ self.coef

    def raw_coefficients(self) -> tuple[float, np.ndarray]:
        """Intercept and coefficients expressed on the unstandardized features."""
        w = self.coef / self.scale
        return float(self.intercept - self.mean @ w), w

    def importance(self) -> np.ndarray:
        return np.abs(self.coef)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "intercept": self.intercept,
            "coefficients": self.coef.tolist(),
            "standardization": {"mean": self.mean.tolist(), "scale": self.scale.tolist()},
            "active": self.active.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(
            kind=d["kind"],
            alpha=d["alpha"],
            intercept=d["intercept"],
            coef=np.asarray(d["coefficients"], dtype=float),
            mean=np.asarray(d["standardization"]["mean"], dtype=float),
            scale=np.asarray(d["standardization"]["scale"], dtype=float),
            active=np.asarray(d["active"], dtype=bool),
            meta=dict(d.get("meta", {})),
        )


def standardize(X):
    """Column means, scales and the active (non-constant) mask."""
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    active = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(active, std, 1.0)
    return mean, scale, active


def _prepare(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    mean, scale, active = standardize(X)
    Z = ((X - mean) / scale)[:, active]
    ybar = float(y.mean())
    return Z, y - ybar, ybar, mean, scale, active


def _expand(w_active, active):
    w = np.zeros(len(active))
    w[active] = w_active
    return w


def _lstsq(Z, yc):
    if Z.shape[1] == 0:
        return np.zeros(0), False
    w, _, rank, _ = np.linalg.lstsq(Z, yc, rcond=None)
    return w, rank < Z.shape[1]


def fit_ols(X, y) -> LinearModel:
    """Least squares; rank-deficient systems get the minimum-norm solution."""
    Z, yc, ybar, mean, scale, active = _prepare(X, y)
    w, deficient = _lstsq(Z, yc)
    return LinearModel("ols", 0.0, ybar, _expand(w, active), mean, scale, active,
                       {"rank_deficient": bool(deficient)})


def fit_ridge(X, y, alpha: float = 1.0) -> LinearModel:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    Z, yc, ybar, mean, scale, active = _prepare(X, y)
    meta = {"rank_deficient": False}
    if alpha == 0:
        w, deficient = _lstsq(Z, yc)
        meta["rank_deficient"] = bool(deficient)
    else:
        p = Z.shape[1]
        w = np.linalg.solve(Z.T @ Z + alpha * np.eye(p), Z.T @ yc) if p else np.zeros(0)
    return LinearModel("ridge", float(alpha), ybar, _expand(w, active), mean, scale, active, meta)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_null_alpha(X, y) -> float:
    """Smallest alpha at which the lasso solution is identically zero."""
    Z, yc, *_ = _prepare(X, y)
    if Z.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(Z.T @ yc)) / len(yc))


def fit_lasso(X, y, alpha: float = 0.01, tol: float = LASSO_TOL,
              max_sweeps: int = LASSO_MAX_SWEEPS) -> LinearModel:
    """Cyclic coordinate descent with soft-thresholding.

    Works on the Gram matrix and keeps the correlation vector ``Z^T r / N``
    up to date, so each coordinate step is one axpy.
    """
    if alpha <= 0:
        raise ValueError("lasso requires alpha > 0")
    Z, yc, ybar, mean, scale, active = _prepare(X, y)
    n, p = Z.shape
    w = np.zeros(p)
    G = Z.T @ Z / n
    grad = Z.T @ yc / n  # Z^T (y - Zw) / N
    diag = np.diag(G).copy()
    sweeps = 0
    max_change = 0.0
    while p:
        sweeps += 1
        max_change = 0.0
        for j in range(p):
            old = w[j]
            rho = grad[j] + diag[j] * old
            new = float(soft_threshold(rho, alpha)) / diag[j]
            delta = new - old
            if delta != 0.0:
                w[j] = new
                grad -= G[:, j] * delta
                max_change = max(max_change, abs(delta))
        if max_change < tol:
            break
        if sweeps >= max_sweeps:
            raise ConvergenceError("lasso coordinate descent did not converge", sweeps, max_change)
    return LinearModel("lasso", float(alpha), ybar, _expand(w, active), mean, scale, active,
                       {"sweeps": sweeps})


def kkt_violation(model: LinearModel, X, y) -> float:
    """Largest violation of the lasso optimality conditions (0 when optimal)."""
    Z, yc, *_ = _prepare(X, y)
    w = model.coef[model.active]
    corr = Z.T @ (yc - Z @ w) / len(yc)
    zero = w == 0
    v_zero = np.max(np.abs(corr[zero]) - model.alpha, initial=0.0)
    v_nz = np.max(np.abs(corr[~zero] - model.alpha * np.sign(w[~zero])), initial=0.0)
    return float(max(v_zero, v_nz, 0.0))
