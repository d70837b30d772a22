import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from povmap.models import (
    ConvergenceError,
    GbdtParams,
    ModelSpec,
    TreeEnsemble,
    fit_gbdt,
    fit_lasso,
    fit_model,
    fit_ols,
    fit_ridge,
    fit_tree,
    kkt_violation,
    lasso_null_alpha,
    load_model,
    predict,
    save_model,
    soft_threshold,
)
from povmap.models import select_params


def independent_kkt(model, X, y):
    """Worst lasso optimality-condition violation, computed from scratch.

    Uses the objective ``||y - Zw||^2 / (2N) + alpha ||w||_1`` on features
    standardized with population std.
    """
    X = np.asarray(X, dtype=float)
    n = len(y)
    mu, sd = X.mean(axis=0), X.std(axis=0)
    keep = sd > 0
    Z = (X[:, keep] - mu[keep]) / sd[keep]
    w = model.coef[keep]
    r = (y - y.mean()) - Z @ w
    g = Z.T @ r / n
    worst = 0.0
    for gj, wj in zip(g, w):
        if wj == 0.0:
            worst = max(worst, abs(gj) - model.alpha)
        else:
            worst = max(worst, abs(gj - model.alpha * np.sign(wj)))
    return worst


def random_problem(seed, n=60, p=8, noise=0.5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p)) * rng.uniform(0.1, 10, size=p)
    w = rng.normal(size=p) * (rng.random(p) < 0.6)
    y = X @ w + noise * rng.normal(size=n) + 3.0
    return X, y


class TestOls:
    def test_exact_line(self):
        x = np.linspace(-2, 5, 20)[:, None]
        m = fit_ols(x, 2 * x[:, 0] + 1)
        b, w = m.raw_coefficients()
        assert abs(w[0] - 2) < 1e-9 and abs(b - 1) < 1e-9

    def test_constant_target(self):
        X = np.random.default_rng(0).normal(size=(10, 3))
        m = fit_ols(X, np.full(10, 4.0))
        assert np.all(np.abs(m.coef) < 1e-12) and m.intercept == 4.0

    def test_recovers_generating_weights(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(50, 10))
        w = rng.normal(size=10)
        _, got = fit_ols(X, X @ w + 0.25).raw_coefficients()
        np.testing.assert_allclose(got, w, atol=1e-6)

    def test_residual_gradient_zero(self):
        X, y = random_problem(1)
        m = fit_ols(X, y)
        r = m.predict(X) - y
        assert np.max(np.abs(m.standardize(X).T @ r / len(y))) <= 1e-8

    def test_constant_column_inactive(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([rng.normal(size=30), np.full(30, 5.0)])
        m = fit_ols(X, X[:, 0] * 2)
        assert m.coef[1] == 0 and not m.active[1]

    def test_rank_deficient_flagged(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=30)
        m = fit_ols(np.column_stack([a, 2 * a]), a)
        assert m.meta["rank_deficient"]
        # minimum-norm solution splits weight equally between identical standardized columns
        assert m.coef[0] == pytest.approx(m.coef[1])

    def test_negative_predictions_allowed(self):
        x = np.arange(10.0)[:, None]
        m = fit_ols(x, x[:, 0] + 1)
        assert predict(m, [[-50.0]])[0] < 0

    def test_dimension_mismatch(self):
        m = fit_ols(np.eye(3), [1.0, 2.0, 3.0])
        with pytest.raises(ValueError, match="features"):
            m.predict(np.ones((2, 4)))


class TestRidge:
    @pytest.mark.parametrize("seed", range(5))
    def test_alpha_zero_is_ols(self, seed):
        X, y = random_problem(seed)
        np.testing.assert_allclose(fit_ridge(X, y, 0.0).coef, fit_ols(X, y).coef, atol=1e-8)

    def test_huge_alpha(self):
        X, y = random_problem(4)
        m = fit_ridge(X, y, 1e9)
        assert np.linalg.norm(m.coef) < 1e-6
        assert m.intercept == pytest.approx(y.mean())

    def test_normal_equations(self):
        X, y = random_problem(5)
        m = fit_ridge(X, y, 3.0)
        Z = m.standardize(X)
        lhs = (Z.T @ Z + 3.0 * np.eye(X.shape[1])) @ m.coef
        np.testing.assert_allclose(lhs, Z.T @ (y - y.mean()), atol=1e-8)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_norm_monotone(self, seed):
        X, y = random_problem(seed, n=40, p=6)
        norms = [np.linalg.norm(fit_ridge(X, y, a).coef) for a in (0.0, 0.01, 0.1, 1, 10, 100, 1000)]
        assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            fit_ridge(np.eye(3), [1, 2, 3], -1)


class TestLasso:
    def test_soft_threshold(self):
        np.testing.assert_array_equal(soft_threshold(np.array([-3.0, -0.5, 0.0, 0.5, 3.0]), 1.0),
                                      [-2.0, 0.0, 0.0, 0.0, 2.0])

    def test_univariate_closed_form(self):
        x = np.arange(1.0, 6.0)[:, None]
        m = fit_lasso(x, 3 * x[:, 0], alpha=0.5)
        _, w = m.raw_coefficients()
        # z'y/N = 3*sqrt(2); shrink by alpha; back to raw units divides by std = sqrt(2)
        assert abs(w[0] - 2.6464466094067263) < 1e-8

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.01, 3), st.integers(0, 1000))
    def test_univariate_matches_soft_threshold(self, slope, alpha, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(25, 1))
        y = slope * x[:, 0] + rng.normal(size=25) * 0.1
        z = (x[:, 0] - x[:, 0].mean()) / x[:, 0].std()
        expected = np.sign(z @ y / 25) * max(abs(z @ y / 25) - alpha, 0.0)
        assert abs(fit_lasso(x, y, alpha).coef[0] - expected) < 1e-8

    @pytest.mark.parametrize("seed", range(100))
    def test_kkt_random_problems(self, seed):
        X, y = random_problem(seed)
        alpha = lasso_null_alpha(X, y) * np.random.default_rng(seed).uniform(0.01, 0.9)
        m = fit_lasso(X, y, alpha)
        assert independent_kkt(m, X, y) <= 1e-6
        assert kkt_violation(m, X, y) <= 1e-6

    def test_null_threshold_gives_exact_zero(self):
        for seed in range(10):
            X, y = random_problem(seed)
            a0 = lasso_null_alpha(X, y)
            assert np.all(fit_lasso(X, y, a0 * 1.0001).coef == 0.0)
            assert np.all(fit_lasso(X, y, a0 * 10).coef == 0.0)
            assert np.any(fit_lasso(X, y, a0 * 0.9).coef != 0.0)

    def test_support_shrinks_along_grid(self):
        for seed in range(10):
            X, y = random_problem(seed)
            a0 = lasso_null_alpha(X, y)
            nnz = [np.count_nonzero(fit_lasso(X, y, a0 * f).coef) for f in (0.01, 0.05, 0.2, 0.5, 0.9, 1.01)]
            assert all(b <= a for a, b in zip(nnz, nnz[1:]))
            assert nnz[-1] == 0

    def test_nonconvergence_reports_diagnostics(self):
        X, y = random_problem(0)
        with pytest.raises(ConvergenceError) as info:
            fit_lasso(X, y, 1e-4, tol=0.0, max_sweeps=3)
        assert info.value.sweeps == 3 and info.value.max_change > 0

    def test_alpha_must_be_positive(self):
        with pytest.raises(ValueError):
            fit_lasso(np.eye(3), [1, 2, 3], 0.0)


def step_data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 3))
    return X, (X[:, 0] > 0.5).astype(float)


class TestTrees:
    def test_step_function(self):
        X, y = step_data()
        ens = fit_gbdt(X, y, GbdtParams(n_estimators=50, max_depth=2, learning_rate=0.3))
        assert np.mean((ens.predict(X) - y) ** 2) < 1e-3

    def test_training_mse_non_increasing(self):
        X, y = step_data(seed=1)
        y = y + np.sin(6 * X[:, 1])
        ens = fit_gbdt(X, y, GbdtParams(n_estimators=40, max_depth=2))
        mse = [np.mean((p - y) ** 2) for p in ens.staged_predict(X)]
        assert all(b <= a + 1e-12 for a, b in zip(mse, mse[1:]))

    def test_empty_ensemble(self):
        X, y = step_data()
        ens = fit_gbdt(X, y, GbdtParams(n_estimators=0))
        np.testing.assert_array_equal(ens.predict(X), np.full(len(y), y.mean()))

    def test_single_leaf_arithmetic(self):
        X = np.arange(6.0)[:, None]
        y = np.array([1.0, 1, 1, 1, 1, 1])
        tree = fit_tree(X, y - 0.5, max_depth=0)
        ens = TreeEnsemble(0.5, 1.0, [tree], 1)
        assert tree.n_nodes == 1 and ens.predict([[3.0]])[0] == 1.0

    def test_covers(self):
        X, y = step_data(seed=2)
        ens = fit_gbdt(X, y + X[:, 1], GbdtParams(n_estimators=10, max_depth=3))
        for t in ens.trees:
            assert t.cover[0] == len(y)
            for i in range(t.n_nodes):
                if t.feature[i] >= 0:
                    assert t.cover[t.left[i]] + t.cover[t.right[i]] == t.cover[i]
                else:
                    assert t.left[i] == -1 and t.right[i] == -1

    def test_leaf_cover_matches_routing(self):
        X, y = step_data(seed=3)
        tree = fit_tree(X, y + X[:, 2], max_depth=3)
        leaves, counts = np.unique(tree.apply(X), return_counts=True)
        np.testing.assert_array_equal(tree.cover[leaves], counts)

    def test_tie_break_lowest_feature(self):
        rng = np.random.default_rng(4)
        a = rng.random(50)
        X = np.column_stack([rng.random(50), a, a])
        tree = fit_tree(X, (a > 0.5).astype(float), max_depth=1)
        assert tree.feature[0] == 1

    def test_tie_break_lowest_threshold(self):
        # both splits x<=1.5 and x<=3.5 isolate a symmetric outlier pair equally well
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        y = np.array([1.0, 0.0, 0.0, 1.0])
        tree = fit_tree(X, y, max_depth=1)
        assert tree.threshold[0] == 1.5

    def test_midpoint_thresholds(self):
        X = np.array([[0.0], [0.0], [1.0], [3.0]])
        tree = fit_tree(X, np.array([0.0, 0.0, 5.0, 5.0]), max_depth=1)
        assert tree.threshold[0] == 0.5

    def test_min_samples_leaf(self):
        X, y = step_data(seed=5)
        ens = fit_gbdt(X, y, GbdtParams(n_estimators=5, max_depth=4, min_samples_leaf=30))
        for t in ens.trees:
            assert t.cover[t.feature < 0].min() >= 30

    def test_determinism_and_serialization(self, tmp_path):
        X, y = step_data(seed=6)
        p = GbdtParams(n_estimators=15, seed=9)
        a, b = fit_gbdt(X, y, p), fit_gbdt(X, y, p)
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
        save_model(tmp_path / "m.json", a, {"config_hash": "x"})
        back = load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(back.predict(X), a.predict(X))

    @pytest.mark.parametrize(
        "params", [dict(n_estimators=-1), dict(max_depth=-1), dict(learning_rate=0.0), dict(min_samples_leaf=0)]
    )
    def test_invalid_params(self, params):
        with pytest.raises(ValueError):
            fit_gbdt(*step_data(), GbdtParams(**params))

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            fit_gbdt(np.ones((1, 2)), np.ones(1))

    def test_dimension_mismatch(self):
        ens = fit_gbdt(*step_data(), GbdtParams(n_estimators=2))
        with pytest.raises(ValueError):
            ens.predict(np.ones((2, 5)))


class TestModelSpec:
    def test_alias(self):
        assert ModelSpec("linear").kind == "ols"

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown model"):
            ModelSpec("svm")

    def test_linear_round_trip(self, tmp_path):
        X, y = random_problem(8)
        for kind in ("ols", "ridge", "lasso"):
            m = fit_model(ModelSpec(kind), X, y)
            save_model(tmp_path / "m.json", m)
            np.testing.assert_array_equal(load_model(tmp_path / "m.json").predict(X), m.predict(X))

    def test_tuning_picks_from_grid(self):
        X, y = random_problem(9, n=80)
        spec = ModelSpec("ridge", tune=True, grid={"alpha": [0.01, 1e6]})
        assert select_params(spec, X, y, seed=1)["alpha"] == 0.01

    def test_tuning_deterministic(self):
        X, y = random_problem(10, n=40)
        spec = ModelSpec("gbdt", {"n_estimators": 10}, tune=True, grid={"max_depth": [1, 2]})
        a, b = fit_model(spec, X, y, seed=3), fit_model(spec, X, y, seed=3)
        np.testing.assert_array_equal(a.predict(X), b.predict(X))

    def test_predict_rejects_non_finite(self):
        m = fit_ols(np.arange(4.0)[:, None], np.arange(4.0))
        with pytest.raises(FloatingPointError):
            predict(m, [[np.inf]])
