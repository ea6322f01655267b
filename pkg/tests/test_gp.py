"""GP regression tests.

The central oracle is a dense implementation over raw (unmerged)
evaluation rows: merging replicates into averaged observations with
noise/count on the diagonal must reproduce its posterior exactly.
"""

import numpy as np
import pytest

from qhsri.gp import (
    DesignSet,
    GpFitError,
    KernelSpec,
    cross_covariance,
    fit,
    log_likelihood,
    make_model,
    predict,
    predict_joint,
    variance_reduction,
)


def _noise_fn(x):
    x = np.atleast_2d(x)
    return 0.05 + 0.1 * x[:, 0] ** 2


def _dense_posterior(kernel, x_raw, y_raw, y_shift, x_test):
    """Unmerged GP posterior: one covariance row per evaluation."""
    k = cross_covariance(kernel, x_raw, x_raw)
    k[np.diag_indices_from(k)] += _noise_fn(x_raw)
    kx = cross_covariance(kernel, x_raw, x_test)
    sol = np.linalg.solve(k, y_raw - y_shift)
    mean = y_shift + kx.T @ sol
    var = kernel.process_variance - np.sum(kx * np.linalg.solve(k, kx), axis=0)
    return mean, var


def _random_replicated_data(rng, d):
    n_unique = int(rng.integers(d + 2, 14))
    xu = rng.random((n_unique, d))
    counts = rng.integers(1, 5, size=n_unique)
    x_raw = np.repeat(xu, counts, axis=0)
    y_raw = rng.normal(size=len(x_raw)) + 3.0 * x_raw[:, 0]
    return x_raw, y_raw


class TestDesignSet:
    def test_merging(self):
        x = np.array([[0.1, 0.2], [0.5, 0.5], [0.1, 0.2], [0.1, 0.2]])
        y = np.array([1.0, 2.0, 3.0, 5.0])
        ds = DesignSet.from_observations(x, y)
        assert ds.n_unique == 2
        assert ds.raw_count == 4
        np.testing.assert_array_equal(ds.rep_counts, [3, 1])
        assert abs(ds.obs_means[0] - 3.0) < 1e-12
        assert abs(ds.obs_vars[0] - np.var([1.0, 3.0, 5.0], ddof=1)) < 1e-12
        assert np.isnan(ds.obs_vars[1])

    def test_merge_tolerance(self):
        x = np.array([[0.3, 0.3], [0.3 + 1e-9, 0.3], [0.3 + 1e-4, 0.3]])
        ds = DesignSet.from_observations(x, np.zeros(3))
        assert ds.n_unique == 2

    def test_match_index(self):
        ds = DesignSet.from_observations(np.array([[0.2, 0.8]]), [1.0])
        assert ds.match_index([0.2, 0.8]) == 0
        assert ds.match_index([0.2 + 1e-10, 0.8]) == 0
        assert ds.match_index([0.3, 0.8]) is None

    def test_validation(self):
        with pytest.raises(ValueError):
            DesignSet.from_observations(np.zeros((2, 1)), [0.0])
        with pytest.raises(ValueError):
            DesignSet.from_observations(np.array([[1.5, 0.0]]), [0.0])
        with pytest.raises(ValueError):
            DesignSet.from_observations(np.zeros((1, 1)), [np.nan])


class TestKernelSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            KernelSpec("cubic", np.ones(2), 1.0)
        with pytest.raises(ValueError):
            KernelSpec("matern52", np.array([1.0, 0.0]), 1.0)
        with pytest.raises(ValueError):
            KernelSpec("matern52", np.ones(2), -1.0)
        with pytest.raises(ValueError):
            KernelSpec("matern52", np.ones(2), 1.0, nugget=-0.5)

    def test_noise_at(self):
        k = KernelSpec("matern52", np.ones(2), 1.0, nugget=0.3)
        np.testing.assert_allclose(k.noise_at(np.zeros((4, 2))), 0.3)
        k2 = KernelSpec("matern52", np.ones(2), 1.0, nugget=_noise_fn)
        x = np.random.default_rng(0).random((5, 2))
        np.testing.assert_allclose(k2.noise_at(x), _noise_fn(x))

    def test_correlation_at_zero_distance(self):
        for family in ("matern52", "squared_exponential"):
            k = KernelSpec(family, np.array([0.7]), 2.5)
            v = cross_covariance(k, np.array([[0.4]]), np.array([[0.4]]))
            assert abs(v[0, 0] - 2.5) < 1e-12


class TestDenseOracle:
    def test_replicated_models_match_dense(self):
        """Merged-replicate posterior equals the raw-row posterior, 1e-8."""
        rng = np.random.default_rng(42)
        for trial in range(25):
            d = int(rng.integers(1, 7))
            x_raw, y_raw = _random_replicated_data(rng, d)
            kernel = KernelSpec(
                "matern52" if trial % 2 else "squared_exponential",
                rng.uniform(0.3, 2.0, size=d),
                float(rng.uniform(0.5, 3.0)),
                nugget=_noise_fn,
            )
            design = DesignSet.from_observations(x_raw, y_raw)
            y_shift = float(design.obs_means.mean())
            model = make_model(design, kernel, y_shift)
            x_test = rng.random((8, d))
            mean, var, obs_var = predict(model, x_test)
            ref_mean, ref_var = _dense_posterior(
                kernel, x_raw, y_raw, y_shift, x_test)
            np.testing.assert_allclose(mean, ref_mean, atol=1e-8)
            np.testing.assert_allclose(var, ref_var, atol=1e-8)
            np.testing.assert_allclose(
                obs_var, var + _noise_fn(x_test), atol=1e-10)

    def test_interpolation_when_noiseless(self):
        rng = np.random.default_rng(3)
        x = rng.random((12, 2))
        y = np.sin(4 * x[:, 0]) + x[:, 1]
        kernel = KernelSpec("matern52", np.array([0.4, 0.4]), 1.0)
        model = make_model(DesignSet.from_observations(x, y), kernel,
                           float(y.mean()))
        mean, var, _ = predict(model, x)
        np.testing.assert_allclose(mean, y, atol=1e-6)
        assert var.max() < 1e-6

    def test_variance_clamped(self):
        rng = np.random.default_rng(4)
        x = rng.random((10, 3))
        kernel = KernelSpec("matern52", np.full(3, 0.8), 2.0)
        model = make_model(
            DesignSet.from_observations(x, rng.normal(size=10)), kernel, 0.0)
        _, var, _ = predict(model, rng.random((50, 3)))
        assert np.all(var >= 0) and np.all(var <= 2.0 + 1e-12)


class TestJointPrediction:
    def test_diagonal_matches_marginal(self):
        rng = np.random.default_rng(5)
        x = rng.random((15, 2))
        y = rng.normal(size=15)
        kernel = KernelSpec("matern52", np.array([0.5, 0.9]), 1.5,
                            nugget=0.01)
        model = make_model(DesignSet.from_observations(x, y), kernel, 0.0)
        x_test = rng.random((6, 2))
        mean_j, cov = predict_joint(model, x_test)
        mean_m, var_m, _ = predict(model, x_test)
        np.testing.assert_allclose(mean_j, mean_m, atol=1e-10)
        np.testing.assert_allclose(np.diag(cov), var_m, atol=1e-8)
        np.testing.assert_allclose(cov, cov.T, atol=1e-12)

    def test_distant_points_nearly_independent(self):
        kernel = KernelSpec("squared_exponential", np.array([0.05]), 1.0)
        x = np.array([[0.5]])
        model = make_model(DesignSet.from_observations(x, [0.0]), kernel, 0.0)
        _, cov = predict_joint(model, np.array([[0.0], [1.0]]))
        assert abs(cov[0, 1]) < 1e-10


class TestVarianceReduction:
    def test_refit_differencing_oracle(self):
        """v^2/(v+r) equals the actual variance drop from one new observation."""
        rng = np.random.default_rng(6)
        for _ in range(10):
            d = int(rng.integers(1, 4))
            x = rng.random((10, d))
            y = rng.normal(size=10)
            kernel = KernelSpec("matern52", rng.uniform(0.3, 1.0, size=d),
                                1.0, nugget=_noise_fn)
            model = make_model(DesignSet.from_observations(x, y), kernel, 0.0)
            x_new = rng.random(d)
            vr = variance_reduction(model, x_new)[0]
            grown = DesignSet.from_observations(
                np.vstack([x, x_new]), np.append(y, 0.0))
            model2 = make_model(grown, kernel, 0.0)
            _, v_before, _ = predict(model, x_new[None, :])
            _, v_after, _ = predict(model2, x_new[None, :])
            assert abs(vr - (v_before[0] - v_after[0])) < 1e-8

    def test_noiseless_reduction_is_full_variance(self):
        rng = np.random.default_rng(7)
        x = rng.random((8, 2))
        kernel = KernelSpec("matern52", np.array([0.6, 0.6]), 1.0)
        model = make_model(
            DesignSet.from_observations(x, rng.normal(size=8)), kernel, 0.0)
        x_test = rng.random((5, 2))
        _, var, _ = predict(model, x_test)
        np.testing.assert_allclose(variance_reduction(model, x_test), var,
                                   atol=1e-10)


class TestLogLikelihood:
    def test_matches_dense_formula(self):
        rng = np.random.default_rng(8)
        x = rng.random((9, 2))
        y = rng.normal(size=9)
        kernel = KernelSpec("matern52", np.array([0.8, 0.5]), 1.2, nugget=0.05)
        design = DesignSet.from_observations(x, y)
        model = make_model(design, kernel, 0.5)
        k = model.covariance_matrix()
        resid = y - 0.5
        ref = -0.5 * (
            resid @ np.linalg.solve(k, resid)
            + np.linalg.slogdet(k)[1]
            + 9 * np.log(2 * np.pi)
        )
        assert abs(log_likelihood(model) - ref) < 1e-8


class TestFitting:
    def test_gradient_matches_central_differences(self):
        """Analytic NLL gradients in all three noise modes."""
        from qhsri.gp import _NllProblem

        rng = np.random.default_rng(9)
        x = rng.random((14, 3))
        y = np.sin(3 * x[:, 0]) + rng.normal(scale=0.1, size=14)
        design = DesignSet.from_observations(x, y)
        scale = float(design.obs_means.std())
        for noise in (0.0, "estimate", 0.04):
            problem = _NllProblem(design, "matern52", noise, scale)
            for _ in range(5):
                p = rng.uniform(-1.0, 0.5, size=problem.n_params)
                f0, g = problem.value_and_grad(p)
                h = 1e-6
                for j in range(len(p)):
                    e = np.zeros_like(p)
                    e[j] = h
                    fp = problem.value_and_grad(p + e)[0]
                    fm = problem.value_and_grad(p - e)[0]
                    num = (fp - fm) / (2 * h)
                    assert abs(g[j] - num) < 1e-4 * max(1.0, abs(num))

    def test_fit_interpolates_smooth_function(self):
        rng = np.random.default_rng(10)
        x = rng.random((25, 2))
        y = np.cos(3 * x[:, 0]) * x[:, 1]
        model = fit(DesignSet.from_observations(x, y), n_starts=4, seed=1)
        x_test = rng.random((10, 2))
        mean, _, _ = predict(model, x_test)
        truth = np.cos(3 * x_test[:, 0]) * x_test[:, 1]
        assert np.max(np.abs(mean - truth)) < 0.05

    def test_fit_recovers_noise_level(self):
        """Nugget estimation lands near the generating noise variance."""
        rng = np.random.default_rng(11)
        x = rng.random((40, 1))
        y = np.sin(6 * x[:, 0]) + rng.normal(scale=0.3, size=40)
        model = fit(DesignSet.from_observations(x, y), noise="estimate",
                    n_starts=4, seed=2)
        nug = float(model.kernel.noise_at(x[:1])[0])
        assert 0.3**2 / 4 < nug < 0.3**2 * 4

    def test_known_noise_replication_shrinks_variance(self):
        """Replicates divide the observation noise on the diagonal."""
        rng = np.random.default_rng(12)
        xu = rng.random((10, 1))
        x = np.repeat(xu, 4, axis=0)
        y = np.repeat(np.sin(5 * xu[:, 0]), 4) + rng.normal(scale=0.4, size=40)
        rep = fit(DesignSet.from_observations(x, y), noise=0.16,
                  n_starts=3, seed=3)
        single = fit(DesignSet.from_observations(xu, y[::4]), noise=0.16,
                     n_starts=3, seed=3)
        _, v_rep, _ = predict(rep, xu)
        _, v_single, _ = predict(single, xu)
        assert v_rep.mean() < v_single.mean()

    def test_warm_start_never_worse(self):
        rng = np.random.default_rng(13)
        x = rng.random((20, 2))
        y = x[:, 0] ** 2 + rng.normal(scale=0.05, size=20)
        design = DesignSet.from_observations(x, y)
        cold = fit(design, n_starts=3, seed=4)
        warm = fit(design, n_starts=3, seed=4, init=cold.kernel)
        assert warm.fit_info["final_nll"] <= cold.fit_info["final_nll"] + 1e-9

    def test_too_few_designs(self):
        with pytest.raises(ValueError):
            fit(DesignSet.from_observations(np.random.rand(3, 2), np.zeros(3)))

    def test_constant_outputs(self):
        x = np.random.default_rng(14).random((8, 1))
        model = fit(DesignSet.from_observations(x, np.full(8, 2.0)),
                    n_starts=2, seed=5)
        mean, _, _ = predict(model, np.array([[0.5]]))
        assert abs(mean[0] - 2.0) < 1e-6

    def test_jitter_ladder_rescues_singular_matrix(self):
        from qhsri.gp import _chol_with_jitter

        k = np.ones((3, 3))
        chol, jitter = _chol_with_jitter(k, 2.0)
        assert jitter > 0
        np.testing.assert_allclose(chol @ chol.T, k + jitter * np.eye(3),
                                   atol=1e-12)

    def test_near_duplicate_designs_stay_finite(self):
        """Unmergeable but nearly identical rows still produce a usable model."""
        x = np.array([[0.2], [0.2 + 5e-8], [0.7], [0.9], [0.4]])
        y = np.array([1.0, 1.0, 0.5, 0.2, 0.8])
        kernel = KernelSpec("squared_exponential", np.array([0.5]), 1.0)
        model = make_model(DesignSet.from_observations(x, y), kernel, 0.0)
        mean, var, _ = predict(model, np.array([[0.55]]))
        assert np.isfinite(mean[0]) and var[0] >= 0
