from __future__ import annotations

import numpy as np
import pytest

from reppi.core import DataError, Family, LabeledDataset, LossModel, UnlabeledDataset
from reppi.estimators import (
    ROTATIONS,
    assign_folds,
    compute_power_matrix,
    crossfit_reppi,
    fit_method,
    fit_ppi,
    fit_ppi_plus_plus,
    fit_reppi,
    fit_xy_only,
    make_score_fitter,
)
from reppi.recalibrate import RecalibratorKind, RecalibratorSpec
from reppi.simulation import ScenarioKind, ScenarioSpec, generate, oracle_traces, random_unit_vector, run_study

MEAN = LossModel.mean_estimation()
SQ = LossModel(Family.SQUARED_ERROR)
LOGIT = LossModel(Family.LOGISTIC)


def linear_data(seed, n=300, big_n=1500, d=2):
    spec = ScenarioSpec(ScenarioKind.MODALITY_MISMATCH, n=n, N=big_n, d=d,
                        theta=np.ones(d) / np.sqrt(d), gamma=np.ones(d), seed=seed)
    return generate(spec)


class TestXYOnly:
    def test_sample_mean(self):
        res = fit_xy_only(LabeledDataset.for_mean([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]), MEAN)
        np.testing.assert_allclose(res.theta, [2.0])
        assert res.sigma[0, 0] == pytest.approx(1.0)

    def test_perfect_fit(self):
        x = np.arange(1.0, 6.0)
        res = fit_xy_only(LabeledDataset(x[:, None], x, x), SQ)
        np.testing.assert_allclose(res.theta, [1.0])
        np.testing.assert_allclose(res.sigma, [[0.0]], atol=1e-20)

    def test_ols_golden(self):
        rng = np.random.default_rng(2024)
        x = rng.normal(size=10_000)
        y = 2 * x + 0.1 * rng.normal(size=10_000)
        res = fit_xy_only(LabeledDataset(x[:, None], y, y), SQ)
        assert 1.99 <= res.theta[0] <= 2.01
        # recorded from this seeded draw
        assert res.theta[0] == pytest.approx(2.0008075169653146, rel=1e-12)

    def test_ci_contains_theta(self):
        lab, _, _ = linear_data(1)
        res = fit_xy_only(lab, SQ)
        assert np.all(res.ci_lower <= res.theta) and np.all(res.theta <= res.ci_upper)
        np.testing.assert_allclose(res.theta - res.ci_lower, res.ci_upper - res.theta)

    def test_too_few_rows(self):
        with pytest.raises(DataError):
            fit_xy_only(LabeledDataset(np.ones((2, 2)), [1.0, 2.0], [1.0, 2.0]), SQ)


class TestPPI:
    def test_hand_example(self):
        lab = LabeledDataset.for_mean([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
        res = fit_ppi(lab, UnlabeledDataset.for_mean([2.0, 2.0]), MEAN)
        np.testing.assert_allclose(res.theta, [3.0])

    def test_exact_predictions_cancel_on_labeled(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=50)
        u = rng.normal(size=200)
        res = fit_ppi(LabeledDataset.for_mean(y, y), UnlabeledDataset.for_mean(u), MEAN)
        np.testing.assert_allclose(res.theta, [u.mean()], rtol=1e-12)

    def test_zero_predictions_match_xy_only(self):
        y = np.array([1.0, 5.0, 2.0, 7.0])
        lab = LabeledDataset.for_mean(y, np.zeros(4))
        res = fit_ppi(lab, UnlabeledDataset.for_mean(np.zeros(9)), MEAN)
        np.testing.assert_allclose(res.theta, fit_xy_only(lab, MEAN).theta)

    def test_regression_is_finite(self):
        lab, unlab, _ = linear_data(2)
        res = fit_ppi(lab, unlab, SQ)
        assert np.all(np.isfinite(res.theta)) and np.all(np.isfinite(res.sigma))


class TestPPIPlusPlus:
    def test_constant_predictions(self):
        y = np.array([1.0, 5.0, 2.0, 7.0])
        lab = LabeledDataset.for_mean(y, np.full(4, 3.0))
        res = fit_ppi_plus_plus(lab, UnlabeledDataset.for_mean(np.full(8, 3.0)), MEAN)
        base = fit_xy_only(lab, MEAN)
        assert res.diagnostics["lambda"] == 0.0
        assert res.diagnostics["constant_predictions"] is True
        np.testing.assert_array_equal(res.theta, base.theta)
        np.testing.assert_array_equal(res.sigma, base.sigma)

    def test_perfect_predictions(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=500)
        u = rng.normal(size=2000)
        lab = LabeledDataset.for_mean(y, y)
        res = fit_ppi_plus_plus(lab, UnlabeledDataset.for_mean(u), MEAN)
        plug_in = np.var(y, ddof=1) / (1.25 * np.var(np.r_[y, u], ddof=1))
        assert res.diagnostics["lambda"] == pytest.approx(plug_in, rel=1e-12)
        assert res.sigma[0, 0] <= fit_xy_only(lab, MEAN).sigma[0, 0]

    def test_perfect_predictions_lambda_limit(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=20_000)
        lab = LabeledDataset.for_mean(y, y)
        res = fit_ppi_plus_plus(lab, UnlabeledDataset.for_mean(rng.normal(size=80_000)), MEAN)
        assert res.diagnostics["lambda"] == pytest.approx(1 / 1.25, rel=0.05)

    def test_logistic_runs(self):
        rng = np.random.default_rng(2)
        x = np.column_stack([np.ones(400), rng.normal(size=400)])
        y = (rng.random(400) < 1 / (1 + np.exp(-x @ [0.2, 1.0]))).astype(float)
        yhat = np.clip(y + 0.3 * rng.normal(size=400), 0, 1)
        xu = np.column_stack([np.ones(1600), rng.normal(size=1600)])
        unlab = UnlabeledDataset(xu, rng.random(1600))
        for method in ("ppi", "ppi_plus_plus", "reppi"):
            res = fit_method(method, LabeledDataset(x, y, yhat), unlab, LOGIT)
            assert np.all(np.isfinite(res.theta))
            assert np.linalg.eigvalsh(res.sigma)[0] >= 0

    def test_dominates_ppi_with_anticorrelated_predictions(self):
        rng = np.random.default_rng(3)
        ppi, pp = [], []
        for _ in range(300):
            y = rng.normal(size=100)
            u = -rng.normal(size=400)
            lab = LabeledDataset.for_mean(y, -y)
            unlab = UnlabeledDataset.for_mean(u)
            ppi.append(fit_ppi(lab, unlab, MEAN).theta[0])
            pp.append(fit_ppi_plus_plus(lab, unlab, MEAN).theta[0])
        assert np.var(pp) <= np.var(ppi)


class TestPowerMatrix:
    def test_identity(self):
        g = np.random.default_rng(4).normal(size=(50, 3))
        np.testing.assert_allclose(compute_power_matrix(g, g).m, np.eye(3), atol=1e-10)

    def test_scaling(self):
        g = np.random.default_rng(5).normal(size=(50, 2))
        np.testing.assert_allclose(compute_power_matrix(g, -2.5 * g).m, np.eye(2) / -2.5, atol=1e-10)

    def test_independent(self):
        rng = np.random.default_rng(6)
        m = compute_power_matrix(rng.normal(size=(10_000, 2)), rng.normal(size=(10_000, 2))).m
        assert np.max(np.abs(m)) <= 0.05

    def test_too_few_rows(self):
        with pytest.raises(DataError, match="larger fold"):
            compute_power_matrix(np.ones((2, 2)), np.ones((2, 2)))


class TestFolds:
    def test_sizes(self):
        for n, sizes in ((9, (3, 3, 3)), (10, (4, 3, 3)), (11, (4, 4, 3))):
            assert assign_folds(n, 0).sizes == sizes

    def test_deterministic(self):
        np.testing.assert_array_equal(assign_folds(100, 42).fold_of, assign_folds(100, 42).fold_of)
        assert not np.array_equal(assign_folds(100, 42).fold_of, assign_folds(100, 43).fold_of)

    def test_too_small(self):
        with pytest.raises(DataError):
            assign_folds(2, 0)


class TestRePPI:
    def test_rotations_cover_every_role(self):
        for role in range(3):
            assert sorted(rot[role] for rot in ROTATIONS) == [0, 1, 2]

    def test_deterministic(self):
        lab, unlab, _ = linear_data(7)
        a = fit_reppi(lab, unlab, SQ, seed=5)
        b = fit_reppi(lab, unlab, SQ, seed=5)
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.sigma, b.sigma)

    def test_weighted_average_identity(self):
        lab, unlab, _ = linear_data(8, n=300)
        res = fit_reppi(lab, unlab, SQ, seed=1)
        thetas = np.array([r["theta"] for r in res.diagnostics["rotations"]])
        np.testing.assert_allclose(res.theta, thetas.mean(axis=0), rtol=1e-15, atol=1e-15)

    def test_unequal_fold_weights(self):
        lab, unlab, _ = linear_data(8, n=301)
        res = fit_reppi(lab, unlab, SQ, seed=1)
        rot = res.diagnostics["rotations"]
        w = np.array([r["fold_sizes"][2] for r in rot]) / 301
        np.testing.assert_allclose(res.theta, w @ np.array([r["theta"] for r in rot]), rtol=1e-14)

    def test_scale_equivariance(self):
        lab, unlab, _ = linear_data(9)
        base = make_score_fitter(SQ, RecalibratorSpec())

        def scaled(c):
            def fit(data, theta0):
                score = base(data, theta0)
                return lambda x, yhat: c * score(x, yhat)
            return fit

        folds = assign_folds(lab.n, 3)
        ref = crossfit_reppi(lab, unlab, SQ, base, folds)
        for c in (-3.0, 0.01, 250.0):
            res = crossfit_reppi(lab, unlab, SQ, scaled(c), folds)
            np.testing.assert_allclose(res.theta, ref.theta, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(res.sigma, ref.sigma, rtol=1e-8, atol=1e-12)

    def test_zero_recalibrator_is_xy_only(self):
        lab, unlab, _ = linear_data(10, n=600)
        res = fit_reppi(lab, unlab, SQ, RecalibratorSpec(RecalibratorKind.ZERO), seed=2, target="gradient")
        folds = assign_folds(lab.n, 2)
        per_fold = []
        for _, _, final in ROTATIONS:
            part = lab.subset(folds.indices(final))
            per_fold.append((part.n / lab.n) * fit_xy_only(part, SQ).theta)
        np.testing.assert_allclose(res.theta, np.sum(per_fold, axis=0), rtol=1e-12)
        assert res.diagnostics["power_matrix_singular"] is True
        np.testing.assert_allclose(res.sigma, fit_xy_only(lab, SQ).sigma, rtol=0.2, atol=0.05)

    def test_too_few_rows(self):
        lab, unlab, _ = linear_data(11, n=10, d=2)
        with pytest.raises(DataError):
            fit_reppi(lab, unlab, SQ)

    def test_diagnostics(self):
        lab, unlab, _ = linear_data(12, n=100)
        res = fit_reppi(lab, unlab, SQ, seed=4)
        d = res.diagnostics
        assert d["seed"] == 4 and d["fold_sizes"] == [34, 33, 33]
        assert len(d["rotations"]) == 3
        assert all(np.isfinite(r["power_condition_number"]) for r in d["rotations"])

    def test_modality_mismatch_d5_matches_closed_form(self):
        rng = np.random.default_rng(13)
        spec = ScenarioSpec(ScenarioKind.MODALITY_MISMATCH, d=5, sigma_x2=5, sigma_w2=5,
                            theta=random_unit_vector(5, rng), gamma=random_unit_vector(5, rng))
        report = run_study(spec, ["reppi"], trials=500, base_seed=13)
        row = report.row("reppi")
        assert row.failures == 0
        assert row.mc_trace == pytest.approx(oracle_traces(spec)["reppi"], rel=0.10)

    def test_modality_mismatch_d5_converges(self):
        # the n=1000 example carries second-order fold effects; they shrink with n
        rng = np.random.default_rng(13)
        spec = ScenarioSpec(ScenarioKind.MODALITY_MISMATCH, n=3000, N=27_000, d=5, sigma_x2=5, sigma_w2=5,
                            theta=random_unit_vector(5, rng), gamma=random_unit_vector(5, rng))
        row = run_study(spec, ["reppi"], trials=500, base_seed=13).row("reppi")
        assert row.mc_trace == pytest.approx(oracle_traces(spec)["reppi"], rel=0.10)
