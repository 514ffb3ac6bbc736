import numpy as np
import pytest

from trialcea.contrasts import (
    auc,
    cea_report,
    incremental_qaly_weights,
    linear_contrast,
    marginal_means,
    qaly_by_arm,
    qaly_weights,
    totalcost_by_arm,
)
from trialcea.errors import DataError
from trialcea.mmrm import MmrmSpec, fit

from conftest import make_fitted, random_complete_dataset


class TestQalyWeights:
    def test_reference_schedule(self):
        w = qaly_weights((0.0, 0.25, 0.75))
        assert w.weights == (0.125, 0.375, 0.25)

    def test_single_interval(self):
        assert qaly_weights((0.0, 1.0)).weights == (0.5, 0.5)

    def test_even_three_visit_schedule(self):
        assert qaly_weights((0.0, 0.5, 1.0)).weights == (0.25, 0.5, 0.25)

    def test_discount_multipliers_elementwise(self):
        w = qaly_weights((0.0, 0.25, 0.75), discount=(1.0, 1.0, 0.5))
        assert w.effective == (0.125, 0.375, 0.125)

    def test_errors(self):
        with pytest.raises(DataError, match="two visit times"):
            qaly_weights((0.0,))
        with pytest.raises(DataError, match="increasing"):
            qaly_weights((0.0, 0.5, 0.5))
        with pytest.raises(DataError, match="first visit"):
            qaly_weights((0.1, 0.5))
        with pytest.raises(DataError, match="multiplier"):
            qaly_weights((0.0, 0.5), discount=(1.0,))

    def test_weights_sum_to_duration(self, rng):
        for _ in range(25):
            J = int(rng.integers(2, 7))
            times = np.concatenate([[0.0], np.cumsum(rng.random(J - 1) + 0.05)])
            w = qaly_weights(tuple(times))
            assert sum(w.weights) == pytest.approx(times[-1], rel=1e-12)
            assert all(x > 0 for x in w.weights)


class TestAuc:
    def test_reference_value(self):
        w = qaly_weights((0.0, 0.25, 0.75))
        assert abs(auc((0.3, 0.6, 0.4), w) - 0.3625) < 1e-12

    def test_perfect_health_equals_duration(self):
        w = qaly_weights((0.0, 0.25, 0.75))
        assert auc((1.0, 1.0, 1.0), w) == pytest.approx(0.75)

    def test_all_zero(self):
        w = qaly_weights((0.0, 0.25, 0.75))
        assert auc((0.0, 0.0, 0.0), w) == 0.0

    def test_length_mismatch(self):
        w = qaly_weights((0.0, 0.25, 0.75))
        with pytest.raises(DataError, match="3 values"):
            auc((0.3, 0.6), w)

    def test_linearity(self, rng):
        w = qaly_weights((0.0, 0.25, 0.75))
        for _ in range(10):
            x, y = rng.random(3), rng.random(3)
            a, b = rng.random(2)
            assert auc(a * x + b * y, w) == pytest.approx(
                a * auc(x, w) + b * auc(y, w)
            )


def _toy_fit():
    # constrained model, J=3, hand-picked coefficient covariance
    labels = ["TIME_1", "TIME_2", "TIME_3", "TIME_2:TRT", "TIME_3:TRT"]
    beta = [0.67, 0.73, 0.72, 0.04, 0.08]
    vcov = 1e-4 * (0.3 * np.ones((5, 5)) + 0.7 * np.eye(5))
    return make_fitted(labels, beta, vcov)


class TestLinearContrast:
    def test_unit_weight_recovers_coefficient(self):
        fitted = _toy_fit()
        res = linear_contrast(fitted, {"TIME_2:TRT": 1.0})
        assert res.estimate == pytest.approx(0.04)
        assert res.se == pytest.approx(0.01)

    def test_sign_flip_symmetry(self):
        fitted = _toy_fit()
        plus = linear_contrast(fitted, {"TIME_2": 1.0, "TIME_3": -1.0})
        minus = linear_contrast(fitted, {"TIME_2": -1.0, "TIME_3": 1.0})
        assert plus.estimate == pytest.approx(-minus.estimate)
        assert plus.se == pytest.approx(minus.se)

    def test_two_coefficient_hand_arithmetic(self):
        labels = ["TIME_1", "TIME_2"]
        vcov = np.array([[0.04, 0.01], [0.01, 0.09]])
        fitted = make_fitted(labels, [1.0, 2.0], vcov, visit_schedule=(0.0, 0.5))
        res = linear_contrast(fitted, {"TIME_1": 2.0, "TIME_2": -1.0}, level=0.95)
        c = np.array([2.0, -1.0])
        assert res.estimate == pytest.approx(0.0)
        assert res.se == pytest.approx(np.sqrt(c @ vcov @ c))

    def test_unknown_label_and_empty_weights(self):
        fitted = _toy_fit()
        with pytest.raises(ValueError, match="unknown coefficient"):
            linear_contrast(fitted, {"TIME_9": 1.0})
        with pytest.raises(ValueError, match="empty"):
            linear_contrast(fitted, {})

    def test_ci_contains_estimate(self):
        res = linear_contrast(_toy_fit(), {"TIME_3:TRT": 1.0}, level=0.8)
        assert res.lower <= res.estimate <= res.upper


class TestMarginalMeans:
    def test_constrained_baseline_shared_across_arms(self):
        mm = {(m.arm, m.visit): m.result for m in marginal_means(_toy_fit())}
        assert mm[(0, 1)].estimate == mm[(1, 1)].estimate == pytest.approx(0.67)

    def test_arm_difference_is_interaction_coefficient(self):
        mm = {(m.arm, m.visit): m.result for m in marginal_means(_toy_fit())}
        assert mm[(1, 2)].estimate - mm[(0, 2)].estimate == pytest.approx(0.04)
        assert mm[(1, 3)].estimate - mm[(0, 3)].estimate == pytest.approx(0.08)

    def test_saturated_fit_recovers_cell_means(self, rng):
        data = random_complete_dataset(rng, n=40)
        fitted = fit(data, MmrmSpec(outcome="utility", constrained_baseline=False))
        u = data.outcome_matrix("utility")
        arms = data.arms()
        mm = {(m.arm, m.visit): m.result for m in marginal_means(fitted)}
        for arm in (0, 1):
            cell = u[arms == arm]
            for visit in (1, 2, 3):
                assert mm[(arm, visit)].estimate == pytest.approx(
                    cell[:, visit - 1].mean(), abs=1e-8
                )

    def test_covariates_evaluated_at_sample_means(self):
        labels = ["TIME_1", "TIME_2", "TIME_2:TRT", "age"]
        fitted = make_fitted(
            labels, [0.6, 0.7, 0.05, 0.01], np.eye(4) * 1e-4,
            visit_schedule=(0.0, 0.5), extra_covariates=("age",),
            covariate_means=(50.0,),
        )
        mm = {(m.arm, m.visit): m.result for m in marginal_means(fitted)}
        assert mm[(0, 2)].estimate == pytest.approx(0.7 + 0.01 * 50.0)
        # arm difference is unaffected by the covariate term
        assert mm[(1, 2)].estimate - mm[(0, 2)].estimate == pytest.approx(0.05)


class TestQalyByArm:
    def test_incremental_weights_for_reference_schedule(self):
        fitted = _toy_fit()
        w = qaly_weights((0.0, 0.25, 0.75))
        weights = incremental_qaly_weights(fitted, w)
        assert weights == {"TIME_2:TRT": 0.375, "TIME_3:TRT": 0.25}

    def test_zero_treatment_coefficients(self):
        labels = ["TIME_1", "TIME_2", "TIME_3", "TIME_2:TRT", "TIME_3:TRT"]
        vcov = 1e-4 * np.eye(5)
        fitted = make_fitted(labels, [0.6, 0.7, 0.7, 0.0, 0.0], vcov)
        w = qaly_weights((0.0, 0.25, 0.75))
        res = qaly_by_arm(fitted, w)
        assert res.incremental.estimate == 0.0
        expected_se = np.sqrt(0.375**2 * 1e-4 + 0.25**2 * 1e-4)
        assert res.incremental.se == pytest.approx(expected_se)

    def test_hand_arithmetic_incremental(self):
        res = qaly_by_arm(_toy_fit(), qaly_weights((0.0, 0.25, 0.75)))
        assert res.incremental.estimate == pytest.approx(
            0.375 * 0.04 + 0.25 * 0.08
        )

    def test_incremental_equals_arm_auc_difference(self, rng):
        data = random_complete_dataset(rng, n=30)
        fitted = fit(data, MmrmSpec(outcome="utility"))
        w = qaly_weights((0.0, 0.25, 0.75))
        res = qaly_by_arm(fitted, w)
        assert res.incremental.estimate == pytest.approx(
            res.intervention.estimate - res.control.estimate, rel=1e-12
        )
        mm = {(m.arm, m.visit): m.result for m in marginal_means(fitted)}
        auc0 = sum(
            w.effective[j - 1] * mm[(0, j)].estimate for j in (1, 2, 3)
        )
        auc1 = sum(
            w.effective[j - 1] * mm[(1, j)].estimate for j in (1, 2, 3)
        )
        assert res.incremental.estimate == pytest.approx(auc1 - auc0, rel=1e-10)

    def test_constrained_incremental_ignores_baseline(self):
        weights = incremental_qaly_weights(_toy_fit(), qaly_weights((0.0, 0.25, 0.75)))
        assert "TIME_1" not in weights
        assert "TIME_1:TRT" not in weights

    def test_wrong_outcome_rejected(self):
        fitted = make_fitted(
            ["TIME_1", "TIME_2"], [1.0, 2.0], np.eye(2),
            visit_schedule=(0.0, 0.5), outcome="cost",
        )
        with pytest.raises(DataError, match="utility"):
            qaly_by_arm(fitted, qaly_weights((0.0, 0.5)))


class TestTotalCostByArm:
    def _cost_fit(self):
        labels = ["TIME_1", "TIME_2", "TIME_3", "TIME_2:TRT", "TIME_3:TRT"]
        beta = [1355.0, 1369.0, 2092.0, -117.0, 668.0]
        vcov = 1e4 * np.eye(5)
        return make_fitted(labels, beta, vcov, outcome="cost")

    def test_control_total_excludes_baseline(self):
        res = totalcost_by_arm(self._cost_fit())
        assert res.control.estimate == pytest.approx(1369.0 + 2092.0)

    def test_incremental_sums_interactions(self):
        res = totalcost_by_arm(self._cost_fit())
        assert res.incremental.estimate == pytest.approx(-117.0 + 668.0)

    def test_zero_interactions_zero_incremental(self):
        labels = ["TIME_1", "TIME_2", "TIME_3", "TIME_2:TRT", "TIME_3:TRT"]
        fitted = make_fitted(
            labels, [1000.0, 1100.0, 1200.0, 0.0, 0.0], np.eye(5), outcome="cost"
        )
        assert totalcost_by_arm(fitted).incremental.estimate == 0.0

    def test_include_baseline_flag(self):
        res = totalcost_by_arm(self._cost_fit(), include_baseline=True)
        assert res.control.estimate == pytest.approx(1355.0 + 1369.0 + 2092.0)


class TestShiftInvariance:
    def test_location_shift_leaves_all_ses(self, rng):
        data = random_complete_dataset(rng, n=30)
        u = data.outcome_matrix("utility")
        u[4, 1] = np.nan
        rows = [[None if np.isnan(v) else v for v in row] for row in u]
        shifted = [[None if v is None else v + 2.0 for v in row] for row in rows]
        from conftest import make_dataset

        costs = data.outcome_matrix("cost")
        arms = data.arms()
        w = qaly_weights((0.0, 0.25, 0.75))
        f1 = fit(make_dataset(rows, costs, arms), MmrmSpec(outcome="utility"))
        f2 = fit(make_dataset(shifted, costs, arms), MmrmSpec(outcome="utility"))
        r1, r2 = qaly_by_arm(f1, w), qaly_by_arm(f2, w)
        assert r2.incremental.se == pytest.approx(r1.incremental.se, rel=1e-6)
        assert r2.control.se == pytest.approx(r1.control.se, rel=1e-6)


class TestCeaReport:
    def test_rows_and_serialization(self, rng):
        data = random_complete_dataset(rng, n=30)
        fit_u = fit(data, MmrmSpec(outcome="utility"))
        fit_c = fit(data, MmrmSpec(outcome="cost"))
        report = cea_report(fit_u, fit_c, qaly_weights((0.0, 0.25, 0.75)))
        names = [r.quantity for r in report.rows]
        assert names == ["U_2", "U_3", "QALYs", "C_2", "C_3", "Total costs"]
        text = report.to_delimited()
        assert text.splitlines()[0].startswith("quantity,control_estimate")
        blob = report.to_json_dict()
        assert len(blob["rows"]) == 6
        for row in report.rows:
            assert row.incremental.estimate == pytest.approx(
                row.intervention.estimate - row.control.estimate, rel=1e-9, abs=1e-12
            )
