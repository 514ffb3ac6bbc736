import math

import numpy as np
import pytest

import trialcea.cea as cea_mod
from trialcea.cea import (
    CeaDraws,
    PointEstimate,
    bootstrap_cea,
    ceac,
    default_threshold_grid,
    icer,
    percentile_ci,
    render_plots,
    summarize,
)
from trialcea.contrasts import qaly_weights
from trialcea.errors import ConvergenceError, DataError
from trialcea.mmrm import MmrmSpec

from conftest import make_dataset, random_complete_dataset

W3 = qaly_weights((0.0, 0.25, 0.75))
SPEC_U = MmrmSpec(outcome="utility")
SPEC_C = MmrmSpec(outcome="cost")


def make_draws(d_effect, d_cost, point=None):
    d_effect = np.asarray(d_effect, dtype=float)
    d_cost = np.asarray(d_cost, dtype=float)
    n = d_effect.size
    if point is None:
        d_e = float(d_effect.mean()) if n else 0.0
        d_c = float(d_cost.mean()) if n else 0.0
        point = PointEstimate(d_e, d_c, 0.5, 0.52, 3000.0, 3500.0)
    return CeaDraws(
        replicate=np.arange(1, n + 1),
        d_effect=d_effect,
        d_cost=d_cost,
        qaly_control=np.full(n, 0.5),
        qaly_intervention=np.full(n, 0.52),
        cost_control=np.full(n, 3000.0),
        cost_intervention=np.full(n, 3500.0),
        n_requested=n,
        n_failed=0,
        seed=0,
        point=point,
    )


def incomplete_trial(rng, n=40):
    data = random_complete_dataset(rng, n=n)
    u = data.outcome_matrix("utility")
    c = data.outcome_matrix("cost")
    arms = data.arms()
    mask_u = rng.random(u.shape) < 0.2
    mask_c = rng.random(c.shape) < 0.2
    mask_u[:, 0] = False
    mask_c[:, 0] = False
    u[mask_u] = np.nan
    c[mask_c] = np.nan
    return make_dataset(
        [[None if np.isnan(v) else v for v in row] for row in u],
        [[None if np.isnan(v) else v for v in row] for row in c],
        arms,
    )


class TestIcer:
    def test_simple_ne(self):
        res = icer(1.0, 100.0)
        assert res.value == pytest.approx(100.0)
        assert res.quadrant == "NE"
        assert res.interpretable

    def test_reference_increments(self):
        res = icer(0.021, 550.0)
        assert res.value == pytest.approx(26190.476190476191)
        assert res.quadrant == "NE"

    def test_dominant_flagged_not_interpretable(self):
        res = icer(0.1, -5.0)
        assert res.value == pytest.approx(-50.0)
        assert res.quadrant == "SE"
        assert not res.interpretable

    def test_dominated_and_sw(self):
        assert icer(-0.1, 5.0).quadrant == "NW"
        assert icer(-0.1, -5.0).quadrant == "SW"

    def test_zero_effect_undefined(self):
        res = icer(0.0, 100.0)
        assert res.value is None
        assert not res.interpretable


class TestCeac:
    def test_uniformly_dominant(self):
        draws = make_draws([0.1] * 5, [-10.0] * 5)
        curve = ceac(draws, [0.0, 1000.0, 50000.0])
        assert np.all(curve.probabilities == 1.0)

    def test_two_draw_hand_enumeration(self):
        draws = make_draws([1.0, 1.0], [10.0, 30.0])
        curve = ceac(draws, [20.0])
        assert curve.probabilities[0] == pytest.approx(0.5)

    def test_zero_threshold_counts_cost_savers(self, rng):
        d_cost = rng.normal(0, 100, 400)
        draws = make_draws(rng.normal(0.02, 0.01, 400), d_cost)
        curve = ceac(draws, [0.0])
        assert curve.probabilities[0] == pytest.approx((d_cost < 0).mean())

    def test_ties_count_as_not_cost_effective(self):
        draws = make_draws([0.0, 0.0], [0.0, 0.0])
        curve = ceac(draws, [0.0, 10.0])
        assert np.all(curve.probabilities == 0.0)

    def test_large_threshold_matches_probability_of_gain(self, rng):
        d_effect = rng.normal(0.01, 0.02, 500)
        d_cost = rng.normal(200.0, 400.0, 500)
        draws = make_draws(d_effect, d_cost)
        ratios = d_cost[d_effect != 0] / d_effect[d_effect != 0]
        k_big = float(max(0.0, ratios.max())) + 1.0
        curve = ceac(draws, [k_big])
        assert curve.probabilities[0] == pytest.approx((d_effect > 0).mean())

    def test_empty_draws_rejected(self):
        draws = make_draws([], [])
        with pytest.raises(DataError, match="no converged draws"):
            ceac(draws, [0.0])

    def test_probabilities_in_unit_interval(self, rng):
        draws = make_draws(rng.normal(0, 1, 200), rng.normal(0, 1, 200))
        curve = ceac(draws, default_threshold_grid())
        assert np.all((curve.probabilities >= 0) & (curve.probabilities <= 1))


class TestPercentileCi:
    def test_matches_naive_sort_oracle(self, rng):
        from fractions import Fraction

        for n in (7, 50, 101, 400):
            values = rng.normal(0, 1, n)
            lo, hi = percentile_ci(values, 0.95)
            s = np.sort(values)
            # exact rational nearest-rank oracle
            lo_rank = -(-Fraction(1, 40) * n // 1)  # ceil
            hi_rank = -(-Fraction(39, 40) * n // 1)
            lo_oracle = s[max(1, int(lo_rank)) - 1]
            hi_oracle = s[min(n, int(hi_rank)) - 1]
            assert lo == lo_oracle
            assert hi == hi_oracle
            assert lo in values and hi in values

    def test_degenerate_levels_guarded(self):
        with pytest.raises(ValueError):
            percentile_ci([1.0, 2.0], 1.2)


class TestBootstrap:
    def test_identity_resample_reproduces_point_estimate(self, rng, monkeypatch):
        data = incomplete_trial(rng)

        def identity(_rng, arm0, arm1):
            return np.concatenate([arm0, arm1])

        monkeypatch.setattr(cea_mod, "_stratified_indices", identity)
        draws = bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=1, seed=1)
        assert draws.n_draws == 1
        # same data refit from a different start: equal to solver tolerance
        assert draws.d_effect[0] == pytest.approx(
            draws.point.d_effect, rel=1e-4, abs=1e-6
        )
        assert draws.d_cost[0] == pytest.approx(
            draws.point.d_cost, rel=1e-4, abs=1e-2
        )

    def test_bit_identical_across_runs(self, rng):
        data = incomplete_trial(rng)
        d1 = bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=25, seed=7)
        d2 = bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=25, seed=7)
        assert np.array_equal(d1.d_effect, d2.d_effect)
        assert np.array_equal(d1.d_cost, d2.d_cost)
        assert d1.to_delimited() == d2.to_delimited()

    def test_seed_changes_draws(self, rng):
        data = incomplete_trial(rng)
        d1 = bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=10, seed=1)
        d2 = bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=10, seed=2)
        assert not np.array_equal(d1.d_effect, d2.d_effect)

    def test_stratification_preserves_arm_sizes(self, rng):
        arm0 = np.arange(7)
        arm1 = np.arange(7, 18)
        for b in range(20):
            gen = np.random.default_rng([3, b])
            idx = cea_mod._stratified_indices(gen, arm0, arm1)
            assert idx.size == 18
            assert np.isin(idx[:7], arm0).all()
            assert np.isin(idx[7:], arm1).all()

    def test_mean_of_draws_near_point_estimate(self, rng):
        data = incomplete_trial(rng, n=60)
        draws = bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=200, seed=5)
        boot_se = draws.d_effect.std(ddof=1)
        assert abs(draws.d_effect.mean() - draws.point.d_effect) < 3 * boot_se / math.sqrt(200) * math.sqrt(200)
        # tighter: mean within 3 standard errors of the bootstrap mean
        assert abs(draws.d_effect.mean() - draws.point.d_effect) < 3 * boot_se

    def test_replicates_and_failures_account_for_all(self, rng):
        data = incomplete_trial(rng)
        draws = bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=30, seed=3)
        assert draws.n_draws + draws.n_failed == 30

    def test_failure_rate_guard(self, rng, monkeypatch):
        data = incomplete_trial(rng)

        calls = {"n": 0}
        original = cea_mod._fit_core

        def flaky(prep, spec, schedule, start_sigma=None):
            calls["n"] += 1
            if calls["n"] > 2:  # let the point fits through, fail replicates
                raise ConvergenceError("forced failure")
            return original(prep, spec, schedule, start_sigma)

        monkeypatch.setattr(cea_mod, "_fit_core", flaky)
        with pytest.raises(ConvergenceError, match="replicates failed"):
            bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=10, seed=1)

    def test_export_columns(self, rng):
        data = incomplete_trial(rng)
        draws = bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=3, seed=1)
        lines = draws.to_delimited().splitlines()
        assert lines[0] == "replicate,dE,dC,qaly0,qaly1,tc0,tc1"
        assert len(lines) == 1 + draws.n_draws

    def test_bad_inputs(self, rng):
        data = incomplete_trial(rng)
        with pytest.raises(DataError, match="n_boot"):
            bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=0, seed=1)
        with pytest.raises(DataError, match="utility spec"):
            bootstrap_cea(data, SPEC_C, SPEC_C, W3, n_boot=2, seed=1)


class TestCurrencyEquivariance:
    def test_cost_scaling_by_power_of_two_is_exact(self, rng):
        data = incomplete_trial(rng, n=36)
        c = 2.0
        scaled = make_dataset(
            [[v for v in s.utility] for s in data.subjects],
            [[None if v is None else c * v for v in s.cost] for s in data.subjects],
            data.arms(),
            ids=[s.id for s in data.subjects],
        )
        d1 = bootstrap_cea(data, SPEC_U, SPEC_C, W3, n_boot=40, seed=11)
        d2 = bootstrap_cea(scaled, SPEC_U, SPEC_C, W3, n_boot=40, seed=11)
        assert np.array_equal(d2.d_cost, c * d1.d_cost)
        assert np.array_equal(d2.d_effect, d1.d_effect)

        i1 = icer(d1.point.d_effect, d1.point.d_cost)
        i2 = icer(d2.point.d_effect, d2.point.d_cost)
        assert i2.value == c * i1.value

        ks = np.array([0.0, 10_000.0, 25_000.0, 50_000.0])
        ceac1 = ceac(d1, ks / c)
        ceac2 = ceac(d2, ks)
        assert np.array_equal(ceac1.probabilities, ceac2.probabilities)


class TestSummaryAndPlots:
    def test_summary_fields(self, rng):
        draws = make_draws(rng.normal(0.02, 0.01, 300), rng.normal(300, 500, 300))
        summary = summarize(draws, k_highlight=25_000.0)
        assert summary.n_draws == 300
        assert 0.0 <= summary.prob_ce_at_highlight <= 1.0
        assert summary.ci_effect[0] <= summary.ci_effect[1]
        blob = summary.to_json_dict()
        assert blob["k_highlight"] == 25_000.0
        assert len(blob["ceac"]["thresholds"]) == len(blob["ceac"]["probabilities"])

    def test_render_plots_well_formed_svg(self, rng):
        draws = make_draws(rng.normal(0.02, 0.01, 100), rng.normal(300, 500, 100))
        summary = summarize(draws)
        cep, curve = render_plots(draws, summary)
        for doc in (cep, curve):
            assert doc.lstrip().startswith("<?xml")
            assert "</svg>" in doc

    def test_render_plots_degenerate_cloud(self):
        draws = make_draws([0.02] * 5, [300.0] * 5)
        summary = summarize(draws)
        cep, curve = render_plots(draws, summary)
        assert "</svg>" in cep and "</svg>" in curve

    def test_render_plots_deterministic(self, rng):
        draws = make_draws(rng.normal(0.02, 0.01, 50), rng.normal(300, 500, 50))
        summary = summarize(draws)
        a = render_plots(draws, summary)
        b = render_plots(draws, summary)
        assert a == b
