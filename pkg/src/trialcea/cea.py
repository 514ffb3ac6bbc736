"""Bootstrap cost-effectiveness analysis: CEP draws, ICER, CEAC, plots.

Subjects are resampled with replacement, stratified by arm so every
replicate keeps the original randomisation ratio. Both outcome models are
refit on the same resampled subjects, which preserves the within-subject
cost-utility correlation in the (dE, dC) cloud. Replicate RNG streams are
keyed by (seed, replicate index), so results do not depend on execution
order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .contrasts import QalyWeights, qaly_by_arm, totalcost_by_arm
from .dataset import TrialDataset
from .errors import ConvergenceError, DataError, ModelError
from .mmrm import (
    FittedMmrm,
    MmrmSpec,
    _fit_core,
    _prepare,
    _prepared_from_arrays,
)

DEFAULT_N_BOOT = 10_000
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class PointEstimate:
    d_effect: float
    d_cost: float
    qaly_control: float
    qaly_intervention: float
    cost_control: float
    cost_intervention: float

    def to_json_dict(self) -> dict:
        return {
            "d_effect": self.d_effect,
            "d_cost": self.d_cost,
            "qaly_control": self.qaly_control,
            "qaly_intervention": self.qaly_intervention,
            "cost_control": self.cost_control,
            "cost_intervention": self.cost_intervention,
        }


@dataclass(frozen=True)
class CeaDraws:
    """Converged bootstrap replicates of the full two-model pipeline."""

    replicate: np.ndarray  # 1-based indices of the converged replicates
    d_effect: np.ndarray
    d_cost: np.ndarray
    qaly_control: np.ndarray
    qaly_intervention: np.ndarray
    cost_control: np.ndarray
    cost_intervention: np.ndarray
    n_requested: int
    n_failed: int
    seed: int
    point: PointEstimate

    @property
    def n_draws(self) -> int:
        return int(self.d_effect.size)

    def to_delimited(self, delimiter: str = ",") -> str:
        lines = [delimiter.join(["replicate", "dE", "dC", "qaly0", "qaly1", "tc0", "tc1"])]
        for i in range(self.n_draws):
            lines.append(
                delimiter.join(
                    [
                        str(int(self.replicate[i])),
                        repr(float(self.d_effect[i])),
                        repr(float(self.d_cost[i])),
                        repr(float(self.qaly_control[i])),
                        repr(float(self.qaly_intervention[i])),
                        repr(float(self.cost_control[i])),
                        repr(float(self.cost_intervention[i])),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def _arm_summaries(fit_u: FittedMmrm, fit_c: FittedMmrm, w: QalyWeights):
    q = qaly_by_arm(fit_u, w)
    c = totalcost_by_arm(fit_c)
    return (
        q.incremental.estimate,
        c.incremental.estimate,
        q.control.estimate,
        q.intervention.estimate,
        c.control.estimate,
        c.intervention.estimate,
    )


def _stratified_indices(rng: np.random.Generator, arm0: np.ndarray, arm1: np.ndarray):
    """Within-arm resample with replacement, preserving both arm sizes."""
    i0 = arm0[rng.integers(0, arm0.size, arm0.size)]
    i1 = arm1[rng.integers(0, arm1.size, arm1.size)]
    return np.concatenate([i0, i1])


def bootstrap_cea(
    data: TrialDataset,
    spec_u: MmrmSpec,
    spec_c: MmrmSpec,
    w: QalyWeights,
    n_boot: int = DEFAULT_N_BOOT,
    seed: int = 0,
    max_failure_rate: float = MAX_FAILURE_RATE,
) -> CeaDraws:
    """Resample subjects, refit both models per replicate, collect (dE, dC).

    Non-converged replicates are dropped and counted; exceeding
    ``max_failure_rate`` raises. Identical (data, specs, n_boot, seed) give
    bit-identical draws.
    """
    if n_boot < 1:
        raise DataError(f"n_boot must be >= 1, got {n_boot}")
    if spec_u.outcome != "utility" or spec_c.outcome != "cost":
        raise DataError("bootstrap_cea needs a utility spec and a cost spec")

    # Full-data point estimate; also supplies warm starts for the replicates.
    prep_u = _prepare(data, spec_u)
    prep_c = _prepare(data, spec_c)
    fit_u = _fit_core(prep_u, spec_u, data.visit_schedule)
    fit_c = _fit_core(prep_c, spec_c, data.visit_schedule)
    point = PointEstimate(*_arm_summaries(fit_u, fit_c, w))

    # One base array pack over all subjects, in id order, shared by both
    # outcomes so each replicate resamples the same subjects jointly.
    subjects = sorted(data.subjects, key=lambda s: s.id)
    n_visits = data.n_visits
    arm = np.array([s.arm for s in subjects], dtype=int)
    y_by_outcome = {}
    cov_by_spec = {}
    for spec in (spec_u, spec_c):
        y_by_outcome[spec.outcome] = np.array(
            [
                [math.nan if v is None else v for v in s.outcome(spec.outcome)]
                for s in subjects
            ],
            dtype=float,
        ).reshape(len(subjects), n_visits)
        cov = np.empty((len(subjects), len(spec.extra_covariates)))
        for k, name in enumerate(spec.extra_covariates):
            for i, s in enumerate(subjects):
                v = s.covariates.get(name)
                if v is None:
                    raise DataError(
                        f"covariate {name!r} missing for subject {s.id!r}; "
                        "run mean_impute_covariates before bootstrapping"
                    )
                cov[i, k] = v
        cov_by_spec[spec.outcome] = cov

    arm0 = np.flatnonzero(arm == 0)
    arm1 = np.flatnonzero(arm == 1)
    if arm0.size == 0 or arm1.size == 0:
        raise DataError("both arms need at least one subject to bootstrap")

    rows = []
    replicate_ids = []
    n_failed = 0
    failures = []
    for b in range(1, n_boot + 1):
        rng = np.random.default_rng([seed, b])
        idx = _stratified_indices(rng, arm0, arm1)
        try:
            fits = {}
            for spec, start in ((spec_u, fit_u.sigma), (spec_c, fit_c.sigma)):
                y = y_by_outcome[spec.outcome][idx]
                cov = cov_by_spec[spec.outcome][idx]
                prep = _prepared_from_arrays(spec, n_visits, y, arm[idx], cov)
                fits[spec.outcome] = _fit_core(
                    prep, spec, data.visit_schedule, start_sigma=start
                )
        except ModelError as exc:
            n_failed += 1
            if len(failures) < 5:
                failures.append(f"replicate {b}: {exc}")
            continue
        rows.append(_arm_summaries(fits["utility"], fits["cost"], w))
        replicate_ids.append(b)

    if n_failed > max_failure_rate * n_boot:
        raise ConvergenceError(
            f"{n_failed} of {n_boot} bootstrap replicates failed "
            f"(limit {max_failure_rate:.0%}); first failures: "
            + "; ".join(failures)
        )

    arr = np.asarray(rows, dtype=float).reshape(len(rows), 6)
    return CeaDraws(
        replicate=np.asarray(replicate_ids, dtype=int),
        d_effect=arr[:, 0].copy(),
        d_cost=arr[:, 1].copy(),
        qaly_control=arr[:, 2].copy(),
        qaly_intervention=arr[:, 3].copy(),
        cost_control=arr[:, 4].copy(),
        cost_intervention=arr[:, 5].copy(),
        n_requested=n_boot,
        n_failed=n_failed,
        seed=seed,
        point=point,
    )


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

QUADRANTS = {
    "NE": "more effective, more costly",
    "SE": "more effective, less costly (dominant)",
    "NW": "less effective, more costly (dominated)",
    "SW": "less effective, less costly",
}


@dataclass(frozen=True)
class Icer:
    """Incremental cost-effectiveness ratio with its plane quadrant.

    The ratio alone is ambiguous off the NE quadrant, so ``interpretable``
    flags when the plain value-per-QALY reading applies.
    """

    value: float | None
    quadrant: str
    d_effect: float
    d_cost: float

    @property
    def interpretable(self) -> bool:
        return self.quadrant == "NE" and self.value is not None

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "quadrant": self.quadrant,
            "quadrant_meaning": QUADRANTS[self.quadrant],
            "interpretable": self.interpretable,
            "d_effect": self.d_effect,
            "d_cost": self.d_cost,
        }


def icer(d_effect: float, d_cost: float) -> Icer:
    """dC / dE with a quadrant label; the value is None when dE is zero."""
    d_effect = float(d_effect)
    d_cost = float(d_cost)
    ew = "NE" if d_effect >= 0 else "NW"
    if d_cost < 0:
        ew = "SE" if d_effect >= 0 else "SW"
    value = d_cost / d_effect if d_effect != 0.0 else None
    return Icer(value=value, quadrant=ew, d_effect=d_effect, d_cost=d_cost)


@dataclass(frozen=True)
class CeacCurve:
    thresholds: np.ndarray
    probabilities: np.ndarray

    def probability_at(self, k: float) -> float:
        hits = np.flatnonzero(np.isclose(self.thresholds, k))
        if hits.size == 0:
            raise KeyError(f"threshold {k} not on the grid")
        return float(self.probabilities[hits[0]])


def ceac(draws: CeaDraws, thresholds) -> CeacCurve:
    """P(k * dE - dC > 0) per threshold; ties count as not cost-effective."""
    if draws.n_draws == 0:
        raise DataError("no converged draws to summarise")
    ks = np.asarray(thresholds, dtype=float).ravel()
    inb = ks[:, None] * draws.d_effect[None, :] - draws.d_cost[None, :]
    probs = (inb > 0.0).mean(axis=1)
    return CeacCurve(thresholds=ks, probabilities=probs)


def percentile_ci(values, level: float = 0.95) -> tuple[float, float]:
    """Nearest-rank percentile interval: endpoints are order statistics."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    vals = np.sort(np.asarray(values, dtype=float).ravel())
    n = vals.size
    if n == 0:
        raise DataError("no values for a percentile interval")
    alpha = 0.5 * (1.0 - level)
    # absorb float noise when q*n sits exactly on an integer rank
    lo_rank = max(1, math.ceil(alpha * n - 1e-9))
    hi_rank = min(n, math.ceil((1.0 - alpha) * n - 1e-9))
    return float(vals[lo_rank - 1]), float(vals[hi_rank - 1])


def default_threshold_grid(lo: float = 0.0, hi: float = 50_000.0, step: float = 500.0):
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


@dataclass(frozen=True)
class CeaSummary:
    icer: Icer
    ceac: CeacCurve
    k_highlight: float
    prob_ce_at_highlight: float
    ci_effect: tuple[float, float]
    ci_cost: tuple[float, float]
    level: float
    n_draws: int
    n_failed: int
    draws_seed: int  # identifies the replicate cloud this summary came from
    point: PointEstimate

    def to_json_dict(self) -> dict:
        return {
            "icer": self.icer.to_json_dict(),
            "k_highlight": self.k_highlight,
            "prob_cost_effective_at_highlight": self.prob_ce_at_highlight,
            "ci_level": self.level,
            "ci_d_effect": list(self.ci_effect),
            "ci_d_cost": list(self.ci_cost),
            "n_draws": self.n_draws,
            "n_failed": self.n_failed,
            "draws_seed": self.draws_seed,
            "point": self.point.to_json_dict(),
            "ceac": {
                "thresholds": [float(k) for k in self.ceac.thresholds],
                "probabilities": [float(p) for p in self.ceac.probabilities],
            },
        }


def summarize(
    draws: CeaDraws,
    thresholds=None,
    k_highlight: float = 25_000.0,
    level: float = 0.95,
) -> CeaSummary:
    """ICER at the point estimate, CEAC over a grid, and percentile CIs."""
    if thresholds is None:
        thresholds = default_threshold_grid()
    ks = np.asarray(thresholds, dtype=float).ravel()
    if not np.any(np.isclose(ks, k_highlight)):
        ks = np.sort(np.append(ks, k_highlight))
    curve = ceac(draws, ks)
    inb_high = k_highlight * draws.d_effect - draws.d_cost
    return CeaSummary(
        icer=icer(draws.point.d_effect, draws.point.d_cost),
        ceac=curve,
        k_highlight=float(k_highlight),
        prob_ce_at_highlight=float((inb_high > 0.0).mean()),
        ci_effect=percentile_ci(draws.d_effect, level),
        ci_cost=percentile_ci(draws.d_cost, level),
        level=level,
        n_draws=draws.n_draws,
        n_failed=draws.n_failed,
        draws_seed=draws.seed,
        point=draws.point,
    )


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def render_plots(
    draws: CeaDraws, summary: CeaSummary, k_highlight: float | None = None
) -> tuple[str, str]:
    """Cost-effectiveness plane and acceptability curve as SVG documents.

    Output is deterministic: the SVG hash salt is pinned and no timestamp is
    embedded.
    """
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    if k_highlight is None:
        k_highlight = summary.k_highlight

    with plt.rc_context({"svg.hashsalt": "trialcea"}):
        fig, ax = plt.subplots(figsize=(6.0, 5.0))
        ax.scatter(draws.d_effect, draws.d_cost, s=6, alpha=0.3,
                   color="#6baed6", linewidths=0, label="bootstrap replicates")
        ax.axhline(0.0, color="0.4", linewidth=0.8)
        ax.axvline(0.0, color="0.4", linewidth=0.8)
        xs = np.array(ax.get_xlim())
        ax.plot(xs, k_highlight * xs, color="0.2", linewidth=1.0,
                linestyle="--", label=f"threshold k={k_highlight:g}")
        ax.set_xlim(xs)
        ax.scatter([draws.point.d_effect], [draws.point.d_cost], s=45,
                   color="#08306b", zorder=5, label="point estimate")
        ax.set_xlabel("incremental effectiveness (QALYs)")
        ax.set_ylabel("incremental cost")
        ax.set_title("Cost-effectiveness plane")
        ax.legend(loc="best", fontsize=8)
        cep_svg = _figure_to_svg(fig)
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(6.0, 4.5))
        ax.plot(summary.ceac.thresholds, summary.ceac.probabilities,
                color="#08306b", linewidth=1.5)
        ax.axvline(k_highlight, color="0.4", linewidth=0.8, linestyle="--")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("willingness-to-pay threshold k")
        ax.set_ylabel("probability cost-effective")
        ax.set_title("Cost-effectiveness acceptability curve")
        ceac_svg = _figure_to_svg(fig)
        plt.close(fig)

    return cep_svg, ceac_svg


def _figure_to_svg(fig) -> str:
    import io

    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()
