"""Linear combinations of fitted coefficients: marginal means, QALYs, costs.

All quantities here are weighted sums of fixed effects, so standard errors
come straight from the fitted coefficient covariance (delta method for a
linear map) and intervals use normal quantiles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .errors import DataError
from .mmrm import FittedMmrm


@dataclass(frozen=True)
class ContrastResult:
    estimate: float
    se: float
    lower: float
    upper: float
    level: float

    def to_json_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "se": self.se,
            "lower": self.lower,
            "upper": self.upper,
            "level": self.level,
        }


@dataclass(frozen=True)
class QalyWeights:
    """Rectangular-area weights turning per-visit utilities into QALYs.

    Undiscounted weights sum to the study duration in years; discount
    multipliers are applied elementwise on top.
    """

    visit_times: tuple[float, ...]
    weights: tuple[float, ...]
    discount: tuple[float, ...]

    @property
    def effective(self) -> tuple[float, ...]:
        return tuple(w * d for w, d in zip(self.weights, self.discount))

    @property
    def n_visits(self) -> int:
        return len(self.weights)


def qaly_weights(
    visit_times: Sequence[float], discount: Sequence[float] | None = None
) -> QalyWeights:
    """Per-visit area weights for the trapezoid area under a utility path.

    With half-gaps h_j between consecutive visits, the first visit gets h_1,
    interior visits h_{j-1} + h_j, and the last visit h_{J-1}.
    """
    times = tuple(float(t) for t in visit_times)
    if len(times) < 2:
        raise DataError("need at least two visit times to form QALY weights")
    if times[0] != 0.0:
        raise DataError(f"first visit time must be 0, got {times[0]}")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise DataError(f"visit times must be strictly increasing, got {times}")
    half = [(b - a) / 2.0 for a, b in zip(times, times[1:])]
    weights = [half[0]]
    for j in range(1, len(times) - 1):
        weights.append(half[j - 1] + half[j])
    weights.append(half[-1])
    if discount is None:
        discount = (1.0,) * len(times)
    else:
        discount = tuple(float(d) for d in discount)
        if len(discount) != len(times):
            raise DataError(
                f"discount needs one multiplier per visit ({len(times)}), "
                f"got {len(discount)}"
            )
    return QalyWeights(visit_times=times, weights=tuple(weights), discount=discount)


def auc(values: Sequence[float], weights: QalyWeights) -> float:
    """Weighted sum of per-visit values (area under the linear interpolant)."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size != weights.n_visits:
        raise DataError(
            f"expected {weights.n_visits} values, got {values.size}"
        )
    return float(values @ np.asarray(weights.effective))


# ---------------------------------------------------------------------------
# Contrasts on a fitted model
# ---------------------------------------------------------------------------


def _weight_vector(fitted: FittedMmrm, weights: Mapping[str, float]) -> np.ndarray:
    if not weights:
        raise ValueError("empty contrast weights")
    c = np.zeros(len(fitted.labels))
    for label, w in weights.items():
        if label not in fitted.labels:
            raise ValueError(
                f"unknown coefficient {label!r}; model has {list(fitted.labels)}"
            )
        c[fitted.labels.index(label)] = float(w)
    return c


def _contrast_from_vector(
    fitted: FittedMmrm, c: np.ndarray, level: float
) -> ContrastResult:
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    est = float(c @ fitted.beta)
    var = float(c @ fitted.vcov_beta @ c)
    se = float(np.sqrt(max(var, 0.0)))
    z = float(norm.ppf(0.5 * (1.0 + level)))
    return ContrastResult(est, se, est - z * se, est + z * se, level)


def linear_contrast(
    fitted: FittedMmrm, weights: Mapping[str, float], level: float = 0.95
) -> ContrastResult:
    """Estimate, SE, and normal-quantile CI for a weighted coefficient sum."""
    return _contrast_from_vector(fitted, _weight_vector(fitted, weights), level)


def _arm_visit_vector(fitted: FittedMmrm, arm: int, visit: int) -> np.ndarray:
    """Coefficient weights for the marginal mean of one arm at one visit.

    Covariate terms are evaluated at their sample means.
    """
    c = np.zeros(len(fitted.labels))
    c[fitted.labels.index(f"TIME_{visit}")] = 1.0
    if arm == 1:
        label = f"TIME_{visit}:TRT"
        if label in fitted.labels:
            c[fitted.labels.index(label)] = 1.0
    for k, name in enumerate(fitted.spec.extra_covariates):
        c[fitted.labels.index(name)] = fitted.covariate_means[k]
    return c


@dataclass(frozen=True)
class MarginalMean:
    arm: int
    visit: int
    result: ContrastResult


def marginal_means(fitted: FittedMmrm, level: float = 0.95) -> tuple[MarginalMean, ...]:
    """Model-based mean per arm and visit (shared baseline when constrained)."""
    out = []
    for arm in (0, 1):
        for visit in range(1, fitted.n_visits + 1):
            c = _arm_visit_vector(fitted, arm, visit)
            out.append(MarginalMean(arm, visit, _contrast_from_vector(fitted, c, level)))
    return tuple(out)


@dataclass(frozen=True)
class ArmContrasts:
    control: ContrastResult
    intervention: ContrastResult
    incremental: ContrastResult

    def to_json_dict(self) -> dict:
        return {
            "control": self.control.to_json_dict(),
            "intervention": self.intervention.to_json_dict(),
            "incremental": self.incremental.to_json_dict(),
        }


def incremental_qaly_weights(fitted: FittedMmrm, w: QalyWeights) -> dict[str, float]:
    """Sparse coefficient weights for the between-arm QALY difference.

    Under the constrained model the baseline term cancels, leaving the area
    weights on the treatment-by-visit coefficients only.
    """
    eff = w.effective
    return {
        f"TIME_{j}:TRT": eff[j - 1]
        for j in fitted.spec.interaction_visits(fitted.n_visits)
    }


def qaly_by_arm(
    fitted_utility: FittedMmrm, w: QalyWeights, level: float = 0.95
) -> ArmContrasts:
    """Per-arm QALYs (area under the marginal mean path) and their difference."""
    if fitted_utility.spec.outcome != "utility":
        raise DataError("qaly_by_arm expects a fit of the utility outcome")
    if w.n_visits != fitted_utility.n_visits:
        raise DataError(
            f"weights cover {w.n_visits} visits but the model has "
            f"{fitted_utility.n_visits}"
        )
    eff = np.asarray(w.effective)
    c_arm = {}
    for arm in (0, 1):
        c = np.zeros(len(fitted_utility.labels))
        for visit in range(1, fitted_utility.n_visits + 1):
            c += eff[visit - 1] * _arm_visit_vector(fitted_utility, arm, visit)
        c_arm[arm] = c
    return ArmContrasts(
        control=_contrast_from_vector(fitted_utility, c_arm[0], level),
        intervention=_contrast_from_vector(fitted_utility, c_arm[1], level),
        incremental=_contrast_from_vector(fitted_utility, c_arm[1] - c_arm[0], level),
    )


def totalcost_by_arm(
    fitted_cost: FittedMmrm,
    level: float = 0.95,
    include_baseline: bool = False,
) -> ArmContrasts:
    """Per-arm total cost over follow-up visits and the between-arm difference.

    Baseline cost is pre-randomisation and excluded by default; it serves
    only as adjustment through the constrained baseline.
    """
    if fitted_cost.spec.outcome != "cost":
        raise DataError("totalcost_by_arm expects a fit of the cost outcome")
    first = 1 if include_baseline else 2
    visits = range(first, fitted_cost.n_visits + 1)
    c_arm = {}
    for arm in (0, 1):
        c = np.zeros(len(fitted_cost.labels))
        for visit in visits:
            c += _arm_visit_vector(fitted_cost, arm, visit)
        c_arm[arm] = c
    return ArmContrasts(
        control=_contrast_from_vector(fitted_cost, c_arm[0], level),
        intervention=_contrast_from_vector(fitted_cost, c_arm[1], level),
        incremental=_contrast_from_vector(fitted_cost, c_arm[1] - c_arm[0], level),
    )


# ---------------------------------------------------------------------------
# Combined report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    quantity: str
    control: ContrastResult
    intervention: ContrastResult
    incremental: ContrastResult


@dataclass(frozen=True)
class CeaReport:
    """Follow-up marginal means, QALYs, and total costs by arm."""

    rows: tuple[ReportRow, ...]
    level: float

    def to_json_dict(self) -> dict:
        return {
            "level": self.level,
            "rows": [
                {
                    "quantity": r.quantity,
                    "control": r.control.to_json_dict(),
                    "intervention": r.intervention.to_json_dict(),
                    "incremental": r.incremental.to_json_dict(),
                }
                for r in self.rows
            ],
        }

    def to_delimited(self, delimiter: str = ",") -> str:
        header = ["quantity"]
        for side in ("control", "intervention", "incremental"):
            header += [f"{side}_estimate", f"{side}_lower", f"{side}_upper"]
        lines = [delimiter.join(header)]
        for r in self.rows:
            fields = [r.quantity]
            for res in (r.control, r.intervention, r.incremental):
                fields += [repr(res.estimate), repr(res.lower), repr(res.upper)]
            lines.append(delimiter.join(fields))
        return "\n".join(lines) + "\n"


def cea_report(
    fitted_utility: FittedMmrm,
    fitted_cost: FittedMmrm,
    w: QalyWeights,
    level: float = 0.95,
) -> CeaReport:
    """Assemble the per-visit and aggregate estimates for both outcomes."""
    rows = []
    mm_u = {(m.arm, m.visit): m.result for m in marginal_means(fitted_utility, level)}
    mm_c = {(m.arm, m.visit): m.result for m in marginal_means(fitted_cost, level)}
    for name, fitted, mm in (("U", fitted_utility, mm_u), ("C", fitted_cost, mm_c)):
        for visit in range(2, fitted.n_visits + 1):
            inc_vec = _arm_visit_vector(fitted, 1, visit) - _arm_visit_vector(
                fitted, 0, visit
            )
            rows.append(
                ReportRow(
                    f"{name}_{visit}",
                    mm[(0, visit)],
                    mm[(1, visit)],
                    _contrast_from_vector(fitted, inc_vec, level),
                )
            )
        if name == "U":
            qalys = qaly_by_arm(fitted_utility, w, level)
            rows.append(
                ReportRow("QALYs", qalys.control, qalys.intervention,
                          qalys.incremental)
            )
    costs = totalcost_by_arm(fitted_cost, level)
    rows.append(ReportRow("Total costs", costs.control, costs.intervention,
                          costs.incremental))
    return CeaReport(rows=tuple(rows), level=level)
