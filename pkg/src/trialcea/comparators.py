"""Reference analyses: complete-case OLS and normal-model multiple imputation.

Both comparators aggregate each subject's trajectory into a QALY and a total
follow-up cost, then regress the aggregate on treatment plus the baseline
value of the same outcome. The complete-case analysis keeps only subjects
with every utility and cost slot observed; multiple imputation fills the
missing outcome slots with chained normal regressions per arm and pools the
per-dataset analyses with Rubin's rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .contrasts import QalyWeights, qaly_by_arm, totalcost_by_arm
from .dataset import SubjectRecord, TrialDataset
from .errors import DataError
from .mmrm import CovarianceStructure, MmrmSpec, Unstructured, fit

MI_BURN_IN_CYCLES = 10
DEFAULT_M = 50


@dataclass(frozen=True)
class EstimateSe:
    estimate: float
    se: float

    def to_json_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se}


@dataclass(frozen=True)
class QuantityResult:
    control: EstimateSe
    intervention: EstimateSe
    incremental: EstimateSe

    def to_json_dict(self) -> dict:
        return {
            "control": self.control.to_json_dict(),
            "intervention": self.intervention.to_json_dict(),
            "incremental": self.incremental.to_json_dict(),
        }


@dataclass(frozen=True)
class CcaResult:
    qaly: QuantityResult
    total_cost: QuantityResult
    n_completers: int
    n_excluded: int


@dataclass(frozen=True)
class MiResult:
    qaly: QuantityResult
    total_cost: QuantityResult
    m_imputations: int


# ---------------------------------------------------------------------------
# Shared OLS machinery
# ---------------------------------------------------------------------------


def _ols(X: np.ndarray, y: np.ndarray):
    """Classical OLS: coefficients and sigma^2 (X'X)^-1 covariance."""
    n, p = X.shape
    if n <= p:
        raise DataError(f"too few rows ({n}) for {p} OLS coefficients")
    xtx = X.T @ X
    try:
        xtx_inv = np.linalg.inv(xtx)
    except np.linalg.LinAlgError:
        raise DataError("collinear design in the aggregate regression") from None
    cond = np.linalg.cond(xtx)
    if not np.isfinite(cond) or cond > 1e12:
        raise DataError("collinear design in the aggregate regression")
    beta = xtx_inv @ (X.T @ y)
    resid = y - X @ beta
    sigma2 = float(resid @ resid) / (n - p)
    return beta, sigma2 * xtx_inv


def _aggregate_regression(
    trt: np.ndarray, baseline: np.ndarray, quantity: np.ndarray
) -> QuantityResult:
    """quantity ~ 1 + treatment + baseline; model-based arm means at the
    pooled baseline mean, incremental = treatment coefficient."""
    X = np.column_stack([np.ones_like(trt), trt, baseline])
    beta, vcov = _ols(X, quantity)
    xbar = float(baseline.mean())
    c0 = np.array([1.0, 0.0, xbar])
    c1 = np.array([1.0, 1.0, xbar])
    ci = np.array([0.0, 1.0, 0.0])

    def res(c):
        return EstimateSe(
            estimate=float(c @ beta),
            se=float(np.sqrt(max(c @ vcov @ c, 0.0))),
        )

    return QuantityResult(control=res(c0), intervention=res(c1), incremental=res(ci))


def _aggregates(u: np.ndarray, c: np.ndarray, w: QalyWeights):
    """Per-subject QALY (area under utilities) and total follow-up cost."""
    eff = np.asarray(w.effective)
    return u @ eff, c[:, 1:].sum(axis=1)


# ---------------------------------------------------------------------------
# Complete-case analysis
# ---------------------------------------------------------------------------


def completer_mask(data: TrialDataset) -> np.ndarray:
    return np.array([s.is_complete() for s in data.subjects], dtype=bool)


def cca(data: TrialDataset, w: QalyWeights) -> CcaResult:
    """Baseline-adjusted OLS of QALYs and total costs on the completers only.

    A completer has every utility and every cost slot observed; one missing
    slot excludes the subject from both quantities.
    """
    if w.n_visits != data.n_visits:
        raise DataError(
            f"weights cover {w.n_visits} visits but the data has {data.n_visits}"
        )
    mask = completer_mask(data)
    arms = data.arms()
    for arm in (0, 1):
        if not np.any(mask & (arms == arm)):
            raise DataError(f"no completers in arm {arm}; complete-case analysis impossible")
    u = data.outcome_matrix("utility")[mask]
    c = data.outcome_matrix("cost")[mask]
    trt = arms[mask].astype(float)
    qaly, total = _aggregates(u, c, w)
    return CcaResult(
        qaly=_aggregate_regression(trt, u[:, 0], qaly),
        total_cost=_aggregate_regression(trt, c[:, 0], total),
        n_completers=int(mask.sum()),
        n_excluded=int((~mask).sum()),
    )


# ---------------------------------------------------------------------------
# Multiple imputation
# ---------------------------------------------------------------------------


def _proper_impute_variable(
    mat: np.ndarray, k: int, obs: np.ndarray, rng: np.random.Generator
) -> None:
    """Draw imputations for column k of the working matrix, in place.

    Fits the normal regression of column k on all other columns over the
    rows where k is observed, draws (sigma^2, beta) from their sampling
    distribution, then draws the missing entries from the conditional
    normal.
    """
    n, v = mat.shape
    others = [j for j in range(v) if j != k]
    rows_obs = np.flatnonzero(obs[:, k])
    rows_mis = np.flatnonzero(~obs[:, k])
    Z = mat[np.ix_(rows_obs, others)]
    y = mat[rows_obs, k]
    p = Z.shape[1] + 1
    df = rows_obs.size - p
    if df < 1:
        raise DataError(
            f"too few observed rows ({rows_obs.size}) to fit the imputation "
            f"model with {p} coefficients"
        )
    # standardize predictors so the conditioning check is scale free; the
    # predictive distribution is unchanged under this reparameterization
    center = Z.mean(axis=0)
    scale = Z.std(axis=0)
    if np.any(scale <= 0.0):
        raise DataError("singular imputation design (constant predictor)")
    X = np.column_stack([np.ones(rows_obs.size), (Z - center) / scale])
    xtx = X.T @ X
    cond = np.linalg.cond(xtx)
    if not np.isfinite(cond) or cond > 1e10:
        raise DataError("singular imputation design")
    xtx_inv = np.linalg.inv(xtx)
    beta_hat = xtx_inv @ (X.T @ y)
    resid = y - X @ beta_hat
    rss = float(resid @ resid)

    sigma2 = rss / rng.chisquare(df)
    L = np.linalg.cholesky(0.5 * (xtx_inv + xtx_inv.T))
    beta = beta_hat + math.sqrt(sigma2) * (L @ rng.standard_normal(p))

    Zm = (mat[np.ix_(rows_mis, others)] - center) / scale
    Xm = np.column_stack([np.ones(rows_mis.size), Zm])
    mat[rows_mis, k] = Xm @ beta + math.sqrt(sigma2) * rng.standard_normal(rows_mis.size)


def _impute_arm(
    mat: np.ndarray, obs: np.ndarray, rng: np.random.Generator, cycles: int
) -> np.ndarray:
    """Chained-equation imputation of one arm's (N, 2J) outcome matrix."""
    incomplete = [int(k) for k in np.flatnonzero(~obs.all(axis=0))]
    for k in incomplete:
        if not obs[:, k].any():
            raise DataError(
                f"outcome column {k} has no observed values in one arm; "
                "cannot build its imputation model"
            )
    # Visit sequence: ascending missingness, ties by column index.
    incomplete.sort(key=lambda k: (int((~obs[:, k]).sum()), k))
    work = mat.copy()
    for k in incomplete:
        work[~obs[:, k], k] = work[obs[:, k], k].mean()
    for _ in range(cycles):
        for k in incomplete:
            _proper_impute_variable(work, k, obs, rng)
    return work


def mi_impute(
    data: TrialDataset,
    m_imputations: int,
    seed: int | tuple[int, ...] = 0,
    cycles: int = MI_BURN_IN_CYCLES,
) -> list[TrialDataset]:
    """M completed datasets from per-arm chained normal regressions.

    Every outcome variable (both outcomes, all visits) predicts every other;
    imputation is done separately by treatment group. Chains are keyed by
    (seed, m), so the result is independent of execution order.
    """
    if m_imputations < 2:
        raise DataError(f"need at least 2 imputations, got {m_imputations}")
    u = data.outcome_matrix("utility")
    c = data.outcome_matrix("cost")
    joint = np.concatenate([u, c], axis=1)
    obs = ~np.isnan(joint)
    arms = data.arms()
    J = data.n_visits
    head = seed if isinstance(seed, tuple) else (seed,)

    out = []
    for m in range(1, m_imputations + 1):
        rng = np.random.default_rng([*head, m])
        completed = joint.copy()
        for arm in (0, 1):
            rows = np.flatnonzero(arms == arm)
            if rows.size == 0:
                continue
            completed[rows] = _impute_arm(joint[rows], obs[rows], rng, cycles)
        subjects = []
        for i, s in enumerate(data.subjects):
            subjects.append(
                SubjectRecord(
                    id=s.id,
                    arm=s.arm,
                    utility=tuple(completed[i, :J]),
                    cost=tuple(completed[i, J:]),
                    covariates=dict(s.covariates),
                )
            )
        out.append(
            TrialDataset(
                subjects=tuple(subjects),
                visit_schedule=data.visit_schedule,
                arm_labels=data.arm_labels,
            )
        )
    return out


@dataclass(frozen=True)
class RubinPooled:
    estimate: float
    se: float
    within: float
    between: float
    total: float


def pool_rubin(estimates: Sequence[float], variances: Sequence[float]) -> RubinPooled:
    """Rubin's rules: T = W + (1 + 1/M) B over M point estimates."""
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    if est.size != var.size or est.size < 2:
        raise DataError("pooling needs >= 2 matched (estimate, variance) pairs")
    m = est.size
    qbar = float(est.mean())
    within = float(var.mean())
    between = float(est.var(ddof=1))
    total = within + (1.0 + 1.0 / m) * between
    return RubinPooled(
        estimate=qbar, se=math.sqrt(total), within=within, between=between, total=total
    )


def mi_analyze(completed: Sequence[TrialDataset], w: QalyWeights) -> MiResult:
    """Run the aggregate regressions on each completed dataset and pool."""
    if len(completed) < 2:
        raise DataError(f"need at least 2 completed datasets, got {len(completed)}")
    shape = (completed[0].n_subjects, completed[0].n_visits)
    per_target: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for data in completed:
        if (data.n_subjects, data.n_visits) != shape:
            raise DataError("completed datasets differ in shape; cannot pool")
        if not all(s.is_complete() for s in data.subjects):
            raise DataError("mi_analyze expects fully completed datasets")
        u = data.outcome_matrix("utility")
        c = data.outcome_matrix("cost")
        trt = data.arms().astype(float)
        qaly, total = _aggregates(u, c, w)
        for name, baseline, quantity in (
            ("qaly", u[:, 0], qaly),
            ("total_cost", c[:, 0], total),
        ):
            res = _aggregate_regression(trt, baseline, quantity)
            for group, es in (
                ("control", res.control),
                ("intervention", res.intervention),
                ("incremental", res.incremental),
            ):
                per_target.setdefault((name, group), []).append(
                    (es.estimate, es.se**2)
                )

    def pooled(name, group):
        pairs = per_target[(name, group)]
        p = pool_rubin([x for x, _ in pairs], [v for _, v in pairs])
        return EstimateSe(estimate=p.estimate, se=p.se)

    def quantity(name):
        return QuantityResult(
            control=pooled(name, "control"),
            intervention=pooled(name, "intervention"),
            incremental=pooled(name, "incremental"),
        )

    return MiResult(
        qaly=quantity("qaly"),
        total_cost=quantity("total_cost"),
        m_imputations=len(completed),
    )


# ---------------------------------------------------------------------------
# Three-way comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodComparison:
    """CCA, MI, and mixed-model estimates of the same quantities side by side."""

    cca: CcaResult
    mi: MiResult
    lmm_qaly: QuantityResult
    lmm_total_cost: QuantityResult
    se_ratios: dict[str, float]

    def to_json_dict(self) -> dict:
        return {
            "n_completers": self.cca.n_completers,
            "m_imputations": self.mi.m_imputations,
            "methods": {
                "CCA": {
                    "qaly": self.cca.qaly.to_json_dict(),
                    "total_cost": self.cca.total_cost.to_json_dict(),
                },
                "MI": {
                    "qaly": self.mi.qaly.to_json_dict(),
                    "total_cost": self.mi.total_cost.to_json_dict(),
                },
                "LMM": {
                    "qaly": self.lmm_qaly.to_json_dict(),
                    "total_cost": self.lmm_total_cost.to_json_dict(),
                },
            },
            "incremental_se_ratios_vs_cca": self.se_ratios,
        }

    def rows(self):
        for method, q, tc in (
            ("CCA", self.cca.qaly, self.cca.total_cost),
            ("MI", self.mi.qaly, self.mi.total_cost),
            ("LMM", self.lmm_qaly, self.lmm_total_cost),
        ):
            for quantity, res in (("QALYs", q), ("Total costs", tc)):
                for group, es in (
                    ("control", res.control),
                    ("intervention", res.intervention),
                    ("incremental", res.incremental),
                ):
                    yield method, quantity, group, es

    def to_delimited(self, delimiter: str = ",") -> str:
        lines = [delimiter.join(["method", "quantity", "group", "estimate", "se"])]
        for method, quantity, group, es in self.rows():
            lines.append(
                delimiter.join(
                    [method, quantity, group, repr(es.estimate), repr(es.se)]
                )
            )
        return "\n".join(lines) + "\n"


def compare_methods(
    data: TrialDataset,
    w: QalyWeights,
    m_imputations: int = DEFAULT_M,
    seed: int | tuple[int, ...] = 0,
    structure: CovarianceStructure | None = None,
) -> MethodComparison:
    """Run all three analyses on the same dataset."""
    structure = structure or Unstructured()
    cca_res = cca(data, w)
    mi_res = mi_analyze(mi_impute(data, m_imputations, seed=seed), w)

    fit_u = fit(data, MmrmSpec(outcome="utility", covariance=structure))
    fit_c = fit(data, MmrmSpec(outcome="cost", covariance=structure))
    qal = qaly_by_arm(fit_u, w)
    tc = totalcost_by_arm(fit_c)

    def as_quantity(arm_contrasts):
        return QuantityResult(
            control=EstimateSe(arm_contrasts.control.estimate, arm_contrasts.control.se),
            intervention=EstimateSe(
                arm_contrasts.intervention.estimate, arm_contrasts.intervention.se
            ),
            incremental=EstimateSe(
                arm_contrasts.incremental.estimate, arm_contrasts.incremental.se
            ),
        )

    lmm_q = as_quantity(qal)
    lmm_tc = as_quantity(tc)
    ratios = {
        "MI/CCA qaly": mi_res.qaly.incremental.se / cca_res.qaly.incremental.se,
        "MI/CCA total_cost": mi_res.total_cost.incremental.se
        / cca_res.total_cost.incremental.se,
        "LMM/CCA qaly": lmm_q.incremental.se / cca_res.qaly.incremental.se,
        "LMM/CCA total_cost": lmm_tc.incremental.se
        / cca_res.total_cost.incremental.se,
    }
    return MethodComparison(
        cca=cca_res, mi=mi_res, lmm_qaly=lmm_q, lmm_total_cost=lmm_tc,
        se_ratios=ratios,
    )
