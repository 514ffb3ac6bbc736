"""Synthetic trials with known truth and configurable MAR/MCAR missingness.

The generator draws each subject's (utility, cost) trajectories from a joint
multivariate normal whose marginal blocks are the configured per-outcome
covariances and whose utility-cost correlation at each visit equals the
configured scalar. Deletion mechanisms only ever look at values that remain
observed afterwards, so MAR holds by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .comparators import cca, mi_analyze, mi_impute
from .contrasts import qaly_by_arm, qaly_weights, totalcost_by_arm
from .dataset import SubjectRecord, TrialDataset
from .errors import DataError, ModelError
from .mmrm import CovarianceStructure, MmrmSpec, Unstructured, fit


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


def _per_arm(value) -> tuple[float, float]:
    """Accept a scalar (both arms) or an explicit (control, intervention) pair."""
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise DataError(f"per-arm parameter needs 2 entries, got {value!r}")
        return float(value[0]), float(value[1])
    return float(value), float(value)


# ---------------------------------------------------------------------------
# Missingness mechanisms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoMissing:
    """Complete data."""

    kind = "none"

    def to_json_dict(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Mcar:
    """Each slot (any visit, either outcome) deleted independently at `rate`."""

    rate: float
    kind = "mcar"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise DataError(f"MCAR rate must be in [0, 1), got {self.rate}")

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "rate": self.rate}


@dataclass(frozen=True)
class MarBaseline:
    """Follow-up slots deleted with logistic probability in the standardized
    baseline value of the same outcome.

    Each intercept/slope may be a scalar (shared by both arms) or a
    (control, intervention) pair; differential dropout by arm is still MAR
    because arm and baseline are always observed. Baseline itself is never
    deleted.
    """

    utility_intercept: float | tuple[float, float] = -1.0
    utility_slope: float | tuple[float, float] = 0.0
    cost_intercept: float | tuple[float, float] = -1.0
    cost_slope: float | tuple[float, float] = 0.0
    kind = "mar_baseline"

    def to_json_dict(self) -> dict:
        def enc(v):
            return list(v) if isinstance(v, (tuple, list)) else v

        return {
            "kind": self.kind,
            "utility_intercept": enc(self.utility_intercept),
            "utility_slope": enc(self.utility_slope),
            "cost_intercept": enc(self.cost_intercept),
            "cost_slope": enc(self.cost_slope),
        }


@dataclass(frozen=True)
class MarMonotone:
    """Subject-level dropout with a per-visit hazard that is logistic in the
    most recent observed utility (standardized by baseline-visit statistics).

    Once a subject drops at visit j, every later slot of both outcomes is
    missing, so all patterns are monotone. Baseline is never deleted.
    """

    intercept: float | tuple[float, float] = -1.0
    slope: float | tuple[float, float] = 0.0
    kind = "mar_monotone"

    def to_json_dict(self) -> dict:
        def enc(v):
            return list(v) if isinstance(v, (tuple, list)) else v

        return {"kind": self.kind, "intercept": enc(self.intercept),
                "slope": enc(self.slope)}


Mechanism = NoMissing | Mcar | MarBaseline | MarMonotone


def mechanism_from_json_dict(d: dict) -> Mechanism:
    kind = d.get("kind")
    if kind == "none":
        return NoMissing()
    if kind == "mcar":
        return Mcar(rate=d["rate"])
    if kind == "mar_baseline":
        def dec(v):
            return tuple(v) if isinstance(v, list) else v

        return MarBaseline(
            utility_intercept=dec(d.get("utility_intercept", -1.0)),
            utility_slope=dec(d.get("utility_slope", 0.0)),
            cost_intercept=dec(d.get("cost_intercept", -1.0)),
            cost_slope=dec(d.get("cost_slope", 0.0)),
        )
    if kind == "mar_monotone":
        def dec(v):
            return tuple(v) if isinstance(v, list) else v

        return MarMonotone(intercept=dec(d.get("intercept", -1.0)),
                           slope=dec(d.get("slope", 0.0)))
    raise DataError(f"unknown mechanism kind {kind!r}")


# ---------------------------------------------------------------------------
# Generative model
# ---------------------------------------------------------------------------


def _as_matrix(x, n: int, what: str) -> np.ndarray:
    m = np.asarray(x, dtype=float)
    if m.shape != (n, n):
        raise DataError(f"{what} must be {n}x{n}, got shape {m.shape}")
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class SimConfig:
    """Generative model for one synthetic two-arm trial."""

    n_per_arm: tuple[int, int]
    visit_times: tuple[float, ...]
    utility_means: tuple[tuple[float, ...], tuple[float, ...]]  # (control, intervention)
    cost_means: tuple[tuple[float, ...], tuple[float, ...]]
    utility_cov: tuple[tuple[float, ...], ...]
    cost_cov: tuple[tuple[float, ...], ...]
    cross_correlation: float = 0.0
    mechanism: Mechanism = field(default_factory=NoMissing)
    seed: int | tuple[int, ...] = 0
    # When set, cost_means / cost_cov describe the latent log-scale normal
    # and realized costs are its exponential. The linear-model estimand under
    # skewed costs targets the mean only asymptotically, so validation
    # studies default to plain normal costs.
    cost_lognormal: bool = False

    def __post_init__(self):
        n = self.n_per_arm
        if isinstance(n, int):
            n = (n, n)
        n = (int(n[0]), int(n[1]))
        if min(n) < 2:
            raise DataError(f"need at least 2 subjects per arm, got {n}")
        object.__setattr__(self, "n_per_arm", n)
        times = tuple(float(t) for t in self.visit_times)
        object.__setattr__(self, "visit_times", times)
        J = len(times)
        for name in ("utility_means", "cost_means"):
            arms = getattr(self, name)
            if len(arms) != 2 or any(len(a) != J for a in arms):
                raise DataError(f"{name} must hold two length-{J} vectors")
            object.__setattr__(
                self, name, tuple(tuple(float(v) for v in a) for a in arms)
            )
        for name in ("utility_cov", "cost_cov"):
            m = _as_matrix(getattr(self, name), J, name)
            object.__setattr__(self, name, tuple(tuple(row) for row in m))
        if not -1.0 < self.cross_correlation < 1.0:
            raise DataError(
                f"cross_correlation must be in (-1, 1), got {self.cross_correlation}"
            )
        # Fail fast if the implied joint covariance is not SPD.
        _joint_cholesky(self)

    @property
    def n_visits(self) -> int:
        return len(self.visit_times)

    def to_json_dict(self) -> dict:
        return {
            "n_per_arm": list(self.n_per_arm),
            "visit_times": list(self.visit_times),
            "utility_means": [list(a) for a in self.utility_means],
            "cost_means": [list(a) for a in self.cost_means],
            "utility_cov": [list(r) for r in self.utility_cov],
            "cost_cov": [list(r) for r in self.cost_cov],
            "cross_correlation": self.cross_correlation,
            "mechanism": self.mechanism.to_json_dict(),
            "seed": list(self.seed) if isinstance(self.seed, tuple) else self.seed,
            "cost_lognormal": self.cost_lognormal,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SimConfig":
        seed = d.get("seed", 0)
        return cls(
            n_per_arm=tuple(d["n_per_arm"]) if isinstance(d["n_per_arm"], list)
            else d["n_per_arm"],
            visit_times=tuple(d["visit_times"]),
            utility_means=tuple(tuple(a) for a in d["utility_means"]),
            cost_means=tuple(tuple(a) for a in d["cost_means"]),
            utility_cov=tuple(tuple(r) for r in d["utility_cov"]),
            cost_cov=tuple(tuple(r) for r in d["cost_cov"]),
            cross_correlation=d.get("cross_correlation", 0.0),
            mechanism=mechanism_from_json_dict(d.get("mechanism", {"kind": "none"})),
            seed=tuple(seed) if isinstance(seed, list) else seed,
            cost_lognormal=bool(d.get("cost_lognormal", False)),
        )


def _joint_cholesky(config: SimConfig) -> np.ndarray:
    """Cholesky of the 2J x 2J joint (utility, cost) covariance.

    The cross block is diagonal: corr(U_j, C_j) equals the configured scalar
    at every visit, and cross-outcome dependence across visits flows only
    through the within-outcome correlations.
    """
    J = config.n_visits
    su = np.asarray(config.utility_cov)
    sc = np.asarray(config.cost_cov)
    rho = config.cross_correlation
    cross = rho * np.diag(np.sqrt(np.diag(su) * np.diag(sc)))
    joint = np.block([[su, cross], [cross.T, sc]])
    try:
        return np.linalg.cholesky(joint)
    except np.linalg.LinAlgError:
        raise DataError(
            "joint (utility, cost) covariance is not positive definite; "
            "reduce cross_correlation or fix the covariance blocks"
        ) from None


@dataclass(frozen=True)
class TrialTruth:
    """Analytic values of the estimands targeted by the analysis pipeline.

    The incremental QALY weights the follow-up mean differences only (the
    baseline term is null under the baseline-constrained estimand), so
    configure equal baseline means for this to coincide with the full AUC
    difference.
    """

    d_qaly: float
    d_cost: float
    qaly_by_arm: tuple[float, float]
    cost_by_arm: tuple[float, float]

    def to_json_dict(self) -> dict:
        return {
            "d_qaly": self.d_qaly,
            "d_cost": self.d_cost,
            "qaly_by_arm": list(self.qaly_by_arm),
            "cost_by_arm": list(self.cost_by_arm),
        }


def trial_truth(config: SimConfig) -> TrialTruth:
    w = qaly_weights(config.visit_times)
    eff = np.asarray(w.effective)
    mu_u = np.asarray(config.utility_means)
    mu_c = np.asarray(config.cost_means)
    if config.cost_lognormal:
        # analytic lognormal mean per arm and visit
        s2 = np.diag(np.asarray(config.cost_cov))
        mu_c = np.exp(mu_c + 0.5 * s2)
    d_qaly = float(eff[1:] @ (mu_u[1, 1:] - mu_u[0, 1:]))
    d_cost = float(np.sum(mu_c[1, 1:] - mu_c[0, 1:]))
    return TrialTruth(
        d_qaly=d_qaly,
        d_cost=d_cost,
        qaly_by_arm=(float(eff @ mu_u[0]), float(eff @ mu_u[1])),
        cost_by_arm=(float(np.sum(mu_c[0, 1:])), float(np.sum(mu_c[1, 1:]))),
    )


def gen_trial(config: SimConfig) -> tuple[TrialDataset, TrialTruth]:
    """Draw a complete trial; deterministic in the config seed."""
    rng = np.random.default_rng(
        list(config.seed) if isinstance(config.seed, tuple) else config.seed
    )
    L = _joint_cholesky(config)
    J = config.n_visits
    subjects = []
    for arm in (0, 1):
        n = config.n_per_arm[arm]
        mean = np.concatenate(
            [np.asarray(config.utility_means[arm]), np.asarray(config.cost_means[arm])]
        )
        z = rng.standard_normal((n, 2 * J))
        vals = mean + z @ L.T
        costs = np.exp(vals[:, J:]) if config.cost_lognormal else vals[:, J:]
        for i in range(n):
            subjects.append(
                SubjectRecord(
                    id=f"{'c' if arm == 0 else 'i'}{i + 1:05d}",
                    arm=arm,
                    utility=tuple(vals[i, :J]),
                    cost=tuple(costs[i]),
                )
            )
    data = TrialDataset(
        subjects=tuple(subjects), visit_schedule=config.visit_times
    )
    return data, trial_truth(config)


# ---------------------------------------------------------------------------
# Deletion
# ---------------------------------------------------------------------------


def apply_mechanism(
    data: TrialDataset, mechanism: Mechanism, seed: int | tuple[int, ...] = 0
) -> TrialDataset:
    """Delete values per the mechanism; deterministic in the seed."""
    if isinstance(mechanism, NoMissing):
        return data
    rng = np.random.default_rng(list(seed) if isinstance(seed, tuple) else seed)
    n = data.n_subjects
    J = data.n_visits
    u = data.outcome_matrix("utility")
    c = data.outcome_matrix("cost")
    arm = data.arms()

    miss_u = np.zeros((n, J), dtype=bool)
    miss_c = np.zeros((n, J), dtype=bool)

    if isinstance(mechanism, Mcar):
        miss_u = rng.random((n, J)) < mechanism.rate
        miss_c = rng.random((n, J)) < mechanism.rate
    elif isinstance(mechanism, MarBaseline):
        if J < 2:
            raise DataError("MAR mechanisms need at least one follow-up visit")
        for mat, miss, icpt, slope in (
            (u, miss_u, mechanism.utility_intercept, mechanism.utility_slope),
            (c, miss_c, mechanism.cost_intercept, mechanism.cost_slope),
        ):
            base = mat[:, 0]
            sd = float(base.std())
            z = (base - float(base.mean())) / sd if sd > 0 else np.zeros(n)
            a = np.asarray(_per_arm(icpt))[arm]
            b = np.asarray(_per_arm(slope))[arm]
            p = _expit(a + b * z)
            miss[:, 1:] = rng.random((n, J - 1)) < p[:, None]
    elif isinstance(mechanism, MarMonotone):
        if J < 2:
            raise DataError("MAR mechanisms need at least one follow-up visit")
        base = u[:, 0]
        sd = float(base.std())
        mu0 = float(base.mean())
        a = np.asarray(_per_arm(mechanism.intercept))[arm]
        b = np.asarray(_per_arm(mechanism.slope))[arm]
        dropped = np.zeros(n, dtype=bool)
        last = u[:, 0]
        for j in range(1, J):
            z = (last - mu0) / sd if sd > 0 else np.zeros(n)
            hazard = _expit(a + b * z)
            drop_now = (~dropped) & (rng.random(n) < hazard)
            dropped |= drop_now
            miss_u[dropped, j] = True
            miss_c[dropped, j] = True
            last = np.where(dropped, last, u[:, j])
    else:
        raise DataError(f"unknown mechanism {mechanism!r}")

    subjects = []
    for i, s in enumerate(data.subjects):
        subjects.append(
            SubjectRecord(
                id=s.id,
                arm=s.arm,
                utility=tuple(
                    None if miss_u[i, j] or s.utility[j] is None else s.utility[j]
                    for j in range(J)
                ),
                cost=tuple(
                    None if miss_c[i, j] or s.cost[j] is None else s.cost[j]
                    for j in range(J)
                ),
                covariates=dict(s.covariates),
            )
        )
    return TrialDataset(
        subjects=tuple(subjects),
        visit_schedule=data.visit_schedule,
        arm_labels=data.arm_labels,
    )


# ---------------------------------------------------------------------------
# Repeated-simulation study
# ---------------------------------------------------------------------------

METHODS = ("CCA", "LMM", "MI")
QUANTITIES = ("d_qaly", "d_cost")


@dataclass(frozen=True)
class MethodPerformance:
    method: str
    quantity: str
    truth: float
    n_ok: int
    n_failed: int
    mean_bias: float
    bias_mcse: float
    empirical_se: float
    empirical_se_mcse: float
    mean_model_se: float
    coverage: float
    coverage_mcse: float


@dataclass(frozen=True)
class BiasStudy:
    rows: tuple[MethodPerformance, ...]
    n_sims: int
    level: float

    def row(self, method: str, quantity: str) -> MethodPerformance:
        for r in self.rows:
            if (r.method, r.quantity) == (method, quantity):
                return r
        raise KeyError((method, quantity))

    def to_delimited(self, delimiter: str = ",") -> str:
        header = [
            "method", "quantity", "truth", "n_ok", "n_failed",
            "mean_bias", "bias_mcse", "empirical_se", "empirical_se_mcse",
            "mean_model_se", "coverage", "coverage_mcse",
        ]
        lines = [delimiter.join(header)]
        for r in self.rows:
            lines.append(
                delimiter.join(
                    [
                        r.method, r.quantity, repr(r.truth), str(r.n_ok),
                        str(r.n_failed), repr(r.mean_bias), repr(r.bias_mcse),
                        repr(r.empirical_se), repr(r.empirical_se_mcse),
                        repr(r.mean_model_se), repr(r.coverage),
                        repr(r.coverage_mcse),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def _analyze_lmm(data, w, structure) -> dict[str, tuple[float, float]]:
    fit_u = fit(data, MmrmSpec(outcome="utility", covariance=structure))
    fit_c = fit(data, MmrmSpec(outcome="cost", covariance=structure))
    q = qaly_by_arm(fit_u, w).incremental
    c = totalcost_by_arm(fit_c).incremental
    return {"d_qaly": (q.estimate, q.se), "d_cost": (c.estimate, c.se)}


def _analyze_cca(data, w) -> dict[str, tuple[float, float]]:
    res = cca(data, w)
    return {
        "d_qaly": (res.qaly.incremental.estimate, res.qaly.incremental.se),
        "d_cost": (res.total_cost.incremental.estimate, res.total_cost.incremental.se),
    }


def _analyze_mi(data, w, m, seed) -> dict[str, tuple[float, float]]:
    completed = mi_impute(data, m, seed=seed)
    res = mi_analyze(completed, w)
    return {
        "d_qaly": (res.qaly.incremental.estimate, res.qaly.incremental.se),
        "d_cost": (res.total_cost.incremental.estimate, res.total_cost.incremental.se),
    }


def bias_study(
    config: SimConfig,
    n_sims: int,
    methods: Sequence[str] = METHODS,
    mi_m: int = 20,
    level: float = 0.95,
    structure: CovarianceStructure | None = None,
) -> BiasStudy:
    """Repeated generate-delete-analyze with Monte Carlo error on every summary.

    Per-simulation analysis failures are counted, not fatal.
    """
    if n_sims < 2:
        raise DataError(f"n_sims must be >= 2, got {n_sims}")
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise DataError(f"unknown method {m!r}; expected subset of {METHODS}")
    structure = structure or Unstructured()
    truth = trial_truth(config)
    truths = {"d_qaly": truth.d_qaly, "d_cost": truth.d_cost}
    w = qaly_weights(config.visit_times)
    base_seed = config.seed if isinstance(config.seed, int) else tuple(config.seed)

    est: dict[tuple[str, str], list[float]] = {
        (m, q): [] for m in methods for q in QUANTITIES
    }
    ses: dict[tuple[str, str], list[float]] = {
        (m, q): [] for m in methods for q in QUANTITIES
    }
    failed = {m: 0 for m in methods}

    for s in range(1, n_sims + 1):
        def subseed(tag: int):
            head = base_seed if isinstance(base_seed, tuple) else (base_seed,)
            return (*head, s, tag)

        complete, _ = gen_trial(replace(config, seed=subseed(0)))
        observed = apply_mechanism(complete, config.mechanism, seed=subseed(1))
        for m in methods:
            try:
                if m == "LMM":
                    out = _analyze_lmm(observed, w, structure)
                elif m == "CCA":
                    out = _analyze_cca(observed, w)
                else:
                    out = _analyze_mi(observed, w, mi_m, seed=subseed(2))
            except (ModelError, DataError):
                failed[m] += 1
                continue
            for q in QUANTITIES:
                est[(m, q)].append(out[q][0])
                ses[(m, q)].append(out[q][1])

    z = float(norm.ppf(0.5 * (1.0 + level)))
    rows = []
    for m in methods:
        for q in QUANTITIES:
            e = np.asarray(est[(m, q)])
            se = np.asarray(ses[(m, q)])
            n_ok = e.size
            if n_ok < 2:
                raise ModelError(
                    f"method {m} produced {n_ok} usable simulations; cannot summarise"
                )
            emp_se = float(e.std(ddof=1))
            cover = np.abs(e - truths[q]) <= z * se
            cov_rate = float(cover.mean())
            rows.append(
                MethodPerformance(
                    method=m,
                    quantity=q,
                    truth=truths[q],
                    n_ok=n_ok,
                    n_failed=failed[m],
                    mean_bias=float(e.mean() - truths[q]),
                    bias_mcse=emp_se / math.sqrt(n_ok),
                    empirical_se=emp_se,
                    empirical_se_mcse=emp_se / math.sqrt(2.0 * (n_ok - 1)),
                    mean_model_se=float(se.mean()),
                    coverage=cov_rate,
                    coverage_mcse=math.sqrt(max(cov_rate * (1 - cov_rate), 0.0) / n_ok),
                )
            )
    return BiasStudy(rows=tuple(rows), n_sims=n_sims, level=level)
