"""Maximum-likelihood repeated-measures model with selectable covariance.

The mean structure uses cell-means coding: one indicator per visit (no
global intercept), visit-by-treatment indicators at every visit where a
treatment term is allowed, and optional baseline covariates as main effects.
Each subject contributes the multivariate-normal log density of their
observed outcome sub-vector, with the marginal covariance restricted to the
observed visits, which gives valid maximum-likelihood inference under MAR.

Estimation profiles the fixed effects out in closed form (generalized least
squares given the covariance parameters) and maximizes the profiled
log-likelihood over the covariance parameters with a BFGS quasi-Newton
iteration using analytic gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg.lapack import dpotrf, dpotrs
from scipy.stats import norm

from .dataset import TrialDataset
from .errors import ConvergenceError, DataError, RankDeficiencyError

LOG_2PI = math.log(2.0 * math.pi)

# Variance parameters live on the log scale; cap to keep exp() finite.
_LOG_CLIP = 250.0


@lru_cache(maxsize=32)
def _tril_rc(n: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.tril_indices(n)
    return rows, cols


@lru_cache(maxsize=32)
def _diag_positions(n: int) -> np.ndarray:
    return np.cumsum(np.arange(1, n + 1)) - 1


# ---------------------------------------------------------------------------
# Covariance structures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Unstructured:
    """Free symmetric positive definite covariance via log-Cholesky.

    theta holds the lower triangle of the Cholesky factor row by row, with
    diagonal entries stored on the log scale so every theta maps to an SPD
    matrix.
    """

    name = "unstructured"

    def n_params(self, n_visits: int) -> int:
        return n_visits * (n_visits + 1) // 2

    def _factor(self, theta: np.ndarray, n_visits: int) -> np.ndarray:
        L = np.zeros((n_visits, n_visits))
        rows, cols = _tril_rc(n_visits)
        L[rows, cols] = theta
        d = np.arange(n_visits)
        L[d, d] = np.exp(np.clip(np.diag(L), -_LOG_CLIP, _LOG_CLIP))
        return L

    def matrix(self, theta: np.ndarray, n_visits: int) -> np.ndarray:
        theta = _check_theta(self, theta, n_visits)
        L = self._factor(theta, n_visits)
        return L @ L.T

    def derivatives(self, theta: np.ndarray, n_visits: int) -> list[np.ndarray]:
        theta = _check_theta(self, theta, n_visits)
        L = self._factor(theta, n_visits)
        out = []
        for a, b in zip(*_tril_rc(n_visits)):
            dL = np.zeros_like(L)
            dL[a, b] = L[a, a] if a == b else 1.0
            out.append(dL @ L.T + L @ dL.T)
        return out

    def gradient_from_m(
        self, theta: np.ndarray, M: np.ndarray, n_visits: int
    ) -> np.ndarray:
        # For D_k = dL L' + L dL' and symmetric M:
        # -0.5 tr(D_k M) = -(M L)[a, b], with the extra L_aa factor on the
        # diagonal from the log parameterization.
        L = self._factor(theta, n_visits)
        G = M @ L
        rows, cols = _tril_rc(n_visits)
        grad = -G[rows, cols]
        dp = _diag_positions(n_visits)
        grad[dp] *= np.diag(L)
        return grad

    def theta_from_matrix(self, sigma: np.ndarray) -> np.ndarray:
        L = np.linalg.cholesky(sigma)
        n = L.shape[0]
        theta = L[np.tril_indices(n)].copy()
        diag_pos = np.cumsum(np.arange(1, n + 1)) - 1
        theta[diag_pos] = np.log(theta[diag_pos])
        return theta


@dataclass(frozen=True)
class RandomInterceptDiag:
    """Between-subject variance plus per-visit heteroscedastic error variances.

    Marginal covariance: sigma_w^2 * ones + diag(sigma_e_j^2). theta is
    (log sigma_w^2, log sigma_e_1^2, ..., log sigma_e_J^2).
    """

    name = "ri-diag"

    def n_params(self, n_visits: int) -> int:
        return 1 + n_visits

    def matrix(self, theta: np.ndarray, n_visits: int) -> np.ndarray:
        theta = _check_theta(self, theta, n_visits)
        v = np.exp(np.clip(theta, -_LOG_CLIP, _LOG_CLIP))
        return v[0] * np.ones((n_visits, n_visits)) + np.diag(v[1:])

    def derivatives(self, theta: np.ndarray, n_visits: int) -> list[np.ndarray]:
        theta = _check_theta(self, theta, n_visits)
        v = np.exp(np.clip(theta, -_LOG_CLIP, _LOG_CLIP))
        out = [v[0] * np.ones((n_visits, n_visits))]
        for j in range(n_visits):
            D = np.zeros((n_visits, n_visits))
            D[j, j] = v[1 + j]
            out.append(D)
        return out

    def gradient_from_m(
        self, theta: np.ndarray, M: np.ndarray, n_visits: int
    ) -> np.ndarray:
        v = np.exp(np.clip(theta, -_LOG_CLIP, _LOG_CLIP))
        grad = np.empty(1 + n_visits)
        grad[0] = -0.5 * v[0] * float(M.sum())
        grad[1:] = -0.5 * v[1:] * np.diag(M)
        return grad

    def theta_from_matrix(self, sigma: np.ndarray) -> np.ndarray:
        n = sigma.shape[0]
        off = sigma[~np.eye(n, dtype=bool)]
        floor = 1e-8 * float(np.mean(np.diag(sigma)))
        s_w = max(float(off.mean()) if off.size else floor, floor)
        s_e = np.maximum(np.diag(sigma) - s_w, floor)
        return np.log(np.concatenate([[s_w], s_e]))


@dataclass(frozen=True)
class CompoundSymmetry:
    """Between-subject variance plus a single error variance.

    theta is (log sigma_w^2, log sigma_e^2).
    """

    name = "cs"

    def n_params(self, n_visits: int) -> int:
        return 2

    def matrix(self, theta: np.ndarray, n_visits: int) -> np.ndarray:
        theta = _check_theta(self, theta, n_visits)
        v = np.exp(np.clip(theta, -_LOG_CLIP, _LOG_CLIP))
        return v[0] * np.ones((n_visits, n_visits)) + v[1] * np.eye(n_visits)

    def derivatives(self, theta: np.ndarray, n_visits: int) -> list[np.ndarray]:
        theta = _check_theta(self, theta, n_visits)
        v = np.exp(np.clip(theta, -_LOG_CLIP, _LOG_CLIP))
        return [v[0] * np.ones((n_visits, n_visits)), v[1] * np.eye(n_visits)]

    def gradient_from_m(
        self, theta: np.ndarray, M: np.ndarray, n_visits: int
    ) -> np.ndarray:
        v = np.exp(np.clip(theta, -_LOG_CLIP, _LOG_CLIP))
        return np.array(
            [-0.5 * v[0] * float(M.sum()), -0.5 * v[1] * float(np.trace(M))]
        )

    def theta_from_matrix(self, sigma: np.ndarray) -> np.ndarray:
        n = sigma.shape[0]
        off = sigma[~np.eye(n, dtype=bool)]
        floor = 1e-8 * float(np.mean(np.diag(sigma)))
        s_w = max(float(off.mean()) if off.size else floor, floor)
        s_e = max(float(np.mean(np.diag(sigma))) - s_w, floor)
        return np.log(np.array([s_w, s_e]))


CovarianceStructure = Unstructured | RandomInterceptDiag | CompoundSymmetry

STRUCTURES = {
    "unstructured": Unstructured,
    "ri-diag": RandomInterceptDiag,
    "cs": CompoundSymmetry,
}


def _check_theta(structure, theta, n_visits: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).ravel()
    want = structure.n_params(n_visits)
    if theta.size != want:
        raise ValueError(
            f"{structure.name} with {n_visits} visits needs {want} parameters, "
            f"got {theta.size}"
        )
    return theta


def marginal_covariance(
    structure: CovarianceStructure, theta: Sequence[float], n_visits: int
) -> np.ndarray:
    """Implied marginal J x J covariance for an unconstrained parameter vector."""
    return structure.matrix(np.asarray(theta, dtype=float), n_visits)


# ---------------------------------------------------------------------------
# Model specification and design
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MmrmSpec:
    """Mean and covariance specification for one outcome.

    constrained_baseline=True omits the treatment term at visit 1, so the
    baseline mean is shared across arms and treatment effects are adjusted
    for baseline. include_treatment=False drops all treatment terms, which
    is the intercept-per-visit model for single-arm data.
    """

    outcome: str = "utility"
    constrained_baseline: bool = True
    covariance: CovarianceStructure = field(default_factory=Unstructured)
    extra_covariates: tuple[str, ...] = ()
    include_treatment: bool = True

    def __post_init__(self):
        if self.outcome not in ("utility", "cost"):
            raise DataError(f"outcome must be 'utility' or 'cost', got {self.outcome!r}")
        object.__setattr__(self, "extra_covariates", tuple(self.extra_covariates))

    def interaction_visits(self, n_visits: int) -> tuple[int, ...]:
        """1-based visits that carry a treatment-by-visit indicator."""
        if not self.include_treatment:
            return ()
        start = 2 if self.constrained_baseline else 1
        return tuple(range(start, n_visits + 1))


def coefficient_labels(spec: MmrmSpec, n_visits: int) -> list[str]:
    labels = [f"TIME_{j}" for j in range(1, n_visits + 1)]
    labels += [f"TIME_{j}:TRT" for j in spec.interaction_visits(n_visits)]
    labels += list(spec.extra_covariates)
    return labels


@dataclass(frozen=True)
class SubjectDesign:
    id: str
    arm: int
    visits: tuple[int, ...]  # 1-based observed visits
    X: np.ndarray  # (n_observed, n_coefficients)
    y: np.ndarray  # (n_observed,)


@dataclass(frozen=True)
class DesignSet:
    labels: tuple[str, ...]
    subjects: tuple[SubjectDesign, ...]
    n_excluded: int  # subjects with no observed value of this outcome


class _Prepared:
    """Array form of (data, spec) shared by the likelihood machinery.

    Subjects are reordered by id so results do not depend on input order,
    and subjects with no observed value of the outcome are dropped.
    """

    __slots__ = (
        "labels", "ids", "arm", "y", "X", "n_visits", "n_excluded",
        "covariate_means", "patterns",
    )

    def __init__(self, labels, ids, arm, y, X, n_visits, n_excluded, covariate_means):
        self.labels = labels
        self.ids = ids
        self.arm = arm
        self.y = y
        self.X = X
        self.n_visits = n_visits
        self.n_excluded = n_excluded
        self.covariate_means = covariate_means
        self.patterns = _group_patterns(y, X)


def _prepare(data: TrialDataset, spec: MmrmSpec, sort_by_id: bool = True) -> _Prepared:
    n_visits = data.n_visits
    labels = coefficient_labels(spec, n_visits)

    subjects = list(data.subjects)
    if sort_by_id:
        subjects.sort(key=lambda s: s.id)

    y_all = np.array(
        [[math.nan if v is None else v for v in s.outcome(spec.outcome)] for s in subjects],
        dtype=float,
    ).reshape(len(subjects), n_visits)
    arm_all = np.array([s.arm for s in subjects], dtype=float)

    cov_all = np.empty((len(subjects), len(spec.extra_covariates)))
    for k, name in enumerate(spec.extra_covariates):
        for i, s in enumerate(subjects):
            v = s.covariates.get(name)
            if v is None:
                raise DataError(
                    f"covariate {name!r} missing for subject {s.id!r}; "
                    "run mean_impute_covariates before fitting"
                )
            cov_all[i, k] = v

    keep = ~np.all(np.isnan(y_all), axis=1)
    n_excluded = int((~keep).sum())
    y = y_all[keep]
    arm = arm_all[keep]
    cov = cov_all[keep]
    ids = tuple(s.id for s, k in zip(subjects, keep) if k)
    if y.shape[0] == 0:
        raise DataError(f"no subject has any observed {spec.outcome} value")

    X = _design_tensor(spec, n_visits, arm, cov)
    cov_means = cov.mean(axis=0) if cov.size else np.zeros(len(spec.extra_covariates))
    return _Prepared(tuple(labels), ids, arm, y, X, n_visits, n_excluded, cov_means)


def _design_tensor(spec, n_visits, arm, cov) -> np.ndarray:
    """(N, J, P) design rows for every subject-visit."""
    n = arm.shape[0]
    inter = spec.interaction_visits(n_visits)
    p = n_visits + len(inter) + cov.shape[1]
    X = np.zeros((n, n_visits, p))
    for j in range(n_visits):
        X[:, j, j] = 1.0
    for k, j in enumerate(inter):
        X[:, j - 1, n_visits + k] = arm
    for k in range(cov.shape[1]):
        X[:, :, n_visits + len(inter) + k] = cov[:, k][:, None]
    return X


def build_design(data: TrialDataset, spec: MmrmSpec) -> DesignSet:
    """Per-subject observed-row design matrices and outcome vectors."""
    prep = _prepare(data, spec, sort_by_id=False)
    subjects = []
    for i, sid in enumerate(prep.ids):
        obs = ~np.isnan(prep.y[i])
        visits = tuple(int(j + 1) for j in np.flatnonzero(obs))
        subjects.append(
            SubjectDesign(
                id=sid,
                arm=int(prep.arm[i]),
                visits=visits,
                X=prep.X[i][obs].copy(),
                y=prep.y[i][obs].copy(),
            )
        )
    return DesignSet(labels=prep.labels, subjects=tuple(subjects),
                     n_excluded=prep.n_excluded)


# ---------------------------------------------------------------------------
# Pattern-grouped likelihood
# ---------------------------------------------------------------------------


class _Pattern:
    """Subjects sharing one observed-visit pattern, stacked for vector math.

    The per-subject outcome vector is appended to the design as an extra
    column, so one solve and one einsum per covariance value produce the
    X'V^-1X, X'V^-1y, and y'V^-1y blocks together.
    """

    __slots__ = ("obs", "ix", "n", "m", "Xa", "B", "na")

    def __init__(self, obs_idx: np.ndarray, X: np.ndarray, y: np.ndarray):
        self.obs = obs_idx                      # observed visit indices, (m,)
        self.ix = np.ix_(obs_idx, obs_idx)
        self.n = X.shape[0]
        self.m = obs_idx.size
        self.Xa = np.concatenate([X, y[:, :, None]], axis=2)   # (n, m, P+1)
        self.na = self.Xa.shape[2]
        xt = self.Xa.transpose(1, 0, 2).reshape(self.m, self.n * self.na)
        self.B = np.concatenate([xt, np.eye(self.m)], axis=1)


def _group_patterns(y: np.ndarray, X: np.ndarray) -> list[_Pattern]:
    obs = ~np.isnan(y)
    codes = obs @ (1 << np.arange(y.shape[1]))
    order = np.argsort(codes, kind="stable")
    sorted_codes = codes[order]
    starts = np.flatnonzero(np.concatenate([[True], sorted_codes[1:] != sorted_codes[:-1]]))
    groups = []
    for s, e in zip(starts, np.append(starts[1:], sorted_codes.size)):
        idx = order[s:e]
        cols = np.flatnonzero(obs[idx[0]])
        groups.append(_Pattern(cols, X[np.ix_(idx, cols)], y[np.ix_(idx, cols)]))
    return groups


class _Objective:
    """Profiled log-likelihood of the covariance parameters, with gradient."""

    def __init__(self, prep: _Prepared, structure: CovarianceStructure):
        self.prep = prep
        self.structure = structure
        self.n_obs_total = sum(p.n * p.m for p in prep.patterns)
        self.n_coef = prep.X.shape[2]
        self._memo_key = None
        self._memo_val = None

    def _solve_patterns(self, sigma):
        """Per-pattern GLS pieces at a covariance value; None if not SPD."""
        out = []
        for pat in self.prep.patterns:
            V = sigma[pat.ix]
            cf, info = dpotrf(V, lower=1, overwrite_a=True)
            if info != 0:
                return None
            Z, info = dpotrs(cf, pat.B, lower=1)
            if info != 0:
                return None
            WXa = Z[:, : pat.n * pat.na].reshape(pat.m, pat.n, pat.na)
            W = Z[:, pat.n * pat.na :]
            logdet = 2.0 * float(np.sum(np.log(np.diagonal(cf))))
            # Atilde = [[X'V^-1X, X'V^-1y], [y'V^-1X, y'V^-1y]] summed over
            # the pattern's subjects.
            atilde = np.einsum("nmp,mnq->pq", pat.Xa, WXa)
            out.append((pat, WXa, W, logdet, atilde))
        return out

    def beta_and_loglik(self, theta: np.ndarray):
        """GLS fixed effects, log-likelihood, and information at theta."""
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key == self._memo_key:
            return self._memo_val
        res = self._beta_and_loglik_uncached(theta)
        self._memo_key = key
        self._memo_val = res
        return res

    def _beta_and_loglik_uncached(self, theta: np.ndarray):
        sigma = self.structure.matrix(theta, self.prep.n_visits)
        pieces = self._solve_patterns(sigma)
        if pieces is None:
            return None
        atilde = pieces[0][4].copy()
        for p in pieces[1:]:
            atilde += p[4]
        A = atilde[: self.n_coef, : self.n_coef]
        b = atilde[: self.n_coef, self.n_coef]
        ydoty = atilde[self.n_coef, self.n_coef]
        beta = _solve_information(A, b, self.prep.labels)
        quad = float(ydoty - beta @ b)
        logdet_total = sum(p[0].n * p[3] for p in pieces)
        loglik = -0.5 * (self.n_obs_total * LOG_2PI + logdet_total + quad)
        return beta, loglik, A, pieces, sigma

    def value(self, theta: np.ndarray) -> float:
        try:
            res = self.beta_and_loglik(theta)
        except RankDeficiencyError:
            return -math.inf
        if res is None or not math.isfinite(res[1]):
            return -math.inf
        return res[1]

    def value_and_grad(self, theta: np.ndarray):
        try:
            res = self.beta_and_loglik(theta)
        except RankDeficiencyError:
            return -math.inf, None
        if res is None or not math.isfinite(res[1]):
            return -math.inf, None
        beta, loglik, _, pieces, _ = res
        J = self.prep.n_visits
        aug = np.append(-beta, 1.0)  # y - X beta in augmented-column form
        M = np.zeros((J, J))
        for pat, WXa, W, _, _ in pieces:
            WR = WXa @ aug  # (m, n): V^-1 residual vectors
            M[pat.ix] += pat.n * W - WR @ WR.T
        grad = self.structure.gradient_from_m(theta, M, J)
        return loglik, grad

    def start_theta(self, sigma0: np.ndarray | None = None) -> np.ndarray:
        if sigma0 is None:
            sigma0 = _start_sigma(self.prep)
        if isinstance(self.structure, Unstructured):
            return self.structure.theta_from_matrix(sigma0)
        # scalar-variance structures start from the pooled sample variance,
        # split evenly between the subject and error components
        pooled = max(float(np.mean(np.diag(sigma0))), 1e-12)
        half = math.log(0.5 * pooled)
        return np.full(self.structure.n_params(self.prep.n_visits), half)


def _assert_identified(A: np.ndarray, labels) -> None:
    """Reject numerically rank-deficient information, naming a coefficient."""
    w, v = np.linalg.eigh(A)
    if w[0] <= 1e-10 * max(w[-1], 1e-300):
        k = int(np.argmax(np.abs(v[:, 0])))
        raise RankDeficiencyError(
            f"design is rank deficient; coefficient {labels[k]!r} is not "
            "identified on the observed rows"
        )


def _solve_information(A: np.ndarray, b: np.ndarray, labels) -> np.ndarray:
    """Solve the GLS normal equations, naming any unidentified coefficient."""
    diag = np.diag(A)
    dead = np.flatnonzero(diag <= 0)
    if dead.size:
        raise RankDeficiencyError(
            f"coefficient {labels[dead[0]]!r} has no information "
            "(no observed rows load on it)"
        )
    try:
        c = cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(A)
        k = int(np.argmax(np.abs(v[:, 0])))
        raise RankDeficiencyError(
            f"design is rank deficient; coefficient {labels[k]!r} is not "
            "identified on the observed rows"
        ) from None
    return cho_solve(c, b, check_finite=False)


def _available_case_means(y: np.ndarray) -> np.ndarray:
    obs = ~np.isnan(y)
    counts = obs.sum(axis=0)
    sums = np.where(obs, y, 0.0).sum(axis=0)
    return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def _start_sigma(prep: _Prepared) -> np.ndarray:
    """Pairwise-complete residual covariance, floored to positive definite.

    Residuals are taken around per-arm per-visit available-case means so the
    start is close to the optimum for near-saturated mean models.
    """
    y = prep.y
    J = prep.n_visits
    overall = _available_case_means(y)
    resid = y.copy()
    for arm in (0.0, 1.0):
        rows = prep.arm == arm
        if not rows.any():
            continue
        mu = _available_case_means(y[rows])
        mu = np.where(np.isnan(mu), overall, mu)
        resid[rows] = y[rows] - mu
    obs = ~np.isnan(resid)
    filled = np.where(obs, resid, 0.0)
    counts = obs.astype(float).T @ obs.astype(float)
    cross = filled.T @ filled
    sigma = np.where(counts > 0, cross / np.maximum(counts, 1.0), 0.0)
    sigma = 0.5 * (sigma + sigma.T)
    diag_fallback = float(np.var(resid[obs])) if obs.any() else 1.0
    for j in range(J):
        if counts[j, j] == 0 or sigma[j, j] <= 0:
            sigma[j, j] = max(diag_fallback, 1e-6)
    w, v = np.linalg.eigh(sigma)
    floor = 1e-6 * float(np.mean(np.diag(sigma)))
    w = np.maximum(w, max(floor, 1e-12))
    return (v * w) @ v.T


# ---------------------------------------------------------------------------
# Quasi-Newton maximizer
# ---------------------------------------------------------------------------

MAX_ITERATIONS = 500
F_TOL = 1e-10
G_TOL = 1e-6
_ARMIJO = 1e-4


def _maximize(objective: _Objective, theta0: np.ndarray):
    """BFGS with backtracking line search on the profiled log-likelihood.

    Converged when the relative log-likelihood change drops below F_TOL and
    the gradient max-norm drops below G_TOL * (1 + |loglik|).
    """
    theta = np.asarray(theta0, dtype=float).copy()
    f, g = objective.value_and_grad(theta)
    if not math.isfinite(f):
        raise ConvergenceError("profiled log-likelihood is not finite at the start")
    n = theta.size
    H = np.eye(n)
    fresh = True  # H carries no curvature information yet
    converged = False
    iterations = 0

    def grad_ok(fv, gv):
        return float(np.max(np.abs(gv))) <= G_TOL * (1.0 + abs(fv))

    for _ in range(MAX_ITERATIONS):
        d = H @ g  # ascent direction for the maximization
        if float(g @ d) <= 0.0:
            H = np.eye(n)
            fresh = True
            d = g.copy()
        slope = float(g @ d)

        t = 1.0
        accepted = False
        for _ in range(60):
            f_try = objective.value(theta + t * d)
            if math.isfinite(f_try) and f_try >= f + _ARMIJO * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if not fresh:
                # Curvature approximation may be stale; retry from steepest
                # ascent before giving up.
                H = np.eye(n)
                fresh = True
                continue
            converged = grad_ok(f, g)
            break

        theta_new = theta + t * d
        f_new, g_new = objective.value_and_grad(theta_new)
        if g_new is None:
            break
        iterations += 1

        s = theta_new - theta
        yv = g_new - g
        small_change = abs(f_new - f) <= F_TOL * (1.0 + abs(f_new))
        theta, f, g = theta_new, f_new, g_new
        if small_change and grad_ok(f, g):
            converged = True
            break

        sy = float(s @ (-yv))  # curvature of the negated objective
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv) + 1e-300):
            if fresh:
                H = (sy / float(yv @ yv)) * np.eye(n)
                fresh = False
            rho = 1.0 / sy
            I = np.eye(n)
            V = I - rho * np.outer(s, -yv)
            H = V @ H @ V.T + rho * np.outer(s, s)

    grad_norm = float(np.max(np.abs(g)))
    return theta, f, grad_norm, iterations, converged


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Convergence:
    converged: bool
    iterations: int
    gradient_norm: float


@dataclass(frozen=True)
class FittedMmrm:
    """Maximum-likelihood fit of one outcome's repeated-measures model."""

    spec: MmrmSpec
    labels: tuple[str, ...]
    beta: np.ndarray
    sigma: np.ndarray           # implied marginal covariance, (J, J)
    vcov_beta: np.ndarray       # plug-in GLS covariance of beta
    loglik: float
    n_subjects_used: int
    n_subjects_excluded: int
    convergence: Convergence
    covariate_means: np.ndarray
    visit_schedule: tuple[float, ...]

    @property
    def n_visits(self) -> int:
        return len(self.visit_schedule)

    def coefficient(self, label: str) -> float:
        return float(self.beta[self.labels.index(label)])

    def se(self, label: str) -> float:
        k = self.labels.index(label)
        return float(np.sqrt(max(self.vcov_beta[k, k], 0.0)))

    def to_json_dict(self) -> dict:
        return {
            "outcome": self.spec.outcome,
            "constrained_baseline": self.spec.constrained_baseline,
            "covariance_structure": self.spec.covariance.name,
            "labels": list(self.labels),
            "beta": [float(x) for x in self.beta],
            "sigma": {
                "labels": [f"TIME_{j}" for j in range(1, self.n_visits + 1)],
                "values": [[float(x) for x in row] for row in self.sigma],
            },
            "vcov_beta": [[float(x) for x in row] for row in self.vcov_beta],
            "loglik": float(self.loglik),
            "n_subjects_used": self.n_subjects_used,
            "n_subjects_excluded": self.n_subjects_excluded,
            "convergence": {
                "converged": self.convergence.converged,
                "iterations": self.convergence.iterations,
                "gradient_norm": self.convergence.gradient_norm,
            },
            "visit_schedule": list(self.visit_schedule),
            "covariate_means": [float(x) for x in self.covariate_means],
        }


def loglik(
    data: TrialDataset, spec: MmrmSpec, theta: Sequence[float], beta: Sequence[float]
) -> float:
    """Observed-data log-likelihood at given covariance parameters and beta."""
    prep = _prepare(data, spec)
    obj = _Objective(prep, spec.covariance)
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.size != len(prep.labels):
        raise ValueError(f"beta must have length {len(prep.labels)}, got {beta.size}")
    sigma = spec.covariance.matrix(np.asarray(theta, dtype=float), prep.n_visits)
    pieces = obj._solve_patterns(sigma)
    if pieces is None:
        raise np.linalg.LinAlgError("covariance is numerically singular")
    atilde = sum(p[4] for p in pieces)
    k = obj.n_coef
    A = atilde[:k, :k]
    b = atilde[:k, k]
    ydoty = atilde[k, k]
    quad = float(ydoty - 2.0 * beta @ b + beta @ A @ beta)
    logdet_total = sum(p[0].n * p[3] for p in pieces)
    return -0.5 * (obj.n_obs_total * LOG_2PI + logdet_total + quad)


def profile_beta(
    data: TrialDataset, spec: MmrmSpec, theta: Sequence[float]
) -> tuple[np.ndarray, float]:
    """GLS fixed effects given the covariance parameters, and the profiled
    log-likelihood at that solution."""
    prep = _prepare(data, spec)
    obj = _Objective(prep, spec.covariance)
    res = obj.beta_and_loglik(np.asarray(theta, dtype=float))
    if res is None:
        raise np.linalg.LinAlgError("covariance is numerically singular")
    return res[0], res[1]


def profiled_loglik_and_gradient(
    data: TrialDataset, spec: MmrmSpec, theta: Sequence[float]
) -> tuple[float, np.ndarray]:
    """Profiled log-likelihood and its analytic gradient in theta."""
    prep = _prepare(data, spec)
    obj = _Objective(prep, spec.covariance)
    f, g = obj.value_and_grad(np.asarray(theta, dtype=float))
    if g is None:
        raise np.linalg.LinAlgError("covariance is numerically singular")
    return f, g


def _fit_core(
    prep: _Prepared,
    spec: MmrmSpec,
    visit_schedule: tuple[float, ...],
    start_sigma: np.ndarray | None = None,
) -> FittedMmrm:
    """Maximize the profiled likelihood for already-prepared arrays.

    The outcome is standardized internally (divided by its observed-value
    standard deviation) so the optimization is scale free; all reported
    quantities are mapped back to the original scale.
    """
    obs_vals = prep.y[~np.isnan(prep.y)]
    scale = float(obs_vals.std())
    if not math.isfinite(scale) or scale <= 0.0:
        scale = 1.0

    prep_std = _Prepared(
        prep.labels, prep.ids, prep.arm, prep.y / scale, prep.X,
        prep.n_visits, prep.n_excluded, prep.covariate_means,
    )
    obj = _Objective(prep_std, spec.covariance)

    if start_sigma is not None:
        sigma0 = np.asarray(start_sigma, dtype=float) / (scale * scale)
        try:
            theta0 = spec.covariance.theta_from_matrix(sigma0)
        except np.linalg.LinAlgError:
            raise DataError("start_sigma must be symmetric positive definite") from None
    else:
        theta0 = obj.start_theta()

    # Surface rank problems immediately, with the offending coefficient named.
    first = obj.beta_and_loglik(theta0)
    if first is None:
        raise ConvergenceError("starting covariance is numerically singular")
    _assert_identified(first[2], prep.labels)

    theta, f, grad_norm, iterations, converged = _maximize(obj, theta0)

    res = obj.beta_and_loglik(theta)
    beta_std, loglik_std, A, _, sigma_std = res
    _assert_identified(A, prep.labels)
    vcov_std = np.linalg.inv(A)
    vcov_std = 0.5 * (vcov_std + vcov_std.T)

    n_obs_total = obj.n_obs_total
    fitted = FittedMmrm(
        spec=spec,
        labels=prep.labels,
        beta=beta_std * scale,
        sigma=sigma_std * scale * scale,
        vcov_beta=vcov_std * scale * scale,
        loglik=loglik_std - n_obs_total * math.log(scale),
        n_subjects_used=prep.y.shape[0],
        n_subjects_excluded=prep.n_excluded,
        convergence=Convergence(converged, iterations, grad_norm),
        covariate_means=prep.covariate_means.copy(),
        visit_schedule=tuple(visit_schedule),
    )
    if not converged:
        raise ConvergenceError(
            f"no convergence after {iterations} iterations "
            f"(gradient max-norm {grad_norm:.3g})",
            result=fitted,
        )
    return fitted


def _prepared_from_arrays(
    spec: MmrmSpec,
    n_visits: int,
    y: np.ndarray,
    arm: np.ndarray,
    cov: np.ndarray,
    ids: tuple[str, ...] | None = None,
) -> _Prepared:
    """Build the likelihood arrays directly, keeping the given subject order."""
    labels = tuple(coefficient_labels(spec, n_visits))
    keep = ~np.all(np.isnan(y), axis=1)
    n_excluded = int((~keep).sum())
    y_k = y[keep]
    arm_k = arm[keep].astype(float)
    cov_k = cov[keep] if cov.size else np.zeros((int(keep.sum()), 0))
    if y_k.shape[0] == 0:
        raise DataError(f"no subject has any observed {spec.outcome} value")
    X = _design_tensor(spec, n_visits, arm_k, cov_k)
    cov_means = cov_k.mean(axis=0) if cov_k.size else np.zeros(cov_k.shape[1])
    kept_ids = (
        tuple(i for i, k in zip(ids, keep) if k) if ids is not None
        else tuple(str(i) for i in range(y_k.shape[0]))
    )
    return _Prepared(labels, kept_ids, arm_k, y_k, X, n_visits, n_excluded, cov_means)


def fit(
    data: TrialDataset,
    spec: MmrmSpec,
    start_sigma: np.ndarray | None = None,
) -> FittedMmrm:
    """Fit the model by maximum likelihood on each subject's observed rows.

    Deterministic given (data, spec): subjects are processed in id order, so
    permuting the input leaves every output bit unchanged.
    """
    prep = _prepare(data, spec)
    return _fit_core(prep, spec, data.visit_schedule, start_sigma)


@dataclass(frozen=True)
class CoefficientCi:
    label: str
    estimate: float
    se: float
    lower: float
    upper: float


def wald_ci(fitted: FittedMmrm, level: float = 0.95) -> list[CoefficientCi]:
    """Normal-quantile confidence intervals for every coefficient."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    z = float(norm.ppf(0.5 * (1.0 + level)))
    out = []
    for k, label in enumerate(fitted.labels):
        est = float(fitted.beta[k])
        se = float(np.sqrt(max(fitted.vcov_beta[k, k], 0.0)))
        out.append(CoefficientCi(label, est, se, est - z * se, est + z * se))
    return out
