"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from trialcea.dataset import SubjectRecord, TrialDataset
from trialcea.mmrm import Convergence, FittedMmrm, MmrmSpec, Unstructured


def make_dataset(utility, cost, arms, times=(0.0, 0.25, 0.75), ids=None,
                 covariates=None):
    """Build a TrialDataset from row-per-subject value lists (None = missing)."""
    utility = [list(row) for row in utility]
    cost = [list(row) for row in cost]
    n = len(utility)
    ids = ids or [f"s{i:04d}" for i in range(n)]
    covariates = covariates or [{} for _ in range(n)]
    subjects = tuple(
        SubjectRecord(
            id=ids[i],
            arm=int(arms[i]),
            utility=tuple(utility[i]),
            cost=tuple(cost[i]),
            covariates=covariates[i],
        )
        for i in range(n)
    )
    return TrialDataset(subjects=subjects, visit_schedule=tuple(times))


def random_complete_dataset(rng, n=30, times=(0.0, 0.25, 0.75),
                            mu=(0.7, 0.72, 0.74), effect=(0.0, 0.03, 0.05),
                            sd=0.25, corr=0.5, cost_scale=2000.0):
    """Two-arm complete trial with exchangeable within-subject correlation."""
    J = len(times)
    cov = sd * sd * (corr * np.ones((J, J)) + (1 - corr) * np.eye(J))
    L = np.linalg.cholesky(cov)
    arms = np.array([0, 1] * (n // 2) + [0] * (n % 2))
    mean = np.asarray(mu) + np.outer(arms, np.asarray(effect))
    u = mean + rng.standard_normal((n, J)) @ L.T
    c = cost_scale * (1.0 + 0.4 * rng.standard_normal((n, J))) + 500.0 * u
    return make_dataset(u, c, arms, times)


def make_fitted(labels, beta, vcov, visit_schedule=(0.0, 0.25, 0.75),
                outcome="utility", constrained=True, sigma=None,
                covariate_means=(), extra_covariates=()):
    """Hand-built FittedMmrm for contrast arithmetic tests."""
    labels = tuple(labels)
    beta = np.asarray(beta, dtype=float)
    vcov = np.asarray(vcov, dtype=float)
    J = len(visit_schedule)
    return FittedMmrm(
        spec=MmrmSpec(
            outcome=outcome,
            constrained_baseline=constrained,
            covariance=Unstructured(),
            extra_covariates=tuple(extra_covariates),
        ),
        labels=labels,
        beta=beta,
        sigma=np.eye(J) if sigma is None else np.asarray(sigma, dtype=float),
        vcov_beta=vcov,
        loglik=0.0,
        n_subjects_used=0,
        n_subjects_excluded=0,
        convergence=Convergence(True, 0, 0.0),
        covariate_means=np.asarray(covariate_means, dtype=float),
        visit_schedule=tuple(visit_schedule),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
