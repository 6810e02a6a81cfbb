"""Shared resampling machinery and the estimate record every method emits.

The resampling unit is always the subject, never the person-visit row, and
replicate seeds are derived from the caller's generator so archives are
reproducible and independent of execution order.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBootstrapError, IcefreeError
from .mi import PooledEstimate, pool_rubin
from .numerics import DesignMatrix, fit_ols

MAX_FAILURE_FRACTION = 0.10


@dataclass(frozen=True)
class EstimateTriple:
    """One analysis-report row: both arm means and their difference, with SEs."""

    method_id: int
    arm1_mean: float
    arm1_se: float
    arm0_mean: float
    arm0_se: float
    effect: float
    effect_se: float
    diagnostics: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def __post_init__(self):
        gap = abs(self.effect - (self.arm1_mean - self.arm0_mean))
        scale = max(1.0, abs(self.arm1_mean), abs(self.arm0_mean))
        if gap > 1e-10 * scale:
            raise ValueError("effect must equal arm1_mean - arm0_mean")


@dataclass(frozen=True)
class BootstrapResult:
    replicates: np.ndarray  # (B_ok, d)
    variances: np.ndarray  # (d,)
    n_failed: int
    n_requested: int


def resample_dataset(dataset, rng):
    """Subject-level resample with replacement, original n, ids renumbered."""
    n = dataset.n
    idx = rng.integers(0, n, size=n)
    frame = dataset.frame.iloc[idx].reset_index(drop=True)
    frame["id"] = [f"b{i}" for i in range(n)]
    return dataset.with_frame(frame)


def bootstrap(dataset, statistic, b, rng):
    """Nonparametric subject bootstrap of a (possibly vector) statistic.

    ``statistic(dataset, rng) -> float or 1-d array``. Replicates that raise a
    package error are dropped and counted; more than 10% failures aborts.
    """
    child = rng.spawn(b)
    rows = []
    failed = 0
    for i in range(b):
        rs = resample_dataset(dataset, child[i])
        try:
            rows.append(np.atleast_1d(np.asarray(statistic(rs, child[i]), dtype=float)))
        except IcefreeError:
            failed += 1
    if failed > MAX_FAILURE_FRACTION * b:
        raise DegenerateBootstrapError(f"{failed}/{b} bootstrap replicates failed")
    reps = np.vstack(rows) if rows else np.empty((0, 1))
    variances = reps.var(axis=0, ddof=1) if reps.shape[0] > 1 else np.zeros(reps.shape[1])
    return BootstrapResult(replicates=reps, variances=variances, n_failed=failed, n_requested=b)


def mi_bootstrap_pool(stack, statistic, b, rng):
    """Rubin pooling with bootstrap variance as the within-imputation variance.

    Per completed copy: point = statistic on the copy, within-variance = its
    subject-bootstrap variance; then Rubin's rule across copies, per statistic
    dimension. Returns a list of PooledEstimate, one per dimension.
    """
    child = rng.spawn(stack.m)
    points, variances = [], []
    total_failed = 0
    for i, ds in enumerate(stack.datasets):
        crng = child[i]
        point = np.atleast_1d(np.asarray(statistic(ds, crng), dtype=float))
        boot = bootstrap(ds, statistic, b, crng)
        points.append(point)
        variances.append(boot.variances)
        total_failed += boot.n_failed
    points = np.vstack(points)
    variances = np.vstack(variances)
    pooled = [pool_rubin(points[:, j], variances[:, j]) for j in range(points.shape[1])]
    return pooled, total_failed


def ancova_estimates(y, arm, covariates=None, covariate_names=(), weights=None):
    """Linear model of y on treatment plus covariates; arm means evaluated at
    the pooled covariate means.

    Returns (arm1, arm0, effect, se_arm1, se_arm0, se_effect).
    """
    y = np.asarray(y, dtype=float)
    arm = np.asarray(arm, dtype=float)
    names = ["const", "arm", *covariate_names]
    cols = [np.ones_like(y), arm]
    if covariates is not None and len(covariate_names):
        cov = np.asarray(covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        cols.extend(cov[:, j] for j in range(cov.shape[1]))
        cov_means = (
            np.average(cov, axis=0, weights=weights) if weights is not None else cov.mean(axis=0)
        )
    else:
        cov_means = np.empty(0)
    X = DesignMatrix(tuple(names), np.column_stack(cols))
    fit = fit_ols(X, y, weights=weights)
    c1 = np.concatenate([[1.0, 1.0], cov_means])
    c0 = np.concatenate([[1.0, 0.0], cov_means])
    arm1 = float(c1 @ fit.coefficients)
    arm0 = float(c0 @ fit.coefficients)
    return (
        arm1,
        arm0,
        arm1 - arm0,
        fit.contrast_se(c1),
        fit.contrast_se(c0),
        fit.contrast_se(c1 - c0),
    )
