"""Regression kernel: (weighted) OLS via QR, IRLS logistic and multinomial
logistic, and Bayesian linear posterior draws.

All fits are pure functions of their inputs (and an explicit RNG where one is
needed), so they are safe to call concurrently.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateOutcomeError,
    InsufficientDataError,
    InvalidDataError,
    RankDeficientError,
)

log = logging.getLogger(__name__)

# IRLS controls: quasi-separated event models are expected (rare ICEs), so
# coefficients are clamped rather than allowed to diverge.
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
COEF_CLAMP = 30.0

_RANK_RTOL = 1e-10


@dataclass(frozen=True)
class DesignMatrix:
    """Named real-valued design matrix; intercept column, when used, comes first."""

    names: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise InvalidDataError("design matrix must be 2-dimensional")
        if values.shape[1] != len(self.names):
            raise InvalidDataError("column count does not match number of names")
        if len(set(self.names)) != len(self.names):
            raise InvalidDataError("duplicate column names in design matrix")
        if not np.all(np.isfinite(values)):
            raise InvalidDataError("non-finite entries in design matrix")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", values)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def select(self, names):
        idx = [self.names.index(n) for n in names]
        return DesignMatrix(tuple(names), self.values[:, idx])


@dataclass(frozen=True)
class LinearFit:
    names: tuple
    coefficients: np.ndarray
    coefficient_covariance: np.ndarray
    residual_variance: float
    n_used: int
    df_residual: int

    def coef(self, name):
        return float(self.coefficients[self.names.index(name)])

    def coef_dict(self):
        return dict(zip(self.names, self.coefficients.tolist()))

    def predict(self, values):
        return np.asarray(values, dtype=float) @ self.coefficients

    def contrast_se(self, c):
        """Standard error of c' beta."""
        c = np.asarray(c, dtype=float)
        var = float(c @ self.coefficient_covariance @ c)
        return float(np.sqrt(max(var, 0.0)))


@dataclass(frozen=True)
class BinaryFit:
    names: tuple
    coefficients: np.ndarray
    converged: bool
    iterations: int
    n_used: int

    def predict_proba(self, values):
        eta = np.asarray(values, dtype=float) @ self.coefficients
        return _expit(eta)


@dataclass(frozen=True)
class MultinomialFit:
    """Logit coefficients per non-reference category; category 0 is the reference."""

    names: tuple
    levels: tuple
    coefficients: np.ndarray  # (n_levels - 1, p)
    converged: bool
    iterations: int
    n_used: int
    collapsed: bool = False

    def predict_proba(self, values):
        """Per-observation probabilities over all levels; rows sum to 1."""
        values = np.asarray(values, dtype=float)
        eta = values @ self.coefficients.T  # (n, L-1)
        full = np.concatenate([np.zeros((values.shape[0], 1)), eta], axis=1)
        full -= full.max(axis=1, keepdims=True)
        ex = np.exp(full)
        return ex / ex.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class PosteriorDraw:
    names: tuple
    coefficients: np.ndarray
    residual_sd: float
    rng_tag: str = ""


def _expit(eta):
    out = np.empty_like(eta, dtype=float)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_xy(X, y, weights):
    if not isinstance(X, DesignMatrix):
        raise InvalidDataError("X must be a DesignMatrix")
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != X.n:
        raise InvalidDataError("response length does not match design rows")
    if not np.all(np.isfinite(y)):
        raise InvalidDataError("non-finite entries in response")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != y.shape:
            raise InvalidDataError("weights length does not match response")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise InvalidDataError("weights must be finite and nonnegative")
    return y, weights


def _collinear_names(values, names):
    """Name the columns a pivoted QR puts beyond the numerical rank."""
    _, r, piv = scipy.linalg.qr(values, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return list(names)
    rank = int(np.sum(diag > _RANK_RTOL * diag[0]))
    return sorted(names[piv[k]] for k in range(rank, len(names)))


def fit_ols(X, y, weights=None):
    """Least squares via QR; optional nonnegative observation weights.

    Raises RankDeficientError naming the collinear columns rather than
    silently pseudo-solving a singular system.
    """
    y, weights = _check_xy(X, y, weights)
    if weights is None:
        weights = np.ones_like(y)
    n_used = int(np.sum(weights > 0))
    if n_used < X.p:
        raise InsufficientDataError(f"{n_used} positively weighted rows for {X.p} columns")
    sw = np.sqrt(weights)
    Xw = X.values * sw[:, None]
    yw = y * sw

    q, r = np.linalg.qr(Xw)
    rdiag = np.abs(np.diag(r))
    scale = rdiag.max() if rdiag.size else 0.0
    if scale == 0.0 or np.any(rdiag <= _RANK_RTOL * scale):
        raise RankDeficientError(_collinear_names(Xw, X.names))

    beta = scipy.linalg.solve_triangular(r, q.T @ yw)
    resid = yw - Xw @ beta
    rss = float(resid @ resid)
    df = n_used - X.p
    sigma2 = rss / df if df > 0 else 0.0
    rinv = scipy.linalg.solve_triangular(r, np.eye(X.p))
    xtx_inv = rinv @ rinv.T
    cov = sigma2 * xtx_inv
    cov = 0.5 * (cov + cov.T)
    return LinearFit(
        names=X.names,
        coefficients=beta,
        coefficient_covariance=cov,
        residual_variance=max(sigma2, 0.0),
        n_used=n_used,
        df_residual=max(df, 0),
    )


def _binary_loglik(y, eta, weights):
    # log L = sum w * [y*eta - log(1 + exp(eta))], computed stably
    log1p = np.logaddexp(0.0, eta)
    return float(np.sum(weights * (y * eta - log1p)))


def _irls_core(values, names, y, weights, start):
    """IRLS loop shared by the validated fit and the resampling hot paths."""
    beta = np.zeros(values.shape[1]) if start is None else np.asarray(start, dtype=float).copy()
    ll_old = _binary_loglik(y, values @ beta, weights)
    clamped = False
    it = 0
    for it in range(1, IRLS_MAX_ITER + 1):
        eta = values @ beta
        p = _expit(eta)
        w_irls = np.maximum(weights * p * (1.0 - p), 1e-10)
        z = eta + (y - p) / np.maximum(p * (1.0 - p), 1e-10)
        sw = np.sqrt(w_irls)
        q, r = np.linalg.qr(values * sw[:, None])
        rdiag = np.abs(np.diag(r))
        if rdiag.max() == 0.0 or np.any(rdiag <= _RANK_RTOL * rdiag.max()):
            raise RankDeficientError(_collinear_names(values, names))
        prev = beta
        beta = scipy.linalg.solve_triangular(r, q.T @ (z * sw))
        over = np.abs(beta) > COEF_CLAMP
        if np.any(over):
            clamped = True
            beta = np.clip(beta, -COEF_CLAMP, COEF_CLAMP)
        ll = _binary_loglik(y, values @ beta, weights)
        # separated fits can oscillate against the clamp: halve back toward
        # the previous iterate when the step hurts, stop if pinned
        halvings = 0
        while ll < ll_old and halvings < 6:
            beta = 0.5 * (beta + prev)
            ll = _binary_loglik(y, values @ beta, weights)
            halvings += 1
        if ll < ll_old:
            beta = prev
            ll = ll_old
            break
        if abs(ll - ll_old) < IRLS_TOL * (abs(ll_old) + 1.0) or np.array_equal(beta, prev):
            ll_old = ll
            break
        ll_old = ll
    converged = (it < IRLS_MAX_ITER) and not clamped
    return beta, converged, it


def fit_logistic(X, y, weights=None, start=None):
    """Binary logistic regression by IRLS.

    Converges on relative log-likelihood change < 1e-8 (max 100 iterations);
    under quasi-separation coefficients are clamped at |beta| <= 30 and the
    fit is flagged converged=False instead of diverging. ``start`` warm-starts
    the iterations (same fixed point, fewer steps).
    """
    y, weights = _check_xy(X, y, weights)
    if weights is None:
        weights = np.ones_like(y)
    vals = np.unique(y)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise InvalidDataError("logistic response must be coded 0/1")
    if vals.size < 2:
        raise DegenerateOutcomeError("both outcome classes must be present")

    beta, converged, it = _irls_core(X.values, X.names, y, weights, start)
    return BinaryFit(
        names=X.names,
        coefficients=beta,
        converged=converged,
        iterations=it,
        n_used=int(np.sum(weights > 0)),
    )


def fit_multinomial(X, y, n_levels=None, on_empty="collapse", start=None):
    """Multinomial logistic regression by Newton iterations; level 0 is the reference.

    Levels are 0..n_levels-1. When a non-reference level has no observations
    the default is to collapse all non-zero levels into a single level and fit
    a binary model through the same machinery (with a logged warning);
    on_empty="error" raises instead. ``start`` warm-starts the iterations.
    """
    y = np.asarray(y)
    if not isinstance(X, DesignMatrix):
        raise InvalidDataError("X must be a DesignMatrix")
    if y.shape[0] != X.n:
        raise InvalidDataError("response length does not match design rows")
    y = y.astype(int)
    if n_levels is None:
        n_levels = int(y.max()) + 1
    if n_levels < 2:
        raise InvalidDataError("need at least two outcome levels")
    if np.any((y < 0) | (y >= n_levels)):
        raise InvalidDataError("response levels outside 0..n_levels-1")

    counts = np.bincount(y, minlength=n_levels)
    if counts[0] == 0:
        raise DegenerateOutcomeError("reference level 0 has no observations")
    if np.all(counts[1:] == 0):
        raise DegenerateOutcomeError("no non-reference outcomes present")
    collapsed = False
    if np.any(counts[1:] == 0):
        if on_empty == "error":
            empty = [int(l) for l in range(1, n_levels) if counts[l] == 0]
            raise DegenerateOutcomeError(f"unobserved outcome levels: {empty}")
        log.warning(
            "multinomial levels %s unobserved; collapsing to a single any-event level",
            [int(l) for l in range(1, n_levels) if counts[l] == 0],
        )
        y = (y > 0).astype(int)
        n_levels = 2
        collapsed = True

    n, p = X.n, X.p
    L = n_levels - 1
    Y = np.zeros((n, L))
    for l in range(1, n_levels):
        Y[:, l - 1] = y == l

    B = np.zeros((L, p))
    if start is not None and np.shape(start) == (L, p):
        B = np.asarray(start, dtype=float).copy()
    xv = X.values

    def loglik(Bm):
        eta = xv @ Bm.T
        full = np.concatenate([np.zeros((n, 1)), eta], axis=1)
        m = full.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(full - m).sum(axis=1, keepdims=True))).ravel()
        return float(np.sum((Y * eta).sum(axis=1) - lse))

    ll_old = loglik(B)
    clamped = False
    it = 0
    for it in range(1, IRLS_MAX_ITER + 1):
        eta = xv @ B.T
        full = np.concatenate([np.zeros((n, 1)), eta], axis=1)
        full -= full.max(axis=1, keepdims=True)
        ex = np.exp(full)
        prob = ex / ex.sum(axis=1, keepdims=True)
        P = prob[:, 1:]  # (n, L)

        grad = ((Y - P).T @ xv).ravel()  # (L*p,)
        H = np.zeros((L * p, L * p))
        for a in range(L):
            for b in range(a, L):
                w = P[:, a] * ((a == b) - P[:, b])
                blk = xv.T @ (xv * w[:, None])
                H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
                if b != a:
                    H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk
        # quasi-separated rare categories can flatten a Hessian block; escalate
        # the ridge rather than aborting (the coefficient clamp bounds the fit)
        step = None
        ridge = 1e-10
        while step is None:
            H[np.diag_indices_from(H)] += ridge
            try:
                step = np.linalg.solve(H, grad)
            except np.linalg.LinAlgError:
                ridge *= 1e4
                if ridge > 1e-1:
                    raise RankDeficientError(_collinear_names(xv, X.names))
        prev = B
        B = B + step.reshape(L, p)
        over = np.abs(B) > COEF_CLAMP
        if np.any(over):
            clamped = True
            B = np.clip(B, -COEF_CLAMP, COEF_CLAMP)
        ll = loglik(B)
        halvings = 0
        while ll < ll_old and halvings < 6:
            B = 0.5 * (B + prev)
            ll = loglik(B)
            halvings += 1
        if ll < ll_old:
            B = prev
            ll = ll_old
            break
        if abs(ll - ll_old) < IRLS_TOL * (abs(ll_old) + 1.0) or np.array_equal(B, prev):
            ll_old = ll
            break
        ll_old = ll
    converged = (it < IRLS_MAX_ITER) and not clamped
    return MultinomialFit(
        names=X.names,
        levels=tuple(range(n_levels)),
        coefficients=B,
        converged=converged,
        iterations=it,
        n_used=n,
        collapsed=collapsed,
    )


def draw_posterior_linear(X, y, rng, rng_tag=""):
    """One draw from the standard normal-linear posterior implied by an OLS fit.

    Residual variance is drawn from the scaled inverse chi-square with
    df = n - p; coefficients from a normal centred at the OLS estimates with
    covariance scaled by the drawn variance. A perfectly linear response
    yields residual_sd = 0 and the OLS coefficients unchanged.
    """
    y = np.asarray(y, dtype=float)
    if isinstance(X, DesignMatrix) and X.n <= X.p:
        raise InsufficientDataError(f"need n > p for a posterior draw (n={X.n}, p={X.p})")
    fit = fit_ols(X, y)
    df = fit.df_residual
    s2 = fit.residual_variance
    # perfectly linear responses leave only float roundoff in the residuals
    if s2 <= 1e-20 * (1.0 + float(np.mean(y * y))):
        return PosteriorDraw(fit.names, fit.coefficients.copy(), 0.0, rng_tag)
    sigma2 = df * s2 / rng.chisquare(df)
    # coefficient_covariance = s2 * (X'X)^-1, so rescale by sigma2 / s2
    cov = fit.coefficient_covariance * (sigma2 / s2)
    chol = np.linalg.cholesky(cov + 1e-14 * np.eye(X.p) * max(sigma2, 1.0))
    beta = fit.coefficients + chol @ rng.standard_normal(X.p)
    return PosteriorDraw(fit.names, beta, float(np.sqrt(sigma2)), rng_tag)


def screen_structural_columns(values, names, protect_first=True):
    """Cheaply drop constant columns and exact duplicates (keeping the first
    of each duplicate group). Catches the common structural deficiencies of
    event-indicator designs without a full rank scan; returns
    (values, names, dropped).
    """
    n_cols = values.shape[1]
    keep = np.ones(n_cols, dtype=bool)
    span = values.max(axis=0) - values.min(axis=0) if values.size else np.zeros(n_cols)
    for c in range(1 if protect_first else 0, n_cols):
        if span[c] == 0:
            keep[c] = False
    sums = values.sum(axis=0)
    for c in range(n_cols):
        if not keep[c]:
            continue
        for d in range(c + 1, n_cols):
            if keep[d] and sums[c] == sums[d] and np.array_equal(values[:, c], values[:, d]):
                keep[d] = False
    if keep.all():
        return values, list(names), []
    dropped = [n for n, k in zip(names, keep) if not k]
    return values[:, keep], [n for n, k in zip(names, keep) if k], dropped


def drop_redundant_columns(X, prefer="first"):
    """Greedily remove exactly collinear columns from a DesignMatrix.

    prefer="first" keeps the earliest independent columns; prefer="last"
    scans from the right, keeping later columns (used where the coefficient
    of the latest event indicator must survive). Returns (reduced, dropped).
    """
    vals, names = X.values, list(X.names)
    order = range(len(names)) if prefer == "first" else range(len(names) - 1, -1, -1)
    kept = []
    basis = np.zeros((vals.shape[0], 0))
    for j in order:
        col = vals[:, j:j + 1]
        trial = np.concatenate([basis, col], axis=1)
        if np.linalg.matrix_rank(trial, tol=_RANK_RTOL * max(1.0, np.abs(trial).max())) > basis.shape[1]:
            kept.append(j)
            basis = trial
    kept = sorted(kept)
    dropped = [names[j] for j in range(len(names)) if j not in kept]
    reduced = DesignMatrix(tuple(names[j] for j in kept), vals[:, kept])
    return reduced, dropped
