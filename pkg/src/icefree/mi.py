"""Chained-equations multiple imputation on the wide table, with normal
posterior draws per conditional, plus the two pooling rules used across the
package (Rubin's rule and the synthetic-data variance).
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data import BASELINE_COLS, TrialDataset
from .errors import (
    InsufficientImputationsError,
    InvalidDataError,
    RankDeficientError,
    UnimputableVariableError,
)
from .numerics import (
    DesignMatrix,
    draw_posterior_linear,
    drop_redundant_columns,
    screen_structural_columns,
)

log = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 5


@dataclass(frozen=True)
class PredictorMatrix:
    """0/1 matrix over variables: entry (i, j) = 1 means j predicts i.

    Variables with an all-zero row are predictors only and are never imputed.
    """

    variables: tuple
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=int)
        v = len(self.variables)
        if matrix.shape != (v, v):
            raise InvalidDataError("predictor matrix must be square over the variables")
        if np.any(np.diag(matrix) != 0):
            raise InvalidDataError("predictor matrix diagonal must be zero")
        if not set(np.unique(matrix)) <= {0, 1}:
            raise InvalidDataError("predictor matrix entries must be 0/1")
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def from_predictors(cls, variables, mapping):
        variables = tuple(variables)
        idx = {v: i for i, v in enumerate(variables)}
        matrix = np.zeros((len(variables), len(variables)), dtype=int)
        for target, preds in mapping.items():
            for p in preds:
                matrix[idx[target], idx[p]] = 1
        return cls(variables, matrix)

    def predictors_of(self, name):
        i = self.variables.index(name)
        return tuple(v for j, v in enumerate(self.variables) if self.matrix[i, j] == 1)

    def targets(self):
        return tuple(v for i, v in enumerate(self.variables) if self.matrix[i].any())

    def is_sequential_forward(self):
        """Strictly lower-triangular in the stated variable order."""
        return not np.any(np.triu(self.matrix))


@dataclass(frozen=True)
class ImputationStack:
    """M completed copies of a source dataset sharing subject identity."""

    source: TrialDataset
    datasets: tuple
    m: int
    iterations: int

    def __post_init__(self):
        if self.m != len(self.datasets):
            raise InvalidDataError("stack size does not match M")


@dataclass(frozen=True)
class PooledEstimate:
    point: float
    total_variance: float
    within_variance: float
    between_variance: float
    m: int
    variance_fallback: bool = False

    @property
    def se(self):
        return float(np.sqrt(max(self.total_variance, 0.0)))


def pool_rubin(estimates, variances):
    """Rubin's rule: T = vbar + (1 + 1/M) * b."""
    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    m = estimates.shape[0]
    if m < 2:
        raise InsufficientImputationsError("pooling needs M >= 2")
    if np.any(variances < 0):
        raise InvalidDataError("negative within-imputation variance")
    point = float(estimates.mean())
    within = float(variances.mean())
    between = float(estimates.var(ddof=1))
    total = within + (1.0 + 1.0 / m) * between
    return PooledEstimate(point, total, within, between, m)


def pool_synthetic(estimates, variances):
    """Synthetic-data pooling: T = (1 + 1/M) * b - vbar, floored at vbar / M.

    The floor keeps confidence intervals defined when the between-variance is
    too small for the subtraction; engaging it is flagged in the result.
    """
    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    m = estimates.shape[0]
    if m < 2:
        raise InsufficientImputationsError("pooling needs M >= 2")
    point = float(estimates.mean())
    within = float(variances.mean())
    between = float(estimates.var(ddof=1))
    raw = (1.0 + 1.0 / m) * between - within
    floor = within / m
    fallback = raw < floor - 1e-12 * max(1.0, abs(floor))
    total = max(raw, floor)
    if fallback:
        log.warning("synthetic variance %.3g below floor %.3g; floor used", raw, floor)
    return PooledEstimate(point, total, within, between, m, variance_fallback=bool(fallback))


def _expand_design_columns(frame, names):
    """Numeric design columns for the named variables; BMI category expands
    to two indicator columns."""
    cols, out = [], []
    for name in names:
        if name == "bmi_cat":
            vals = frame["bmi_cat"].to_numpy(dtype=float)
            out.append((vals == 1).astype(float))
            out.append((vals == 2).astype(float))
            cols.extend(["bmi_1", "bmi_2"])
        else:
            out.append(frame[name].to_numpy(dtype=float))
            cols.append(name)
    return cols, np.column_stack(out) if out else np.empty((len(frame), 0))


def default_predictor_matrix(dataset, tier=1, include_ice=None):
    """Predictor structure for the wide imputation models.

    tier 1: each y_k conditions on treatment, baseline HbA1c and the y values
    at all other visits. tier 2 adds the remaining baseline covariates; tier 3
    additionally treats the time-varying fpg/egfr columns as variables (both
    predictors and imputation targets). include_ice="binary"/"categorical"
    adds the per-visit ICE indicator columns as predictors (used by the
    pipelines that exploit post-ICE data).
    """
    K = dataset.K
    y_cols = [f"y{k}" for k in range(1, K + 1)]
    always = ["arm", "hba1c_base"]
    if tier >= 2:
        always += [c for c in BASELINE_COLS if c != "hba1c_base"]
    tv_cols = []
    if tier >= 3:
        tv_cols = [f"fpg{k}" for k in range(1, K + 1)] + [f"egfr{k}" for k in range(1, K + 1)]
    ice_cols = []
    if include_ice == "binary":
        ice_cols = [f"ice{k}" for k in range(1, K + 1)]
    elif include_ice == "categorical":
        ice_cols = [f"ice{k}_{l}" for k in range(1, K + 1) for l in (1, 2, 3)]
    variables = tuple(always + ice_cols + y_cols + tv_cols)
    mapping = {}
    for c in y_cols + tv_cols:
        others = [v for v in y_cols + tv_cols if v != c]
        mapping[c] = always + ice_cols + others
    return PredictorMatrix.from_predictors(variables, mapping)


def attach_ice_columns(dataset, ice_mode="binary"):
    """Return a frame with derived ICE indicator columns appended."""
    from .data import build_ice_history

    hist = build_ice_history(dataset)
    frame = dataset.frame.copy()
    K = dataset.K
    if ice_mode == "binary":
        for k in range(1, K + 1):
            frame[f"ice{k}"] = hist.binary[:, k - 1]
    elif ice_mode == "categorical":
        for k in range(1, K + 1):
            for l in (1, 2, 3):
                frame[f"ice{k}_{l}"] = (hist.categorical[:, k - 1] == l).astype(int)
    else:
        raise InvalidDataError(f"unknown ice mode {ice_mode!r}")
    return frame


def _draw_conditional(work, target, predictors, missing_mask, rng, tag):
    """One chained-equations update of a single variable.

    Fits on the originally observed rows only; missing_mask marks the cells
    to draw (the work array already holds current filled-in values).
    """
    y = work[target]
    mis = missing_mask
    obs = ~mis
    names, values = [], [np.ones(len(y))]
    names.append("const")
    for p in predictors:
        if p == "bmi_cat":
            vals = work[p]
            names += ["bmi_1", "bmi_2"]
            values += [(vals == 1).astype(float), (vals == 2).astype(float)]
        else:
            names.append(p)
            values.append(work[p])
    X = np.column_stack(values)
    # constant or duplicated predictor columns (e.g. event-type dummies with
    # few events) are structurally redundant; drop them up front so the
    # expensive collinearity fallback stays rare
    _, kept_names, dropped = screen_structural_columns(X[obs], names)
    if dropped:
        log.debug("imputation model for %s pre-dropped %s", target, dropped)
        idx = [names.index(nm) for nm in kept_names]
        X = X[:, idx]
        names = kept_names
    dm = DesignMatrix(tuple(names), X)
    dm_obs = DesignMatrix(dm.names, X[obs])
    try:
        draw = draw_posterior_linear(dm_obs, y[obs], rng, rng_tag=tag)
        used = dm
    except RankDeficientError:
        reduced, dropped = drop_redundant_columns(dm_obs, prefer="first")
        log.warning("imputation model for %s dropped collinear columns %s", target, dropped)
        draw = draw_posterior_linear(reduced, y[obs], rng, rng_tag=tag)
        used = dm.select(reduced.names)
    mean = used.values[mis] @ draw.coefficients
    noise = draw.residual_sd * rng.standard_normal(int(mis.sum()))
    imputed = y.copy()
    imputed[mis] = mean + noise
    if not np.all(np.isfinite(imputed)):
        raise InvalidDataError(f"non-finite imputation for {target}")
    return imputed


def impute(dataset, predictor_matrix, m, iterations=DEFAULT_ITERATIONS, rng=None, frame=None):
    """Gibbs-style chained passes over the imputable variables, visit order.

    Each conditional is a Bayesian linear regression draw; missing cells get
    the drawn mean plus normal noise at the drawn residual SD. Cells observed
    in the source are never altered. ``frame`` may supply derived columns
    (e.g. ICE indicators) not present in the dataset schema.
    """
    rng = rng if rng is not None else np.random.default_rng()
    source = frame if frame is not None else dataset.frame
    targets = [v for v in predictor_matrix.targets() if source[v].isna().any()]
    needed = set(predictor_matrix.variables)
    for v in needed:
        if v not in source.columns:
            raise InvalidDataError(f"variable {v!r} not present in data")
    for v in targets:
        if not np.isfinite(source[v].to_numpy(dtype=float)).any():
            raise UnimputableVariableError(f"variable {v!r} has no observed values")
    for v in predictor_matrix.variables:
        preds_of_someone = any(v in predictor_matrix.predictors_of(t) for t in predictor_matrix.targets())
        if preds_of_someone and v not in targets and source[v].isna().any():
            raise UnimputableVariableError(f"predictor {v!r} has missing values and is not imputed")

    completed = []
    child_rngs = rng.spawn(m)
    base = {v: source[v].to_numpy(dtype=float) for v in predictor_matrix.variables}
    masks = {v: ~np.isfinite(base[v]) for v in targets}
    for m_i in range(m):
        crng = child_rngs[m_i]
        work = {v: arr.copy() for v, arr in base.items()}
        # start from random draws of each variable's observed marginal
        for v in targets:
            y = work[v]
            mis = masks[v]
            pool = y[~mis]
            y[mis] = crng.choice(pool, size=int(mis.sum()), replace=True)
        n_pass = iterations if targets else 0
        for it in range(n_pass):
            for v in targets:
                work[v] = _draw_conditional(
                    work, v, predictor_matrix.predictors_of(v), masks[v], crng,
                    tag=f"m{m_i}/it{it}/{v}")
        out = dataset.frame.copy()
        for v in targets:
            if v in out.columns:
                out[v] = work[v]
        completed.append(dataset.with_frame(out))
    return ImputationStack(source=dataset, datasets=tuple(completed), m=m, iterations=iterations)


METHOD_TIERS = {2: 1, 3: 2, 4: 3}


def analyze_mi(dataset, method_id, m=100, iterations=DEFAULT_ITERATIONS, seed=0):
    """Methods 2-4: impute the masked wide data, then pool the per-copy
    final-visit regression on treatment and baseline HbA1c by Rubin's rules.

    The method id selects the imputation-model covariate tier; the analysis
    model never changes. ``dataset`` must already be post-ICE masked.
    """
    from .inference import EstimateTriple, ancova_estimates

    rng = np.random.default_rng(seed)
    pm = default_predictor_matrix(dataset, tier=METHOD_TIERS[method_id])
    stack = impute(dataset, pm, m=m, iterations=iterations, rng=rng)
    K = dataset.K
    arm = dataset.frame["arm"].to_numpy(dtype=float)
    base = dataset.frame["hba1c_base"].to_numpy(dtype=float)
    points = np.empty((m, 3))
    variances = np.empty((m, 3))
    for i, copy in enumerate(stack.datasets):
        y = copy.frame[f"y{K}"].to_numpy(dtype=float)
        a1, a0, eff, s1, s0, se = ancova_estimates(y, arm, base, ("hba1c_base",))
        points[i] = (a1, a0, eff)
        variances[i] = (s1 ** 2, s0 ** 2, se ** 2)
    pooled = [pool_rubin(points[:, j], variances[:, j]) for j in range(3)]
    return EstimateTriple(
        method_id=method_id,
        arm1_mean=pooled[0].point,
        arm1_se=pooled[0].se,
        arm0_mean=pooled[1].point,
        arm0_se=pooled[1].se,
        effect=pooled[2].point,
        effect_se=pooled[2].se,
        diagnostics={"m": m, "iterations": iterations,
                     "between_variance": pooled[2].between_variance},
    )
