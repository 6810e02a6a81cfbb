"""Parametric standardization: fit pooled models for the time-varying
covariates and the final outcome (post-event rows included), then simulate
every subject forward under each arm with the event indicator and
weeks-since-event forced to zero, and average.

Model fits are complete-case per model. Each subject's baseline row seeds
the simulated cohort (replicated ``copies`` times per arm); simulated values
draw normal noise at the fitted residual SD unless deterministic-mean mode
is on. Standard errors bootstrap the entire pipeline: resample subjects,
refit every model, resimulate, refit the analysis regression.

Covariates follow the pooled long-format specification: treatment, the
event indicator (binary, or three category indicators), weeks since the
event, baseline covariates per method tier, and lag-1 plus running-average
history of each time-varying variable. Because the schema carries no
baseline FPG/eGFR measurement, those covariates get a lag-free first-visit
submodel. A ``saturated`` mode replaces the covariate structure with
per-visit full interactions of (arm, baseline HbA1c, earlier outcomes);
it exists to make the estimator exact on small discrete instances.
"""

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .data import BASELINE_COLS, build_ice_history, hba1c_lag_features, timevarying_lag_features
from .errors import IcefreeError, InsufficientCompleteCasesError, SimulationError
from .inference import EstimateTriple, ancova_estimates
from .errors import RankDeficientError
from .numerics import DesignMatrix, drop_redundant_columns, fit_ols

log = logging.getLogger(__name__)

METHOD_TIERS = {9: 1, 10: 3, 11: 3}
METHOD_ICE_MODE = {9: "binary", 10: "binary", 11: "categorical"}

_BASELINE_FACTORS = ("age", "sex", "bmi_1", "bmi_2", "sbp", "duration", "cpeptide")


@dataclass(frozen=True)
class PooledModel:
    name: str
    terms: tuple  # each term multiplies the named factors
    coefficients: np.ndarray
    resid_sd: float
    n_rows: int


@dataclass(frozen=True)
class GformulaModels:
    y_model: PooledModel
    outcome_model: PooledModel
    fpg_model: PooledModel | None = None
    egfr_model: PooledModel | None = None
    fpg_first: PooledModel | None = None
    egfr_first: PooledModel | None = None


def _ice_terms(ice_mode):
    if ice_mode == "categorical":
        return [("e1",), ("e2",), ("e3",)]
    return [("e",)]


def model_terms(tier, ice_mode, response):
    terms = [("const",), ("arm",)] + _ice_terms(ice_mode) + [("w",), ("hba1c_base",)]
    terms += [("prev_y",), ("avg_y",)]
    if tier >= 3:
        terms += [(f,) for f in _BASELINE_FACTORS]
        terms += [("prev_fpg",), ("avg_fpg",), ("prev_egfr",), ("avg_egfr",)]
    return tuple(terms)


def first_visit_terms(tier):
    terms = [("const",), ("arm",), ("hba1c_base",)]
    if tier >= 3:
        terms += [(f,) for f in _BASELINE_FACTORS]
    return tuple(terms)


def saturated_terms(K):
    """Per-visit full interactions of (arm, baseline, earlier outcomes)."""
    terms = []
    for v in range(1, K + 1):
        factors = ["arm", "hba1c_base"] + [f"y_{j}" for j in range(1, v)]
        for r in range(len(factors) + 1):
            for combo in itertools.combinations(factors, r):
                terms.append((f"visit_{v}",) + combo)
    return tuple(terms)


def saturated_outcome_terms(K):
    factors = ["arm", "hba1c_base"] + [f"y_{j}" for j in range(1, K)]
    terms = []
    for r in range(len(factors) + 1):
        for combo in itertools.combinations(factors, r):
            terms.append(("const",) + combo if combo else ("const",))
    return tuple(terms)


def _term_values(factors, terms, n_rows):
    cols = np.empty((n_rows, len(terms)))
    for j, term in enumerate(terms):
        col = np.ones(n_rows)
        for f in term:
            if f != "const":
                col = col * factors[f]
        cols[:, j] = col
    return cols


def _fit_factors(dataset, ice_mode):
    """Per-(subject, visit) factor arrays, flattened subject-major."""
    n, K = dataset.n, dataset.K
    frame = dataset.frame
    hist = build_ice_history(dataset)
    _, prev_y, avg_y = hba1c_lag_features(dataset)
    prev_fpg, avg_fpg = timevarying_lag_features(dataset, "fpg")
    prev_egfr, avg_egfr = timevarying_lag_features(dataset, "egfr")

    def rep(col):
        return np.repeat(frame[col].to_numpy(dtype=float), K)

    # the rescue decision at a visit follows that visit's measurement, so the
    # event status relevant to the measurement is "event at an EARLIER visit";
    # weeks-since is already 0 at the occurrence visit by construction
    active = np.zeros_like(hist.binary, dtype=float)
    active[:, 1:] = hist.binary[:, :-1]
    active_cat = np.zeros_like(hist.categorical, dtype=float)
    active_cat[:, 1:] = hist.categorical[:, :-1]

    bmi = frame["bmi_cat"].to_numpy(dtype=float)
    factors = {
        "arm": rep("arm"),
        "hba1c_base": rep("hba1c_base"),
        "age": rep("age"),
        "sex": rep("sex"),
        "sbp": rep("sbp"),
        "duration": rep("duration"),
        "cpeptide": rep("cpeptide"),
        "bmi_1": np.repeat((bmi == 1).astype(float), K),
        "bmi_2": np.repeat((bmi == 2).astype(float), K),
        "e": active.ravel(),
        "e1": (active_cat == 1).astype(float).ravel(),
        "e2": (active_cat == 2).astype(float).ravel(),
        "e3": (active_cat == 3).astype(float).ravel(),
        "w": hist.weeks_since.ravel(),
        "prev_y": prev_y.ravel(),
        "avg_y": avg_y.ravel(),
        "prev_fpg": prev_fpg.ravel(),
        "avg_fpg": avg_fpg.ravel(),
        "prev_egfr": prev_egfr.ravel(),
        "avg_egfr": avg_egfr.ravel(),
    }
    visit_idx = np.tile(np.arange(1, K + 1), n)
    for v in range(1, K + 1):
        factors[f"visit_{v}"] = (visit_idx == v).astype(float)
    y = dataset.y_matrix()
    for j in range(1, K + 1):
        factors[f"y_{j}"] = np.repeat(y[:, j - 1], K)
    responses = {
        "y": y.ravel(),
        "fpg": frame[[f"fpg{k}" for k in range(1, K + 1)]].to_numpy(dtype=float).ravel(),
        "egfr": frame[[f"egfr{k}" for k in range(1, K + 1)]].to_numpy(dtype=float).ravel(),
    }
    return factors, responses, visit_idx


def _fit_one(name, terms, factors, response, row_mask):
    X_full = _term_values(factors, terms, len(response))
    finite = np.isfinite(response) & np.all(np.isfinite(X_full), axis=1) & row_mask
    n_ok = int(finite.sum())
    if n_ok < len(terms):
        raise InsufficientCompleteCasesError(name)
    names = tuple("*".join(t) for t in terms)
    dm = DesignMatrix(names, X_full[finite])
    try:
        fit = fit_ols(dm, response[finite])
        coefs = fit.coefficients
    except RankDeficientError:
        # structurally empty columns (e.g. no events anywhere) or absent
        # interaction cells: dropped terms keep a zero coefficient
        reduced, dropped = drop_redundant_columns(dm, prefer="first")
        log.warning("model %s dropped collinear terms %s", name, dropped)
        fit = fit_ols(reduced, response[finite])
        coefs = np.zeros(len(terms))
        for nm, c in zip(reduced.names, fit.coefficients):
            coefs[names.index(nm)] = c
    return PooledModel(
        name=name, terms=terms, coefficients=coefs,
        resid_sd=float(np.sqrt(fit.residual_variance)), n_rows=n_ok)


def fit_pooled_models(dataset, method_id, saturated=False):
    """One pooled linear model per time-varying variable plus the final-visit
    outcome model; rows with any missing response or covariate are dropped
    per model."""
    tier = METHOD_TIERS[method_id]
    ice_mode = METHOD_ICE_MODE[method_id]
    K = dataset.K
    factors, responses, visit_idx = _fit_factors(dataset, ice_mode)
    all_rows = np.ones(len(visit_idx), dtype=bool)
    last_rows = visit_idx == K
    if saturated:
        y_model = _fit_one("y", saturated_terms(K), factors, responses["y"], all_rows)
        outcome = _fit_one("y_final", saturated_outcome_terms(K), factors,
                           responses["y"], last_rows)
        return GformulaModels(y_model=y_model, outcome_model=outcome)
    terms = model_terms(tier, ice_mode, "y")
    if tier < 3:
        y_model = _fit_one("y", terms, factors, responses["y"], all_rows)
        outcome = _fit_one("y_final", terms, factors, responses["y"], last_rows)
        return GformulaModels(y_model=y_model, outcome_model=outcome)
    # covariate models first, in the within-visit causal order
    later_rows = visit_idx >= 2
    fpg_first = _fit_one("fpg_first", first_visit_terms(tier), factors,
                         responses["fpg"], visit_idx == 1)
    fpg_model = _fit_one("fpg", terms, factors, responses["fpg"], later_rows)
    egfr_first = _fit_one("egfr_first", first_visit_terms(tier), factors,
                          responses["egfr"], visit_idx == 1)
    egfr_model = _fit_one("egfr", terms, factors, responses["egfr"], later_rows)
    y_model = _fit_one("y", terms, factors, responses["y"], all_rows)
    outcome = _fit_one("y_final", terms, factors, responses["y"], last_rows)
    return GformulaModels(
        y_model=y_model,
        outcome_model=outcome,
        fpg_model=fpg_model,
        egfr_model=egfr_model,
        fpg_first=fpg_first,
        egfr_first=egfr_first,
    )


def _predict(model, factors, n_rows):
    X = _term_values(factors, model.terms, n_rows)
    return X @ model.coefficients


def simulate_cohort(models, dataset, copies=10, rng=None, deterministic=False):
    """Forward-simulate both arms for every subject under no events.

    Returns (arm, hba1c_base, y_final) arrays of length 2 * n * copies. The
    event indicator and weeks-since-event stay exactly zero on every
    simulated row.
    """
    rng = rng if rng is not None else np.random.default_rng()
    frame = dataset.frame
    n, K = dataset.n, dataset.K
    reps = 2 * copies
    idx = np.repeat(np.arange(n), reps)
    n_rows = n * reps
    arm = np.tile(np.repeat([1.0, 0.0], copies), n)
    bmi = frame["bmi_cat"].to_numpy(dtype=float)[idx]
    base = frame["hba1c_base"].to_numpy(dtype=float)[idx]
    factors = {
        "arm": arm,
        "hba1c_base": base,
        "age": frame["age"].to_numpy(dtype=float)[idx],
        "sex": frame["sex"].to_numpy(dtype=float)[idx],
        "sbp": frame["sbp"].to_numpy(dtype=float)[idx],
        "duration": frame["duration"].to_numpy(dtype=float)[idx],
        "cpeptide": frame["cpeptide"].to_numpy(dtype=float)[idx],
        "bmi_1": (bmi == 1).astype(float),
        "bmi_2": (bmi == 2).astype(float),
        "e": np.zeros(n_rows), "e1": np.zeros(n_rows),
        "e2": np.zeros(n_rows), "e3": np.zeros(n_rows),
        "w": np.zeros(n_rows),
    }
    for v in range(1, K + 1):
        factors[f"visit_{v}"] = np.zeros(n_rows)
        factors[f"y_{v}"] = np.zeros(n_rows)  # placeholder until simulated

    def draw(model, visit):
        mean = _predict(model, factors, n_rows)
        if deterministic or model.resid_sd == 0.0:
            out = mean
        else:
            out = mean + model.resid_sd * rng.standard_normal(n_rows)
        if not np.all(np.isfinite(out)):
            raise SimulationError(f"non-finite simulated {model.name} at visit {visit}")
        return out

    # history trackers mirror the fit-time lag conventions: the HbA1c history
    # starts at baseline; FPG/eGFR have no baseline so their visit-1 value
    # stands in for its own lag
    abs_sum = base.copy()
    y_prev_abs = base.copy()
    fpg_prev = fpg_prev_sum = egfr_prev = egfr_prev_sum = None
    y_cur = None
    for k in range(1, K + 1):
        factors[f"visit_{k}"] = np.ones(n_rows)
        factors["prev_y"] = y_prev_abs
        factors["avg_y"] = abs_sum / k
        if models.fpg_model is not None:
            if k == 1:
                fpg_cur = draw(models.fpg_first, k)
                egfr_cur = draw(models.egfr_first, k)
                fpg_prev_sum = fpg_cur.copy()
                egfr_prev_sum = egfr_cur.copy()
                factors["prev_fpg"] = fpg_cur
                factors["avg_fpg"] = fpg_cur
                factors["prev_egfr"] = egfr_cur
                factors["avg_egfr"] = egfr_cur
            else:
                fpg_prev_sum = fpg_prev_sum + fpg_prev
                egfr_prev_sum = egfr_prev_sum + egfr_prev
                factors["prev_fpg"] = fpg_prev
                factors["avg_fpg"] = fpg_prev_sum / k
                factors["prev_egfr"] = egfr_prev
                factors["avg_egfr"] = egfr_prev_sum / k
                fpg_cur = draw(models.fpg_model, k)
                egfr_cur = draw(models.egfr_model, k)
            fpg_prev = fpg_cur
            egfr_prev = egfr_cur
        y_cur = draw(models.outcome_model if k == K else models.y_model, k)
        factors[f"y_{k}"] = y_cur
        y_abs = base + y_cur
        abs_sum = abs_sum + y_abs
        y_prev_abs = y_abs
        factors[f"visit_{k}"] = np.zeros(n_rows)
    assert not factors["e"].any() and not factors["w"].any()
    return arm, base, y_cur


def _triple_from_cohort(arm, base, y_final, analysis_covariates):
    if analysis_covariates:
        return ancova_estimates(y_final, arm, base, ("hba1c_base",))
    return ancova_estimates(y_final, arm)


def analyze_gformula(dataset, method_id, b=500, copies=10, seed=0,
                     deterministic=False, saturated=False,
                     analysis_covariates=("hba1c_base",)):
    """Methods 9-11: point estimate from the simulated cohort's regression of
    the final outcome on treatment and baseline HbA1c; SE from bootstrapping
    the whole pipeline (model fits, simulation, analysis regression)."""
    rng = np.random.default_rng(seed)
    point_rng, boot_rng = rng.spawn(2)
    models = fit_pooled_models(dataset, method_id, saturated=saturated)
    arm, base, y_final = simulate_cohort(
        models, dataset, copies=copies, rng=point_rng, deterministic=deterministic)
    a1, a0, eff, *_ = _triple_from_cohort(arm, base, y_final, analysis_covariates)

    reps = []
    dropped = 0
    frame = dataset.frame
    child = boot_rng.spawn(b)
    for i in range(b):
        crng = child[i]
        sel = crng.integers(0, dataset.n, size=dataset.n)
        boot_frame = frame.iloc[sel].reset_index(drop=True)
        boot_frame["id"] = [f"b{j}" for j in range(dataset.n)]
        boot_ds = dataset.with_frame(boot_frame)
        try:
            bm = fit_pooled_models(boot_ds, method_id, saturated=saturated)
            ba, bb, by = simulate_cohort(
                bm, boot_ds, copies=copies, rng=crng, deterministic=deterministic)
            r1, r0, re, *_ = _triple_from_cohort(ba, bb, by, analysis_covariates)
            reps.append((r1, r0, re))
        except IcefreeError:
            dropped += 1
    if b > 0 and len(reps) < 0.9 * b:
        from .errors import DegenerateBootstrapError

        raise DegenerateBootstrapError(f"{dropped}/{b} bootstrap replicates failed")
    if len(reps) > 1:
        se = np.vstack(reps).std(axis=0, ddof=1)
    else:
        se = np.zeros(3)
    return EstimateTriple(
        method_id=method_id,
        arm1_mean=a1, arm1_se=float(se[0]),
        arm0_mean=a0, arm0_se=float(se[1]),
        effect=eff, effect_se=float(se[2]),
        diagnostics={"dropped_replicates": dropped, "b": b, "copies": copies,
                     "deterministic": deterministic},
    )
