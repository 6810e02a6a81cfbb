"""Inverse-probability weighting of event-free completers.

A single pooled event model (logistic, or multinomial when rescue and
discontinuation are modelled separately) is fitted across all at-risk
person-visits of each completed dataset; each subject's weight is the product
of inverse no-event probabilities over the visits at which they remained
event-free. The analysis is a weighted regression of the final outcome on
treatment and baseline HbA1c among subjects who stayed event-free
throughout. Standard errors bootstrap the whole pipeline (event model plus
weighted regression) within every imputed copy, then pool by Rubin's rules
with the bootstrap variance as the within-imputation variance.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import BASELINE_COLS, build_ice_history, hba1c_lag_features
from .errors import DegenerateBootstrapError, DegenerateOutcomeError, IcefreeError
from .inference import EstimateTriple, ancova_estimates
from .mi import default_predictor_matrix, impute, pool_rubin
from .numerics import DesignMatrix, _expit, _irls_core, fit_logistic, fit_multinomial

log = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-6
METHOD_TIERS = {5: 1, 6: 2, 7: 3, 8: 3}


@dataclass(frozen=True)
class WeightRecord:
    subject_id: str
    p_no_ice: tuple  # per at-risk visit at which the subject stayed event-free
    weight: float
    floored: bool
    truncated: bool


def build_at_risk_table(dataset):
    """Person-visit rows while at risk: all visits up to and including the
    first event, or the full schedule for event-free subjects.

    The HbA1c history columns are on the absolute scale with visit-1 history
    equal to the baseline value.
    """
    hist = build_ice_history(dataset)
    cur, prev, run = hba1c_lag_features(dataset)
    n, K = hist.binary.shape
    first = hist.first_visit
    last = np.where(first > 0, first, K)
    rows = []
    frame = dataset.frame
    fpg = frame[[f"fpg{k}" for k in range(1, K + 1)]].to_numpy(dtype=float)
    egfr = frame[[f"egfr{k}" for k in range(1, K + 1)]].to_numpy(dtype=float)
    visit_grid = np.arange(1, K + 1)
    inc = visit_grid[None, :] <= last[:, None]  # (n, K) at-risk mask
    subj_idx, visit_idx = np.nonzero(inc)
    table = pd.DataFrame({
        "subject": subj_idx,
        "visit": visit_grid[visit_idx],
        "event": hist.binary[subj_idx, visit_idx],
        "event_cat": hist.categorical[subj_idx, visit_idx],
        "arm": frame["arm"].to_numpy(dtype=float)[subj_idx],
        "hba1c_cur": cur[subj_idx, visit_idx],
        "hba1c_prev": prev[subj_idx, visit_idx],
        "hba1c_avg": run[subj_idx, visit_idx],
        "fpg": fpg[subj_idx, visit_idx],
        "egfr": egfr[subj_idx, visit_idx],
    })
    for col in BASELINE_COLS:
        table[col] = frame[col].to_numpy(dtype=float)[subj_idx]
    return table


def weight_model_columns(method_id):
    cols = ["arm", "hba1c_cur", "hba1c_prev", "hba1c_avg"]
    tier = METHOD_TIERS[method_id]
    if tier >= 2:
        cols += ["age", "sex", "bmi_cat", "sbp", "duration", "cpeptide"]
    if tier >= 3:
        cols += ["fpg", "egfr"]
    return cols


def _design_from_table(table, columns, saturated):
    if saturated:
        keys = table[["visit", *columns]].astype(float).round(9)
        labels = keys.apply(tuple, axis=1)
        cells = {c: i for i, c in enumerate(sorted(set(labels)))}
        values = np.zeros((len(table), len(cells)))
        for r, lab in enumerate(labels):
            values[r, cells[lab]] = 1.0
        names = tuple(f"cell{i}" for i in range(len(cells)))
        return DesignMatrix(names, values)
    names = ["const"]
    cols = [np.ones(len(table))]
    for c in columns:
        if c == "bmi_cat":
            vals = table["bmi_cat"].to_numpy(dtype=float)
            names += ["bmi_1", "bmi_2"]
            cols += [(vals == 1).astype(float), (vals == 2).astype(float)]
        else:
            names.append(c)
            cols.append(table[c].to_numpy(dtype=float))
    return DesignMatrix(tuple(names), np.column_stack(cols))


def fit_weight_model(table, method_id, saturated=False, on_empty="collapse"):
    """Pooled event model over the at-risk rows; multinomial for method 8."""
    X = _design_from_table(table, weight_model_columns(method_id), saturated)
    if method_id == 8:
        fit = fit_multinomial(X, table["event_cat"].to_numpy(dtype=int), n_levels=4,
                              on_empty=on_empty)
    else:
        fit = fit_logistic(X, table["event"].to_numpy(dtype=float))
    return fit, X


def _p_no_event(fit, X):
    proba = fit.predict_proba(X.values)
    if proba.ndim == 2:  # multinomial: probability of the no-event level
        return proba[:, 0]
    return 1.0 - proba


def compute_weights(fit, table, X=None, method_id=5, saturated=False,
                    truncation=None, stabilize_fit=None, stabilize_X=None):
    """Per-subject cumulative inverse no-event probability.

    The product runs over the visits at which the subject remained
    event-free; the visit of occurrence is excluded (the subject leaves the
    analysis set regardless). Probabilities are floored before inversion.
    """
    if X is None:
        X = _design_from_table(table, weight_model_columns(method_id), saturated)
    p = _p_no_event(fit, X)
    floored = p < PROBABILITY_FLOOR
    p = np.maximum(p, PROBABILITY_FLOOR)
    num = None
    if stabilize_fit is not None:
        num = _p_no_event(stabilize_fit, stabilize_X)
    free = table["event"].to_numpy() == 0
    subj = table["subject"].to_numpy()
    n_subj = int(subj.max()) + 1
    log_w = np.zeros(n_subj)
    np.add.at(log_w, subj[free], -np.log(p[free]))
    if num is not None:
        np.add.at(log_w, subj[free], np.log(np.maximum(num[free], PROBABILITY_FLOOR)))
    w = np.exp(log_w)
    truncated = np.zeros(n_subj, dtype=bool)
    if truncation is not None:
        cap = np.quantile(w, truncation)
        truncated = w > cap
        w = np.minimum(w, cap)
    floored_by_subj = np.zeros(n_subj, dtype=bool)
    np.logical_or.at(floored_by_subj, subj[free], floored[free])
    return w, truncated, floored_by_subj


def weight_records(dataset, fit, table, X, **kw):
    """Spec-level view of the weights, one record per subject."""
    w, truncated, floored = compute_weights(fit, table, X=X, **kw)
    p = _p_no_event(fit, X)
    free = table["event"].to_numpy() == 0
    subj = table["subject"].to_numpy()
    ids = dataset.frame["id"].tolist()
    records = []
    for i in range(len(w)):
        mask = (subj == i) & free
        records.append(WeightRecord(
            subject_id=ids[i],
            p_no_ice=tuple(p[mask].tolist()),
            weight=float(w[i]),
            floored=bool(floored[i]),
            truncated=bool(truncated[i]),
        ))
    return records


def _copy_arrays(dataset, method_id, saturated):
    """Precompute everything a bootstrap replicate needs as flat arrays."""
    table = build_at_risk_table(dataset)
    X = _design_from_table(table, weight_model_columns(method_id), saturated)
    hist = build_ice_history(dataset)
    counts = np.bincount(table["subject"].to_numpy(), minlength=dataset.n)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return {
        "X": X.values,
        "X_names": X.names,
        "event": table["event"].to_numpy(dtype=float),
        "event_cat": table["event_cat"].to_numpy(dtype=int),
        "row_arm": table["arm"].to_numpy(dtype=float),
        "counts": counts,
        "offsets": offsets,
        "ice_free": hist.first_visit == 0,
        "y_final": dataset.frame[f"y{dataset.K}"].to_numpy(dtype=float),
        "arm": dataset.frame["arm"].to_numpy(dtype=float),
        "base": dataset.frame["hba1c_base"].to_numpy(dtype=float),
    }


def _gather_rows(arrays, subjects):
    counts = arrays["counts"][subjects]
    total = int(counts.sum())
    ends = np.cumsum(counts)
    starts = ends - counts
    idx = np.repeat(arrays["offsets"][subjects] - starts, counts) + np.arange(total)
    owner = np.repeat(np.arange(len(subjects)), counts)
    return idx, owner


def _estimate_on_subjects(arrays, subjects, method_id, analysis_covariates,
                          truncation, stabilize, on_empty, saturated=False,
                          warm=None):
    idx, owner = _gather_rows(arrays, subjects)
    event = arrays["event"][idx]
    Xv = arrays["X"][idx]
    n_sel = len(subjects)
    if event.sum() == 0:
        w = np.ones(n_sel)  # no events anywhere: everyone keeps weight 1
    else:
        names = arrays["X_names"]
        if saturated:  # resamples can miss whole cells; drop their indicators
            keep = Xv.sum(axis=0) > 0
            Xv = Xv[:, keep]
            names = tuple(n for n, k in zip(names, keep) if k)
        start = warm if (warm is not None and not saturated) else None
        if method_id == 8:
            X = DesignMatrix(names, Xv)
            fit = fit_multinomial(X, arrays["event_cat"][idx], n_levels=4,
                                  on_empty=on_empty, start=start)
            p = _p_no_event(fit, X)
            fit_coefs_out = fit.coefficients
        else:
            beta, _, _ = _irls_core(Xv, names, event, np.ones(len(event)), start)
            p = 1.0 - _expit(Xv @ beta)
            fit_coefs_out = beta
        p = np.maximum(p, PROBABILITY_FLOOR)
        num = None
        if stabilize:
            Xs = np.column_stack([np.ones(len(idx)), arrays["row_arm"][idx]])
            sbeta, _, _ = _irls_core(Xs, ("const", "arm"), event, np.ones(len(event)), None)
            num = np.maximum(1.0 - _expit(Xs @ sbeta), PROBABILITY_FLOOR)
        free = event == 0
        log_w = np.zeros(n_sel)
        np.add.at(log_w, owner[free], -np.log(p[free]))
        if num is not None:
            np.add.at(log_w, owner[free], np.log(num[free]))
        w = np.exp(log_w)
        if truncation is not None:
            w = np.minimum(w, np.quantile(w, truncation))
    completer = arrays["ice_free"][subjects]
    if completer.sum() < 3:
        raise DegenerateOutcomeError("no event-free completers in sample")
    y = arrays["y_final"][subjects][completer]
    arm = arrays["arm"][subjects][completer]
    wts = w[completer]
    if analysis_covariates:
        cov = arrays["base"][subjects][completer]
        a1, a0, eff, s1, s0, se = ancova_estimates(y, arm, cov, ("hba1c_base",), weights=wts)
    else:
        a1, a0, eff, s1, s0, se = ancova_estimates(y, arm, weights=wts)
    fit_coefs = fit_coefs_out if event.sum() > 0 else None
    return np.array([a1, a0, eff]), (s1, s0, se), fit_coefs


def analyze_iptw(dataset, method_id, m=100, b=100, iterations=5, seed=0,
                 truncation=None, stabilize=False, saturated=False,
                 analysis_covariates=("hba1c_base",), on_empty="collapse"):
    """Methods 5-8: impute the masked data, weight, analyze, bootstrap, pool.

    ``dataset`` must already be post-ICE masked. The bootstrap refits both
    the event model and the weighted regression on every replicate.
    """
    rng = np.random.default_rng(seed)
    pm = default_predictor_matrix(dataset, tier=METHOD_TIERS[method_id])
    stack = impute(dataset, pm, m=m, iterations=iterations, rng=rng)
    points = np.empty((m, 3))
    boot_vars = np.empty((m, 3))
    dropped = 0
    total_reps = 0
    copy_rngs = rng.spawn(m)
    for i, copy in enumerate(stack.datasets):
        arrays = _copy_arrays(copy, method_id, saturated)
        all_subjects = np.arange(copy.n)
        points[i], _, warm = _estimate_on_subjects(
            arrays, all_subjects, method_id, analysis_covariates,
            truncation, stabilize, on_empty, saturated)
        reps = []
        crng = copy_rngs[i]
        for _ in range(b):
            sel = crng.integers(0, copy.n, size=copy.n)
            try:
                est, _, _ = _estimate_on_subjects(
                    arrays, sel, method_id, analysis_covariates,
                    truncation, stabilize, on_empty, saturated, warm=warm)
                reps.append(est)
            except IcefreeError:
                dropped += 1
            total_reps += 1
        if len(reps) < 0.9 * b:
            raise DegenerateBootstrapError(
                f"{b - len(reps)}/{b} replicates failed in imputation {i}")
        reps = np.vstack(reps)
        boot_vars[i] = reps.var(axis=0, ddof=1)
    pooled = [pool_rubin(points[:, j], boot_vars[:, j]) for j in range(3)]
    return EstimateTriple(
        method_id=method_id,
        arm1_mean=pooled[0].point,
        arm1_se=pooled[0].se,
        arm0_mean=pooled[1].point,
        arm0_se=pooled[1].se,
        effect=pooled[2].point,
        effect_se=pooled[2].se,
        diagnostics={
            "dropped_replicates": dropped,
            "total_replicates": total_reps,
            "m": m,
            "b": b,
        },
    )
