"""Standardization through two-stage multiple imputation.

Stage one imputes the actual missing data (post-event values included) with
chained equations. In each completed copy every subject is then duplicated
twice, once per assigned arm, with all event indicators set to zero and all
outcomes (plus time-varying covariates, for the wider methods) blanked.
Stage two imputes the blanked counterfactual values once, sequentially
forward in time, from per-visit regressions fitted on the original rows
only. The analysis regression runs on the duplicated rows and the copies are
pooled with the synthetic-data variance rather than Rubin's rule, because
the imputation and analysis samples differ by construction.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import BASELINE_COLS
from .errors import InvalidDataError, RankDeficientError
from .inference import EstimateTriple, ancova_estimates
from .mi import attach_ice_columns, default_predictor_matrix, impute, pool_synthetic
from .numerics import (
    DesignMatrix,
    draw_posterior_linear,
    drop_redundant_columns,
    screen_structural_columns,
)

log = logging.getLogger(__name__)

METHOD_TIERS = {12: 1, 13: 3, 14: 3}
METHOD_ICE_MODE = {12: "binary", 13: "binary", 14: "categorical"}

PROVENANCE_COL = "counterfactual"


def duplicate_counterfactual_rows(dataset, tier=1):
    """Append two event-free copies of every subject, one per arm.

    Counterfactual rows keep the original baselines, zero all event flags,
    and blank the outcomes (and fpg/egfr when tier >= 3). Returns a plain
    frame with a provenance column; original rows are bit-identical to the
    input and flagged 0.
    """
    frame = dataset.frame
    if frame[[f"y{k}" for k in range(1, dataset.K + 1)]].isna().any().any():
        raise InvalidDataError("stage-one copy still has missing outcomes")
    K = dataset.K
    out = frame.copy()
    out[PROVENANCE_COL] = 0
    dup_cols = [f"y{k}" for k in range(1, K + 1)]
    if tier >= 3:
        dup_cols += [f"fpg{k}" for k in range(1, K + 1)]
        dup_cols += [f"egfr{k}" for k in range(1, K + 1)]
    pieces = [out]
    for arm in (1, 0):
        dup = frame.copy()
        dup["id"] = [f"{i}_cf{arm}" for i in frame["id"]]
        dup["arm"] = arm
        for k in range(1, K + 1):
            dup[f"rescue{k}"] = 0
            dup[f"disc{k}"] = 0
        dup[dup_cols] = np.nan
        dup[PROVENANCE_COL] = 1
        pieces.append(dup)
    return pd.concat(pieces, ignore_index=True)


def _stage2_predictors(K, k, tier, ice_mode, within_visit):
    """Strictly forward-in-time predictor names for the visit-k models.

    Event indicators enter up to the previous visit only: the event decision
    at a visit follows that visit's measurements. ``within_visit`` lists the
    same-visit variables already imputed earlier in the causal order.
    """
    preds = ["arm", "hba1c_base"]
    if tier >= 3:
        preds += [c for c in BASELINE_COLS if c != "hba1c_base"]
    for j in range(1, k):
        preds.append(f"y{j}")
        if tier >= 3:
            preds += [f"fpg{j}", f"egfr{j}"]
        if ice_mode == "categorical":
            preds += [f"ice{j}_{l}" for l in (1, 2, 3)]
        else:
            preds.append(f"ice{j}")
    preds += within_visit
    return preds


def _design(frame_cols, names, n_rows):
    cols = [np.ones(n_rows)]
    out_names = ["const"]
    for name in names:
        if name == "bmi_cat":
            vals = frame_cols["bmi_cat"]
            cols += [(vals == 1).astype(float), (vals == 2).astype(float)]
            out_names += ["bmi_1", "bmi_2"]
        else:
            cols.append(frame_cols[name])
            out_names.append(name)
    return DesignMatrix(tuple(out_names), np.column_stack(cols))


def impute_counterfactuals(augmented, schedule, tier, ice_mode, rng):
    """Fill the counterfactual rows, visit by visit, fitting on originals.

    Within a visit the causal order is FPG, eGFR, then HbA1c change; each
    conditional is a posterior draw plus residual noise, drawn once.
    """
    K = schedule.n_visits
    frame = augmented.copy()
    is_cf = frame[PROVENANCE_COL].to_numpy() == 1
    orig = ~is_cf

    # derived event-indicator columns for the original rows; counterfactual
    # rows are event-free by construction
    rescue = frame[[f"rescue{k}" for k in range(1, K + 1)]].to_numpy(dtype=float)
    disc = frame[[f"disc{k}" for k in range(1, K + 1)]].to_numpy(dtype=float)
    binary = np.maximum(rescue, disc)
    cat = rescue + 2 * disc
    for k in range(1, K + 1):
        if ice_mode == "categorical":
            for l in (1, 2, 3):
                frame[f"ice{k}_{l}"] = (cat[:, k - 1] == l).astype(float)
        else:
            frame[f"ice{k}"] = binary[:, k - 1]

    cols = {c: frame[c].to_numpy(dtype=float) for c in frame.columns if c not in ("id",)}

    def impute_one(target, preds, tag):
        X = _design(cols, preds, len(frame))
        fit_vals = X.values[orig]
        # constant/duplicate columns on the fitting rows (e.g. unobserved
        # event types) are structurally redundant
        _, kept_names, dropped = screen_structural_columns(fit_vals, X.names)
        if dropped:
            log.debug("stage-2 model for %s pre-dropped %s", target, dropped)
            idx = [X.names.index(nm) for nm in kept_names]
            X = DesignMatrix(tuple(kept_names), X.values[:, idx])
            fit_vals = X.values[orig]
        X_fit = DesignMatrix(X.names, fit_vals)
        y_fit = cols[target][orig]
        if not np.all(np.isfinite(y_fit)):
            raise InvalidDataError(f"original rows of {target} not complete")
        try:
            draw = draw_posterior_linear(X_fit, y_fit, rng, rng_tag=tag)
            X_cf = X.values[is_cf]
            names_used = X.names
        except RankDeficientError:
            reduced, dropped = drop_redundant_columns(X_fit, prefer="first")
            log.warning("stage-2 model for %s dropped collinear columns %s", target, dropped)
            draw = draw_posterior_linear(reduced, y_fit, rng, rng_tag=tag)
            keep_idx = [X.names.index(nm) for nm in reduced.names]
            X_cf = X.values[is_cf][:, keep_idx]
            names_used = reduced.names
        mean = X_cf @ draw.coefficients
        vals = cols[target].copy()
        vals[is_cf] = mean + draw.residual_sd * rng.standard_normal(int(is_cf.sum()))
        cols[target] = vals
        frame[target] = vals

    for k in range(1, K + 1):
        done_this_visit = []
        if tier >= 3:
            impute_one(f"fpg{k}", _stage2_predictors(K, k, tier, ice_mode, []), f"fpg{k}")
            done_this_visit.append(f"fpg{k}")
            impute_one(f"egfr{k}", _stage2_predictors(K, k, tier, ice_mode, done_this_visit), f"egfr{k}")
            done_this_visit.append(f"egfr{k}")
        impute_one(f"y{k}", _stage2_predictors(K, k, tier, ice_mode, done_this_visit), f"y{k}")
    return frame


def analyze_gformula_mi(dataset, method_id, m=100, iterations=5, seed=0):
    """Methods 12-14 on the unmasked dataset; see module docstring."""
    tier = METHOD_TIERS[method_id]
    ice_mode = METHOD_ICE_MODE[method_id]
    rng = np.random.default_rng(seed)
    pm = default_predictor_matrix(dataset, tier=tier if tier >= 3 else 1,
                                  include_ice=ice_mode)
    frame_with_ice = attach_ice_columns(dataset, ice_mode=ice_mode)
    stack = impute(dataset, pm, m=m, iterations=iterations, rng=rng, frame=frame_with_ice)
    stage2_rngs = rng.spawn(m)
    points = np.empty((m, 3))
    variances = np.empty((m, 3))
    for i, copy in enumerate(stack.datasets):
        augmented = duplicate_counterfactual_rows(copy, tier=tier)
        completed = impute_counterfactuals(
            augmented, dataset.schedule, tier, ice_mode, stage2_rngs[i])
        dup = completed[completed[PROVENANCE_COL] == 1]
        y = dup[f"y{dataset.K}"].to_numpy(dtype=float)
        arm = dup["arm"].to_numpy(dtype=float)
        base = dup["hba1c_base"].to_numpy(dtype=float)
        a1, a0, eff, s1, s0, se = ancova_estimates(y, arm, base, ("hba1c_base",))
        points[i] = (a1, a0, eff)
        variances[i] = (s1 ** 2, s0 ** 2, se ** 2)
    pooled = [pool_synthetic(points[:, j], variances[:, j]) for j in range(3)]
    fallback = any(p.variance_fallback for p in pooled)
    return EstimateTriple(
        method_id=method_id,
        arm1_mean=pooled[0].point,
        arm1_se=pooled[0].se,
        arm0_mean=pooled[1].point,
        arm0_se=pooled[1].se,
        effect=pooled[2].point,
        effect_se=pooled[2].se,
        diagnostics={"m": m, "variance_fallback": fallback},
    )
