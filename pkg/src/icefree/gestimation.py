"""Sequential removal of event effects from the final outcome.

Working backwards from the last visit, each stage regresses the current
stripped outcome on baseline HbA1c, treatment, all earlier outcome
measurements and all earlier event indicators, then subtracts the estimated
coefficient of the latest event indicator times that indicator. After the
last strip the outcome carries no event effects and its regression on
treatment and baseline HbA1c gives the treatment effect.

Monotone event indicators are exactly collinear whenever no subject's first
event falls at some visit; the earliest redundant column is dropped (keeping
the indicator being stripped) with a warning. Missing data are handled by
multiple imputation first; standard errors bootstrap the whole chain within
each completed copy and pool by Rubin's rules.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import BASELINE_COLS, build_ice_history
from .errors import DegenerateBootstrapError, IcefreeError, RankDeficientError
from .inference import EstimateTriple, ancova_estimates
from .mi import attach_ice_columns, default_predictor_matrix, impute, pool_rubin
from .numerics import DesignMatrix, drop_redundant_columns, fit_ols

log = logging.getLogger(__name__)

_RANK_RTOL_CHAIN = 1e-10

METHOD_TIERS = {15: 1, 16: 3, 17: 3}
METHOD_ICE_MODE = {15: "binary", 16: "binary", 17: "categorical"}


@dataclass(frozen=True)
class StripStage:
    visit: int  # the event indicator stripped at this stage
    psi: dict  # per stripped indicator column
    dropped: tuple
    stripped_outcome: np.ndarray


@dataclass(frozen=True)
class StripChain:
    stages: tuple
    final_outcome: np.ndarray

    def psi(self, visit):
        for st in self.stages:
            if st.visit == visit:
                return st.psi
        raise KeyError(visit)


def _event_columns(hist, ice_mode, visit):
    """Names and values of the event-indicator columns for one visit."""
    if ice_mode == "categorical":
        return (
            [f"ice{visit}_1", f"ice{visit}_2", f"ice{visit}_3"],
            [(hist.categorical[:, visit - 1] == l).astype(float) for l in (1, 2, 3)],
        )
    return [f"ice{visit}"], [hist.binary[:, visit - 1].astype(float)]


def _build_stage_design(arrays, K, ice_mode, tier):
    """One column-ordered design whose visit-block prefixes are exactly the
    per-stage regressions: global covariates first, then per visit v the
    outcome (and tier-3 covariates) followed by that visit's event
    indicators. Returns (names, values, prefix widths by stage, event-column
    positions by stage, names dropped by the structural screen)."""
    hist = arrays["hist"]
    y = arrays["y"]
    n = y.shape[0]
    names = ["const", "hba1c_base", "arm"]
    cols = [np.ones(n), arrays["hba1c_base"], arrays["arm"]]
    if tier >= 3:
        for c in ("age", "sex", "sbp", "duration", "cpeptide"):
            names.append(c)
            cols.append(arrays[c])
        names += ["bmi_1", "bmi_2"]
        cols += [arrays["bmi_1"], arrays["bmi_2"]]
    prefix = {}
    ice_pos = {}
    for v in range(1, K):
        names.append(f"y{v}")
        cols.append(y[:, v - 1])
        if tier >= 3:
            names += [f"fpg{v}", f"egfr{v}"]
            cols += [arrays["fpg"][:, v - 1], arrays["egfr"][:, v - 1]]
        ev_names, ev_cols = _event_columns(hist, ice_mode, v)
        start = len(names)
        names += ev_names
        cols += ev_cols
        ice_pos[v] = list(range(start, len(names)))
        prefix[v] = len(names)
    values = np.column_stack(cols)

    # structural screen over the full design: empty or duplicated event
    # indicators drop once, globally (their coefficients are zero)
    from .numerics import screen_structural_columns

    ice_mask = np.array([nm.startswith("ice") for nm in names])
    keep = np.ones(len(names), dtype=bool)
    sums = values.sum(axis=0)
    spans = values.max(axis=0) - values.min(axis=0)
    for c in np.flatnonzero(ice_mask):
        if spans[c] == 0:
            keep[c] = False
    live = [c for c in np.flatnonzero(ice_mask) if keep[c]]
    for pos, a_i in enumerate(live):
        for b_i in live[pos + 1:]:
            if keep[a_i] and keep[b_i] and sums[a_i] == sums[b_i] and np.array_equal(
                    values[:, a_i], values[:, b_i]):
                keep[a_i] = False  # keep the later indicator (it gets stripped)
                break
    dropped = [names[c] for c in range(len(names)) if not keep[c]]
    old_to_new = np.cumsum(keep) - 1
    new_names = [nm for nm, k in zip(names, keep) if k]
    new_values = values[:, keep]
    new_prefix = {v: int(keep[:prefix[v]].sum()) for v in prefix}
    new_ice_pos = {v: [(names[c], int(old_to_new[c])) for c in ice_pos[v] if keep[c]]
                   for v in ice_pos}
    all_ice_names = {v: [names[c] for c in ice_pos[v]] for v in ice_pos}
    return new_names, new_values, new_prefix, new_ice_pos, all_ice_names, dropped


def strip_chain(arrays, K, ice_mode="binary", tier=1):
    """Run the backward strip on completed wide arrays.

    arrays carries 'y' (n, K), 'arm', 'hba1c_base', the baseline covariate
    columns, event history arrays, and (tier 3) 'fpg'/'egfr' (n, K).

    The per-stage regressions are solved from one QR factorization: the
    stage designs are nested prefixes of the final-stage design, so each
    stage is a triangular solve against the leading block. Falls back to
    stagewise fitting if a prefix is numerically rank-deficient.
    """
    names, values, prefix, ice_pos, all_ice, dropped = _build_stage_design(
        arrays, K, ice_mode, tier)
    y = arrays["y"]
    q, rmat = np.linalg.qr(values)
    rdiag = np.abs(np.diag(rmat))
    if rdiag.max() == 0.0 or np.any(rdiag <= _RANK_RTOL_CHAIN * rdiag.max()):
        return _strip_chain_slow(arrays, K, ice_mode, tier)
    r = y[:, K - 1].copy()
    stages = []
    for j in range(K - 1, 0, -1):
        pj = prefix[j]
        qtr = q[:, :pj].T @ r
        beta = scipy.linalg.solve_triangular(rmat[:pj, :pj], qtr)
        psi = {nm: 0.0 for nm in all_ice[j]}
        r_next = r
        for nm, c in ice_pos[j]:
            coef = float(beta[c])
            psi[nm] = coef
            r_next = r_next - coef * values[:, c]
        stages.append(StripStage(visit=j, psi=psi,
                                 dropped=tuple(n for n in dropped if n in all_ice[j]),
                                 stripped_outcome=r_next))
        r = r_next
    return StripChain(stages=tuple(stages), final_outcome=r)


def _strip_chain_slow(arrays, K, ice_mode="binary", tier=1):
    """Stagewise reference implementation (used under rank deficiency)."""
    hist = arrays["hist"]
    y = arrays["y"]
    n = y.shape[0]
    r = y[:, K - 1].copy()
    stages = []
    for j in range(K - 1, 0, -1):
        names = ["const", "hba1c_base", "arm"]
        cols = [np.ones(n), arrays["hba1c_base"], arrays["arm"]]
        if tier >= 3:
            for c in ("age", "sex", "sbp", "duration", "cpeptide"):
                names.append(c)
                cols.append(arrays[c])
            names += ["bmi_1", "bmi_2"]
            cols += [arrays["bmi_1"], arrays["bmi_2"]]
        for v in range(1, j + 1):
            names.append(f"y{v}")
            cols.append(y[:, v - 1])
            if tier >= 3:
                names += [f"fpg{v}", f"egfr{v}"]
                cols += [arrays["fpg"][:, v - 1], arrays["egfr"][:, v - 1]]
        strip_names = []
        for v in range(1, j + 1):
            ev_names, ev_cols = _event_columns(hist, ice_mode, v)
            names += ev_names
            cols += ev_cols
            if v == j:
                strip_names = ev_names
        values = np.column_stack(cols)
        # cheap structural screen first: empty indicator columns (no events
        # by that visit in this sample) and exact duplicates of monotone
        # indicators are the common deficiency; full greedy scan is the
        # fallback for anything else
        dropped = []
        keep = np.ones(values.shape[1], dtype=bool)
        for c in range(values.shape[1]):
            if names[c].startswith("ice") and not values[:, c].any():
                keep[c] = False
                dropped.append(names[c])
        # monotone duplication happens between consecutive visits of the same
        # indicator; compare only those pairs, cheapest sums first
        ice_idx = [c for c in range(values.shape[1]) if keep[c] and names[c].startswith("ice")]
        sums = {c: values[:, c].sum() for c in ice_idx}
        by_level = {}
        for c in ice_idx:
            level = names[c].split("_")[1] if "_" in names[c] else "b"
            by_level.setdefault(level, []).append(c)
        for chain in by_level.values():
            for a_i, b_i in zip(chain, chain[1:]):
                if keep[a_i] and sums[a_i] == sums[b_i] and np.array_equal(
                        values[:, a_i], values[:, b_i]):
                    keep[a_i] = False  # keep the later indicator (it gets stripped)
                    dropped.append(names[a_i])
        if dropped:
            log.debug("strip stage %d dropped structural columns %s", j, dropped)
        X = DesignMatrix(tuple(n for n, k in zip(names, keep) if k), values[:, keep])
        try:
            fit = fit_ols(X, r)
        except RankDeficientError:
            X, more = drop_redundant_columns(X, prefer="last")
            log.warning("strip stage %d dropped collinear columns %s", j, more)
            dropped.extend(more)
            fit = fit_ols(X, r)
        psi = {}
        r_next = r.copy()
        for nm in strip_names:
            if nm in fit.names:
                coef = fit.coef(nm)
                psi[nm] = coef
                col_idx = names.index(nm)
                r_next = r_next - coef * cols[col_idx]
            else:
                psi[nm] = 0.0  # dropped: indicator carried no usable signal
        stages.append(StripStage(visit=j, psi=psi, dropped=tuple(dropped),
                                 stripped_outcome=r_next))
        r = r_next
    return StripChain(stages=tuple(stages), final_outcome=r)


def _arrays_from_copy(copy, tier):
    frame = copy.frame
    hist = build_ice_history(copy)
    bmi = frame["bmi_cat"].to_numpy(dtype=float)
    arrays = {
        "y": copy.y_matrix(),
        "arm": frame["arm"].to_numpy(dtype=float),
        "hba1c_base": frame["hba1c_base"].to_numpy(dtype=float),
        "hist": hist,
        "bmi_1": (bmi == 1).astype(float),
        "bmi_2": (bmi == 2).astype(float),
    }
    for c in ("age", "sex", "sbp", "duration", "cpeptide"):
        arrays[c] = frame[c].to_numpy(dtype=float)
    if tier >= 3:
        K = copy.K
        arrays["fpg"] = frame[[f"fpg{k}" for k in range(1, K + 1)]].to_numpy(dtype=float)
        arrays["egfr"] = frame[[f"egfr{k}" for k in range(1, K + 1)]].to_numpy(dtype=float)
    return arrays


def _subset_arrays(arrays, idx, tier):
    hist = arrays["hist"]
    out = {
        "y": arrays["y"][idx],
        "arm": arrays["arm"][idx],
        "hba1c_base": arrays["hba1c_base"][idx],
        "bmi_1": arrays["bmi_1"][idx],
        "bmi_2": arrays["bmi_2"][idx],
        "hist": type(hist)(
            binary=hist.binary[idx],
            categorical=hist.categorical[idx],
            weeks_since=hist.weeks_since[idx],
            first_visit=hist.first_visit[idx],
        ),
    }
    for c in ("age", "sex", "sbp", "duration", "cpeptide"):
        out[c] = arrays[c][idx]
    if tier >= 3:
        out["fpg"] = arrays["fpg"][idx]
        out["egfr"] = arrays["egfr"][idx]
    return out


def _chain_estimate(arrays, K, ice_mode, tier):
    chain = strip_chain(arrays, K, ice_mode=ice_mode, tier=tier)
    return np.array(ancova_estimates(
        chain.final_outcome, arrays["arm"], arrays["hba1c_base"], ("hba1c_base",))[:3])


def analyze_gestimation(dataset, method_id, m=100, b=100, iterations=5, seed=0):
    """Methods 15-17 on the unmasked dataset: impute, strip, bootstrap, pool."""
    tier = METHOD_TIERS[method_id]
    ice_mode = METHOD_ICE_MODE[method_id]
    rng = np.random.default_rng(seed)
    pm = default_predictor_matrix(dataset, tier=tier if tier >= 3 else 1,
                                  include_ice=ice_mode)
    frame_with_ice = attach_ice_columns(dataset, ice_mode=ice_mode)
    stack = impute(dataset, pm, m=m, iterations=iterations, rng=rng, frame=frame_with_ice)
    K = dataset.K
    points = np.empty((m, 3))
    boot_vars = np.empty((m, 3))
    dropped = 0
    copy_rngs = rng.spawn(m)
    for i, copy in enumerate(stack.datasets):
        arrays = _arrays_from_copy(copy, tier)
        points[i] = _chain_estimate(arrays, K, ice_mode, tier)
        reps = []
        crng = copy_rngs[i]
        for _ in range(b):
            sel = crng.integers(0, copy.n, size=copy.n)
            try:
                reps.append(_chain_estimate(_subset_arrays(arrays, sel, tier), K, ice_mode, tier))
            except IcefreeError:
                dropped += 1
        if len(reps) < 0.9 * b:
            raise DegenerateBootstrapError(
                f"{b - len(reps)}/{b} replicates failed in imputation {i}")
        boot_vars[i] = np.vstack(reps).var(axis=0, ddof=1)
    pooled = [pool_rubin(points[:, j], boot_vars[:, j]) for j in range(3)]
    return EstimateTriple(
        method_id=method_id,
        arm1_mean=pooled[0].point,
        arm1_se=pooled[0].se,
        arm0_mean=pooled[1].point,
        arm0_se=pooled[1].se,
        effect=pooled[2].point,
        effect_se=pooled[2].se,
        diagnostics={"m": m, "b": b, "dropped_replicates": dropped},
    )
