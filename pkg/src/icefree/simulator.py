"""Synthetic-trial generator with known ICE-free potential outcomes.

The generative model follows the assumed causal graph: randomized arm and
baseline covariates drive an autoregressive HbA1c-change process; at each
visit an absorbing intercurrent event (rescue, discontinuation, or both) is
drawn from a multinomial-logistic hazard in the treatment arm and the
subject's HbA1c history; after the event the outcome mean shifts in
proportion to the weeks elapsed since it started. Factual and counterfactual
(event-free, per arm) trajectories share the same exogenous noise, so an
event-free subject's factual outcome equals their counterfactual outcome
exactly.

Hazards share one slope vector across event types with type-specific
intercepts; this makes the combined any-event hazard exactly
logistic-linear in the same features, so binary and categorical event
codings are both correctly specified.
"""

import time
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .data import DEFAULT_WEEKS, TrialDataset, VisitSchedule, all_columns
from .errors import PositivityViolationError

# re-exported for scenario construction convenience
__all__ = [
    "SimScenario",
    "SimTruth",
    "simulate_trial",
    "run_replication_study",
    "default_scenario",
    "null_scenario",
    "fpg_confounded_scenario",
    "unmeasured_confounding_scenario",
]


@dataclass(frozen=True)
class SimScenario:
    """Structural coefficients and design of one synthetic trial."""

    name: str = "default"
    n: int = 900
    weeks: tuple = DEFAULT_WEEKS
    seed: int = 0

    # baseline covariate distributions (diabetes-trial-like)
    age_mean: float = 58.0
    age_sd: float = 8.7
    sex_p: float = 0.36
    bmi_probs: tuple = (0.04, 0.27, 0.69)
    sbp_mean: float = 139.0
    sbp_sd: float = 13.8
    duration_mean: float = 7.0
    duration_sd: float = 5.5
    cpeptide_mean: float = 0.93
    cpeptide_sd: float = 0.36
    base_mean: float = 8.28
    base_sd: float = 0.71

    # HbA1c-change dynamics: y_k = y0 + y_arm*a + y_prev*(base + y_{k-1})
    #                              + y_base*base + y_fpg*(fpg_{k-1}-10.5)
    #                              + ice_week_effect*w_k + y_sd*eps
    y0: float = 1.4545
    y_arm: float = -0.0203
    y_prev: float = 0.85
    y_base: float = -1.05
    y_fpg: float = 0.0
    y_sd: float = 0.38
    ice_week_effect: float = -0.006

    # event hazards (at-risk subjects): eta_type = c_type + shared linear
    # predictor in (arm, current/previous/average absolute HbA1c, fpg)
    haz_rescue: float = -26.397
    haz_disc: float = -27.547
    haz_both: float = -28.997
    haz_arm: float = -0.62
    haz_cur: float = 0.0
    haz_prev: float = 0.35
    haz_avg: float = 2.30
    haz_fpg: float = 0.0

    # time-varying covariate decorations
    fpg_intercept: float = 3.2
    fpg_prev: float = 0.88
    fpg_own: float = 0.0
    fpg_sd: float = 1.0
    egfr_mean: float = 87.0
    egfr_between_sd: float = 17.0
    egfr_within_sd: float = 2.5

    # latent subject frailty: nonzero values break sequential exchangeability
    frailty_on_hazard: float = 0.0
    frailty_on_y: float = 0.0

    # missingness applied to the emitted factual dataset only; the default
    # drops visits more often while recent glycemic control is poor
    mcar_rate: float = 0.0
    mar_intercept: float | None = -1.9
    mar_slope: float = 1.8

    exchangeable: bool = True
    positivity_eps: float = 1e-8

    @property
    def K(self):
        return len(self.weeks)

    @property
    def schedule(self):
        return VisitSchedule(self.weeks)


@dataclass(frozen=True)
class SimTruth:
    """Event-free potential outcomes at the final visit, per subject and arm."""

    y_final_arm1: np.ndarray
    y_final_arm0: np.ndarray

    @property
    def estimand(self):
        return float(self.y_final_arm1.mean() - self.y_final_arm0.mean())


def default_scenario(**overrides):
    return replace(SimScenario(), **overrides)


def null_scenario(**overrides):
    """No treatment effect and no ICE effect on the outcome."""
    base = SimScenario(name="null", y_arm=0.0, ice_week_effect=0.0, haz_arm=0.0)
    return replace(base, **overrides)


def unmeasured_confounding_scenario(**overrides):
    """A latent frailty drives both the event hazard and future outcomes.

    Sequential exchangeability fails by construction; labeled accordingly.
    Every estimator is expected to be biased here.
    """
    base = SimScenario(
        name="unmeasured_confounding",
        frailty_on_hazard=0.9,
        frailty_on_y=-0.25,
        haz_cur=0.45,
        haz_prev=0.20,
        haz_avg=0.20,
        haz_rescue=-11.151,
        haz_disc=-12.301,
        haz_both=-13.751,
        exchangeable=False,
        mcar_rate=0.0,
        mar_intercept=None,
    )
    return replace(base, **overrides)


def fpg_confounded_scenario(**overrides):
    """FPG genuinely confounds the event and the outcome.

    Only estimators whose models include the time-varying covariates remain
    correctly specified here; used for qualitative contrasts, not for the
    every-method unbiasedness study.
    """
    base = SimScenario(
        name="fpg_confounded",
        y_fpg=-0.30,
        haz_fpg=0.85,
        haz_cur=0.45,
        haz_prev=0.20,
        haz_avg=0.20,
        fpg_intercept=0.7,
        fpg_prev=0.12,
        fpg_own=0.85,
        fpg_sd=0.8,
        haz_rescue=-11.476,
        haz_disc=-12.626,
        haz_both=-14.076,
        mcar_rate=0.0,
        mar_intercept=None,
    )
    return replace(base, **overrides)


def _validate_positivity(scenario):
    """Envelope check that the any-event hazard stays inside (eps, 1-eps).

    The envelope covers absolute HbA1c values reachable under the clipped
    baseline distribution plus six-sigma trajectory noise.
    """
    hba1c_range = (4.0, 13.5)
    fpg_range = (2.0, 25.0)
    shift = np.log(
        np.exp(scenario.haz_rescue) + np.exp(scenario.haz_disc) + np.exp(scenario.haz_both))
    bounds = []
    for cur in hba1c_range:
        for arm in (0.0, 1.0):
            for fpg in fpg_range:
                eta = (
                    shift
                    + scenario.haz_arm * arm
                    + (scenario.haz_cur + scenario.haz_prev + scenario.haz_avg) * cur
                    + scenario.haz_fpg * (fpg - 10.5)
                    + abs(scenario.frailty_on_hazard) * 4.5
                )
                bounds.append(eta)
    hazard_hi = 1.0 / (1.0 + np.exp(-max(bounds)))
    if hazard_hi >= 1.0 - scenario.positivity_eps:
        raise PositivityViolationError(
            f"any-event hazard can reach {hazard_hi:.6g}; positivity band violated")


def _draw_baselines(scenario, rng):
    n = scenario.n
    return {
        "age": np.clip(rng.normal(scenario.age_mean, scenario.age_sd, n), 25.0, 82.0).round(0),
        "sex": (rng.random(n) < scenario.sex_p).astype(int),
        "bmi_cat": rng.choice(3, size=n, p=scenario.bmi_probs),
        "sbp": np.clip(rng.normal(scenario.sbp_mean, scenario.sbp_sd, n), 90.0, 200.0),
        "duration": np.clip(rng.normal(scenario.duration_mean, scenario.duration_sd, n), 0.5, 40.0),
        "cpeptide": np.clip(rng.normal(scenario.cpeptide_mean, scenario.cpeptide_sd, n), 0.1, 3.0),
        "hba1c_base": np.clip(rng.normal(scenario.base_mean, scenario.base_sd, n), 7.0, 11.5),
    }


def _simulate_path(scenario, arm, base, eps_y, eps_fpg, u_ice=None, frailty=None):
    """Forward-simulate HbA1c change and FPG, optionally drawing events.

    With u_ice=None no events occur (the counterfactual regime): weeks-since
    stays 0 and the outcome expression reduces to the event-free path. The
    outcome update is a single shared expression, so event-free factual
    subjects match the counterfactual bit for bit.
    """
    n, K = arm.shape[0], scenario.K
    weeks = np.asarray(scenario.weeks)
    if frailty is None:
        frailty = np.zeros(n)
    y = np.zeros((n, K))
    fpg = np.zeros((n, K))
    prev_abs = base.copy()
    run_sum = base.copy()
    first_visit = np.zeros(n, dtype=int)  # 0 = event-free
    ice_type = np.zeros(n, dtype=int)
    shift_r = np.exp(scenario.haz_rescue)
    shift_d = np.exp(scenario.haz_disc)
    shift_b = np.exp(scenario.haz_both)
    for k in range(1, K + 1):
        j = k - 1
        run_avg = run_sum / k
        had = first_visit > 0
        w = np.where(had, weeks[j] - np.where(had, weeks[np.maximum(first_visit - 1, 0)], 0.0), 0.0)
        fpg_lag = fpg[:, j - 1] if j >= 1 else np.full(n, 10.5)
        fpg[:, j] = (
            scenario.fpg_intercept
            + scenario.fpg_prev * prev_abs
            + scenario.fpg_own * fpg_lag
            + scenario.fpg_sd * eps_fpg[:, j]
        )
        fpg_prev_dev = (fpg[:, j - 1] if j >= 1 else fpg[:, 0]) - 10.5
        y[:, j] = (
            scenario.y0
            + scenario.y_arm * arm
            + scenario.y_prev * prev_abs
            + scenario.y_base * base
            + scenario.y_fpg * fpg_prev_dev
            + scenario.frailty_on_y * frailty
            + scenario.ice_week_effect * w
            + scenario.y_sd * eps_y[:, j]
        )
        cur_abs = base + y[:, j]
        if u_ice is not None:
            at_risk = first_visit == 0
            eta_shared = (
                scenario.haz_arm * arm
                + scenario.haz_cur * cur_abs
                + scenario.haz_prev * prev_abs
                + scenario.haz_avg * run_avg
                + scenario.haz_fpg * (fpg[:, j] - 10.5)
                + scenario.frailty_on_hazard * frailty
            )
            e = np.exp(eta_shared)
            denom = 1.0 + (shift_r + shift_d + shift_b) * e
            p_r = shift_r * e / denom
            p_d = shift_d * e / denom
            p_b = shift_b * e / denom
            u = u_ice[:, j]
            typ = np.zeros(n, dtype=int)
            typ[u < p_r] = 1
            typ[(u >= p_r) & (u < p_r + p_d)] = 2
            typ[(u >= p_r + p_d) & (u < p_r + p_d + p_b)] = 3
            hit = at_risk & (typ > 0)
            first_visit[hit] = k
            ice_type[hit] = typ[hit]
        prev_abs = cur_abs
        run_sum = run_sum + cur_abs
    return y, fpg, first_visit, ice_type


def _apply_missingness(scenario, y, fpg, egfr, rng):
    """Record-loss applied to the emitted dataset; flags are always observed."""
    n, K = y.shape
    miss = np.zeros((n, K), dtype=bool)
    if scenario.mar_intercept is not None:
        last_seen = np.zeros(n)
        for j in range(K):
            eta = scenario.mar_intercept + scenario.mar_slope * last_seen
            p = 1.0 / (1.0 + np.exp(-eta))
            miss[:, j] = rng.random(n) < p
            seen = ~miss[:, j]
            last_seen = np.where(seen, y[:, j], last_seen)
    elif scenario.mcar_rate > 0:
        miss = rng.random((n, K)) < scenario.mcar_rate
    y = np.where(miss, np.nan, y)
    fpg = np.where(miss, np.nan, fpg)
    egfr = np.where(miss, np.nan, egfr)
    return y, fpg, egfr


def simulate_trial(scenario):
    """Generate one trial plus its subject-level ground truth.

    Factual and both counterfactual regimes share the exogenous draws
    (common random numbers); missingness is applied only to the emitted
    factual dataset.
    """
    _validate_positivity(scenario)
    rng = np.random.default_rng(scenario.seed)
    n, K = scenario.n, scenario.K
    baselines = _draw_baselines(scenario, rng)
    arm = rng.integers(0, 2, size=n).astype(float)
    eps_y = rng.standard_normal((n, K))
    eps_fpg = rng.standard_normal((n, K))
    egfr_u = rng.normal(scenario.egfr_mean, scenario.egfr_between_sd, n)
    eps_egfr = rng.standard_normal((n, K))
    u_ice = rng.random((n, K))

    frailty = rng.standard_normal(n)
    base = baselines["hba1c_base"]
    y_fact, fpg_fact, first_visit, ice_type = _simulate_path(
        scenario, arm, base, eps_y, eps_fpg, u_ice=u_ice, frailty=frailty)
    y_cf1, _, _, _ = _simulate_path(scenario, np.ones(n), base, eps_y, eps_fpg,
                                    frailty=frailty)
    y_cf0, _, _, _ = _simulate_path(scenario, np.zeros(n), base, eps_y, eps_fpg,
                                    frailty=frailty)
    truth = SimTruth(y_final_arm1=y_cf1[:, -1].copy(), y_final_arm0=y_cf0[:, -1].copy())

    egfr = egfr_u[:, None] + scenario.egfr_within_sd * eps_egfr
    y_out, fpg_out, egfr_out = _apply_missingness(scenario, y_fact, fpg_fact, egfr, rng)

    visits = np.arange(1, K + 1)
    rescue = ((first_visit[:, None] > 0)
              & (visits[None, :] >= first_visit[:, None])
              & np.isin(ice_type, (1, 3))[:, None]).astype(int)
    disc = ((first_visit[:, None] > 0)
            & (visits[None, :] >= first_visit[:, None])
            & np.isin(ice_type, (2, 3))[:, None]).astype(int)

    frame = pd.DataFrame({"id": [f"s{i:05d}" for i in range(n)], "arm": arm.astype(int)})
    for col, vals in baselines.items():
        frame[col] = vals
    for k in range(1, K + 1):
        frame[f"y{k}"] = y_out[:, k - 1]
        frame[f"fpg{k}"] = fpg_out[:, k - 1]
        frame[f"egfr{k}"] = egfr_out[:, k - 1]
        frame[f"rescue{k}"] = rescue[:, k - 1]
        frame[f"disc{k}"] = disc[:, k - 1]
    dataset = TrialDataset(frame[all_columns(K)], scenario.schedule)
    return dataset, truth


def rescue_thresholds(scenario):
    """Protocol-like FPG rescue thresholds per visit (stricter later)."""
    K = scenario.K
    return {k: (11.1 if scenario.weeks[k - 1] <= 12 else 10.0) for k in range(1, K + 1)}


def _replication_worker(args):
    scenario, method_ids, rep, seed, options, per_method = args
    from .methods import run_method

    rep_seed = np.random.SeedSequence((seed, rep)).generate_state(1)[0]
    ds, truth = simulate_trial(replace(scenario, seed=int(rep_seed)))
    rows = []
    for mid in method_ids:
        opts = {**options, **per_method.get(mid, {})}
        opts["seed"] = int(np.random.SeedSequence((seed, rep, mid)).generate_state(1)[0])
        t0 = time.perf_counter()
        try:
            est = run_method(mid, ds, **opts)
            rows.append({
                "rep": rep, "method_id": mid, "failed": False,
                "estimate": est.effect, "se": est.effect_se,
                "arm1": est.arm1_mean, "arm0": est.arm0_mean,
                "truth": truth.estimand, "wall_time_s": time.perf_counter() - t0,
            })
        except Exception as exc:  # noqa: BLE001 - study must report failures
            rows.append({
                "rep": rep, "method_id": mid, "failed": True,
                "estimate": np.nan, "se": np.nan, "arm1": np.nan, "arm0": np.nan,
                "truth": truth.estimand, "wall_time_s": time.perf_counter() - t0,
                "error": f"{type(exc).__name__}: {exc}",
            })
    return rows


def run_replication_study(scenario, method_ids, r, seed, threads=1, per_method=None,
                          **options):
    """Bias / SE / coverage study over r simulated trials.

    Per-replication seeds derive from (seed, rep), so the result table is
    identical for any thread count. ``per_method`` maps method id to option
    overrides (e.g. a deeper imputation chain for the wide-format MI methods).
    Returns (summary, raw) DataFrames.
    """
    per_method = per_method or {}
    args = [(scenario, tuple(method_ids), rep, seed, options, per_method)
            for rep in range(r)]
    if threads > 1:
        import multiprocessing as mp
        import os as _os

        ctx = mp.get_context("fork" if _os.name == "posix" else "spawn")
        with ctx.Pool(processes=threads) as pool:
            chunks = pool.map(_replication_worker, args, chunksize=1)
    else:
        chunks = [_replication_worker(a) for a in args]
    raw = pd.DataFrame([row for chunk in chunks for row in chunk])
    raw = raw.sort_values(["rep", "method_id"], kind="stable").reset_index(drop=True)

    summaries = []
    for mid in method_ids:
        sub = raw[(raw["method_id"] == mid) & (~raw["failed"])]
        n_ok = len(sub)
        errs = sub["estimate"] - sub["truth"]
        cover = ((sub["estimate"] - 1.96 * sub["se"] <= sub["truth"])
                 & (sub["truth"] <= sub["estimate"] + 1.96 * sub["se"]))
        coverage = float(cover.mean()) if n_ok else np.nan
        summaries.append({
            "method_id": mid,
            "n_reps": n_ok,
            "n_failed": int((raw["method_id"] == mid).sum() - n_ok),
            "mean_bias": float(errs.mean()) if n_ok else np.nan,
            "mcse_bias": float(errs.std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else np.nan,
            "sd_estimate": float(sub["estimate"].std(ddof=1)) if n_ok > 1 else np.nan,
            "mean_model_se": float(sub["se"].mean()) if n_ok else np.nan,
            "coverage95": coverage,
            "mcse_coverage": float(np.sqrt(max(coverage * (1 - coverage), 0.0) / n_ok)) if n_ok else np.nan,
            "mean_wall_time_s": float(sub["wall_time_s"].mean()) if n_ok else np.nan,
        })
    return pd.DataFrame(summaries), raw
