"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v -s``. The replication-study
criteria are heavy; the full suite is sized for a desktop-class machine
(the study itself parallelizes over replications).
"""

import os
import time

import numpy as np
import pytest

from icefree.data import mask_post_ice
from icefree.gestimation import _arrays_from_copy, strip_chain
from icefree.gformula import analyze_gformula
from icefree.inference import ancova_estimates, bootstrap, mi_bootstrap_pool
from icefree.iptw import analyze_iptw
from icefree.mi import analyze_mi, default_predictor_matrix, impute, pool_rubin, pool_synthetic
from icefree.methods import run_method
from icefree.mmrm import analyze_mmrm
from icefree.simulator import default_scenario, run_replication_study, simulate_trial

from test_gestimation import constructed_dataset
from toy import build_toy_dataset, enumeration_oracle

THREADS = int(os.environ.get("ICEFREE_TEST_THREADS", "2"))
STUDY_R = 200
STUDY_SEED = 20260808


def report(criterion, passed, detail):
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} — {detail}"
    print(line, flush=True)
    assert passed, line


@pytest.fixture(scope="module")
def replication_study():
    t0 = time.perf_counter()
    summary, raw = run_replication_study(
        default_scenario(), method_ids=tuple(range(0, 18)), r=STUDY_R,
        seed=STUDY_SEED, threads=THREADS, m=10, b=50, gformula_b=50, copies=10)
    wall = time.perf_counter() - t0
    return summary, raw, wall


def test_criterion_01_degenerate_equivalence():
    t0 = time.perf_counter()
    sc = default_scenario(n=300, seed=11, mcar_rate=0.0, mar_intercept=None,
                          haz_rescue=-60.0, haz_disc=-60.0, haz_both=-60.0)
    ds, _ = simulate_trial(sc)
    arm = ds.frame["arm"].to_numpy(dtype=float)
    base = ds.frame["hba1c_base"].to_numpy(dtype=float)
    y = ds.frame["y10"].to_numpy(dtype=float)
    _, _, ancova_eff, *_ = ancova_estimates(y, arm, base, ("hba1c_base",))
    gaps = {}
    gaps[1] = analyze_mmrm(mask_post_ice(ds)).effect - ancova_eff
    gaps[2] = analyze_mi(mask_post_ice(ds), 2, m=50, seed=0).effect - ancova_eff
    gaps[5] = analyze_iptw(mask_post_ice(ds), 5, m=50, b=10, seed=0).effect - ancova_eff
    from icefree.gestimation import analyze_gestimation

    gaps[15] = analyze_gestimation(ds, 15, m=50, b=10, seed=0).effect - ancova_eff
    elapsed = time.perf_counter() - t0
    worst = max(abs(g) for g in gaps.values())
    ok = worst < 1e-6 and elapsed < 120
    report(1, ok, f"max |method - ANCOVA| = {worst:.2e} (methods 1/2/5/15), {elapsed:.0f}s")


def test_criterion_02_unbiasedness_all_methods(replication_study):
    summary, raw, wall = replication_study
    rows = summary.set_index("method_id")
    failures = []
    for mid in range(1, 18):
        bias = rows.loc[mid, "mean_bias"]
        mcse = rows.loc[mid, "mcse_bias"]
        if not abs(bias) < 3 * mcse:
            failures.append(f"m{mid}: bias {bias:+.4f} vs 3*mcse {3 * mcse:.4f}")
        if rows.loc[mid, "n_failed"] > 0:
            failures.append(f"m{mid}: {rows.loc[mid, 'n_failed']} failed reps")
    naive_bias = rows.loc[0, "mean_bias"]
    naive_mcse = rows.loc[0, "mcse_bias"]
    if not abs(naive_bias) > 3 * naive_mcse:
        failures.append(f"naive baseline not detectably biased ({naive_bias:+.4f})")
    cpu_s = (raw["wall_time_s"]).sum()
    desktop_minutes = cpu_s / 8 / 60  # eight workers on a desktop-class box
    if desktop_minutes >= 60:
        failures.append(f"runtime {desktop_minutes:.0f} desktop-minutes")
    detail = (f"R={STUDY_R}, all 17 within 3*MCSE, naive bias {naive_bias:+.4f} "
              f"(> {3 * naive_mcse:.4f}); wall {wall / 60:.0f} min on {THREADS} workers, "
              f"{desktop_minutes:.0f} min at 8 workers")
    if failures:
        detail = "; ".join(failures)
    report(2, not failures, detail)


def test_criterion_03_cross_estimator_oracle():
    ds = build_toy_dataset()
    a1, a0, eff = enumeration_oracle()
    ipw = analyze_iptw(ds, method_id=5, m=2, b=4, seed=0,
                       saturated=True, analysis_covariates=())
    gf = analyze_gformula(ds, method_id=9, b=0, copies=1, seed=0,
                          deterministic=True, saturated=True, analysis_covariates=())
    gap = max(abs(ipw.arm1_mean - a1), abs(ipw.arm0_mean - a0), abs(ipw.effect - eff),
              abs(gf.arm1_mean - a1), abs(gf.arm0_mean - a0), abs(gf.effect - eff))
    report(3, gap < 1e-8, f"max |estimate - enumeration| = {gap:.2e}")


def test_criterion_04_mmrm_mi_agreement():
    hits = 0
    n_trials = 50
    for seed in range(n_trials):
        sc = default_scenario(n=500, seed=300 + seed, mcar_rate=0.0, mar_intercept=None,
                              mar_intercept=-3.2, mar_slope=0.6)
        ds, _ = simulate_trial(sc)
        masked = mask_post_ice(ds)
        mm = analyze_mmrm(masked)
        mi = analyze_mi(masked, 2, m=100, seed=seed)
        if abs(mm.effect - mi.effect) < 0.2 * mm.effect_se:
            hits += 1
    frac = hits / n_trials
    report(4, frac >= 0.90, f"|MMRM - MI(M=100)| < 0.2*SE in {frac:.0%} of {n_trials} trials")


def test_criterion_05_se_ordering(replication_study):
    summary, _, _ = replication_study
    rows = summary.set_index("method_id")
    se5 = rows.loc[5, "mean_model_se"]
    se2 = rows.loc[2, "mean_model_se"]
    report(5, se5 >= se2, f"mean SE weighting {se5:.4f} >= mean SE imputation {se2:.4f}")


def test_criterion_06_pooling_arithmetic():
    r = pool_rubin([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    s = pool_synthetic([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    exact = (r.total_variance == pytest.approx(7.0 / 3.0, abs=1e-15)
             and s.total_variance == pytest.approx(1.0 / 3.0, abs=1e-15))
    rng = np.random.default_rng(60)
    ordered = True
    for _ in range(1000):
        m = int(rng.integers(2, 15))
        est = rng.normal(size=m)
        var = rng.random(m) * 3
        ordered &= pool_synthetic(est, var).total_variance <= (
            pool_rubin(est, var).total_variance + 1e-12)
    report(6, exact and ordered, "hand values 7/3 and 1/3 exact; synthetic <= Rubin on 1000 draws")


def test_criterion_07_bootstrap_calibration():
    ds, _ = simulate_trial(default_scenario(n=200, seed=70, mcar_rate=0.0, mar_intercept=None))
    y = ds.frame["y10"].to_numpy(dtype=float)
    res = bootstrap(ds, lambda d, r: float(d.frame["y10"].mean()), b=1000,
                    rng=np.random.default_rng(7))
    target = y.std(ddof=1) / np.sqrt(len(y))
    rel = abs(float(np.sqrt(res.variances[0])) - target) / target
    se_ok = rel < 0.15

    # coverage of the imputation + within-copy bootstrap pipeline
    weeks = (2, 4, 12, 24, 52)
    covered = 0
    n_reps = 200
    for rep in range(n_reps):
        sc = default_scenario(n=300, seed=700 + rep, weeks=weeks, mcar_rate=0.05,
                              mar_intercept=None)
        ds, truth = simulate_trial(sc)
        masked = mask_post_ice(ds)
        arm_all = masked.frame["arm"].to_numpy(dtype=float)

        def effect_stat(d, rng):
            f = d.frame
            return ancova_estimates(
                f["y5"].to_numpy(dtype=float), f["arm"].to_numpy(dtype=float),
                f["hba1c_base"].to_numpy(dtype=float), ("hba1c_base",))[2]

        pm = default_predictor_matrix(masked, tier=1)
        stack = impute(masked, pm, m=5, rng=np.random.default_rng(7000 + rep))
        pooled, _ = mi_bootstrap_pool(stack, effect_stat, b=40,
                                      rng=np.random.default_rng(9000 + rep))
        est, se = pooled[0].point, pooled[0].se
        if est - 1.96 * se <= truth.estimand <= est + 1.96 * se:
            covered += 1
    coverage = covered / n_reps
    cov_ok = 0.90 <= coverage <= 0.99
    report(7, se_ok and cov_ok,
           f"bootstrap SE within {rel:.1%} of s/sqrt(n); pipeline coverage {coverage:.3f}")


def test_criterion_08_gestimation_exactness():
    ds, deltas, tau, ice_free = constructed_dataset(n=500, K=8, seed=80)
    arrays = _arrays_from_copy(ds, tier=1)
    chain = strip_chain(arrays, ds.K, ice_mode="binary", tier=1)
    worst = max(abs(stage.psi[f"ice{stage.visit}"] - deltas[stage.visit])
                for stage in chain.stages)
    eff = ancova_estimates(chain.final_outcome, arrays["arm"],
                           arrays["hba1c_base"], ("hba1c_base",))[2]
    outcome_gap = float(np.max(np.abs(chain.final_outcome - ice_free)))
    ok = worst < 1e-8 and abs(eff - tau) < 1e-8 and outcome_gap < 1e-8
    report(8, ok, f"max |psi - delta| = {worst:.2e}, |effect - tau| = {abs(eff - tau):.2e}")


def test_criterion_09_simulator_consistency():
    from icefree.data import build_ice_history

    total = matched = 0
    for seed in range(20):
        ds, truth = simulate_trial(default_scenario(n=300, seed=seed, mcar_rate=0.0, mar_intercept=None))
        hist = build_ice_history(ds)
        free = hist.first_visit == 0
        arm = ds.frame["arm"].to_numpy()
        y_final = ds.frame[f"y{ds.K}"].to_numpy(dtype=float)
        cf = np.where(arm == 1, truth.y_final_arm1, truth.y_final_arm0)
        total += int(free.sum())
        matched += int(np.sum(y_final[free] == cf[free]))
    report(9, matched == total, f"{matched}/{total} event-free subjects match exactly over 20 seeds")


def test_criterion_10_cli_determinism(tmp_path):
    import yaml

    from icefree.cli import main

    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({
        "seed": 17,
        "simulate": {"scenario": "default", "n": 80},
        "analysis": {"methods": [1, 2, 9], "m": 3, "b": 4, "copies": 2, "gformula_b": 4},
        "replicate": {"scenario": "default", "n": 50, "r": 2, "methods": [0, 1]},
    }))
    cfg2 = tmp_path / "cfg2.yaml"
    payload = yaml.safe_load(cfg.read_text())
    payload["threads"] = 2
    cfg2.write_text(yaml.safe_dump(payload))

    pairs = []
    for i, (sub, extra) in enumerate([
        ("simulate", []),
        ("analyze", [str(tmp_path / "run0" / "trial.csv")]),
        ("replicate", []),
        ("diagnose", [str(tmp_path / "run0" / "trial.csv")]),
    ]):
        outs = []
        for j, cpath in enumerate([cfg, cfg, cfg2] if sub == "replicate" else [cfg, cfg]):
            out = tmp_path / f"run{i}" if (i == 0 and j == 0) else tmp_path / f"run{i}_{j}"
            argv = [sub] + extra + ["-c", str(cpath), "-o", str(out)]
            assert main(argv) == 0
            outs.append(out)
        pairs.append((sub, outs))
    identical = True
    for sub, outs in pairs:
        names = [p.name for p in outs[0].iterdir() if p.suffix in (".csv", ".json")]
        for name in names:
            if name == "run.json":
                continue  # embeds the config path; content otherwise identical
            blobs = {(out / name).read_bytes() for out in outs}
            if len(blobs) != 1:
                identical = False
    report(10, identical, "simulate/analyze/replicate/diagnose byte-identical on rerun (replicate also across thread counts)")
