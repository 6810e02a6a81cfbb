import numpy as np
import pandas as pd
import pytest

from icefree.gformula_mi import (
    PROVENANCE_COL,
    analyze_gformula_mi,
    duplicate_counterfactual_rows,
    impute_counterfactuals,
)
from icefree.inference import ancova_estimates
from icefree.simulator import default_scenario, simulate_trial


def complete_trial(n=120, seed=0, **kw):
    ds, truth = simulate_trial(default_scenario(n=n, seed=seed, mcar_rate=0.0, mar_intercept=None, **kw))
    return ds, truth


class TestDuplication:
    def test_row_counts(self):
        ds, _ = complete_trial(n=3)
        aug = duplicate_counterfactual_rows(ds)
        assert len(aug) == 9
        assert (aug[PROVENANCE_COL] == 1).sum() == 6

    def test_counterfactual_rows_event_free_and_blanked(self):
        ds, _ = complete_trial(n=20, seed=1)
        aug = duplicate_counterfactual_rows(ds, tier=3)
        cf = aug[aug[PROVENANCE_COL] == 1]
        for k in range(1, 11):
            assert (cf[f"rescue{k}"] == 0).all()
            assert (cf[f"disc{k}"] == 0).all()
            assert cf[f"y{k}"].isna().all()
            assert cf[f"fpg{k}"].isna().all()
        assert set(cf["arm"]) == {0, 1}

    def test_original_rows_bit_identical(self):
        ds, _ = complete_trial(n=15, seed=2)
        aug = duplicate_counterfactual_rows(ds)
        orig = aug[aug[PROVENANCE_COL] == 0].drop(columns=[PROVENANCE_COL])
        pd.testing.assert_frame_equal(orig.reset_index(drop=True), ds.frame)


class TestImputeCounterfactuals:
    def test_fit_ignores_counterfactual_values(self):
        # pre-filling the blanked cells with garbage must change nothing:
        # every stage fits on original rows and overwrites the duplicates
        ds, _ = complete_trial(n=40, seed=3)
        aug = duplicate_counterfactual_rows(ds)
        done1 = impute_counterfactuals(aug, ds.schedule, 1, "binary",
                                       np.random.default_rng(5))
        poisoned = aug.copy()
        cf = (poisoned[PROVENANCE_COL] == 1).to_numpy()
        for k in range(1, 11):
            poisoned.loc[cf, f"y{k}"] = 99.0
        done2 = impute_counterfactuals(poisoned, ds.schedule, 1, "binary",
                                       np.random.default_rng(5))
        pd.testing.assert_frame_equal(done1, done2)

    def test_zero_residual_variance_deterministic(self):
        ds, _ = complete_trial(n=60, seed=4)
        frame = ds.frame.copy()
        for k in range(1, 11):
            frame[f"y{k}"] = 0.1 * k - 0.2 * frame["arm"] + 0.05 * frame["hba1c_base"]
        ds = ds.with_frame(frame)
        aug = duplicate_counterfactual_rows(ds)
        done = impute_counterfactuals(aug, ds.schedule, 1, "binary",
                                      np.random.default_rng(7))
        cf = done[done[PROVENANCE_COL] == 1]
        want = 0.1 * 10 - 0.2 * cf["arm"] + 0.05 * cf["hba1c_base"]
        assert cf["y10"].to_numpy(dtype=float) == pytest.approx(want.to_numpy(), abs=1e-6)

    def test_fixed_seed_identical(self):
        ds, _ = complete_trial(n=30, seed=5)
        aug = duplicate_counterfactual_rows(ds)
        d1 = impute_counterfactuals(aug, ds.schedule, 1, "binary", np.random.default_rng(9))
        d2 = impute_counterfactuals(aug, ds.schedule, 1, "binary", np.random.default_rng(9))
        pd.testing.assert_frame_equal(d1, d2)

    def test_no_ice_counterfactual_means_match_originals(self):
        ds, _ = complete_trial(n=400, seed=6, haz_rescue=-60.0, haz_disc=-60.0,
                               haz_both=-60.0)
        aug = duplicate_counterfactual_rows(ds)
        done = impute_counterfactuals(aug, ds.schedule, 1, "binary",
                                      np.random.default_rng(11))
        orig = done[done[PROVENANCE_COL] == 0]
        cf = done[done[PROVENANCE_COL] == 1]
        for arm in (0, 1):
            om = orig[orig["arm"] == arm]["y10"].mean()
            cm = cf[cf["arm"] == arm]["y10"].mean()
            assert abs(om - cm) < 0.12


class TestAnalyzeGformulaMi:
    def test_no_missing_no_ice_matches_ancova(self):
        ds, _ = complete_trial(n=250, seed=7, haz_rescue=-60.0, haz_disc=-60.0,
                               haz_both=-60.0)
        est = analyze_gformula_mi(ds, method_id=12, m=30, seed=1)
        arm = ds.frame["arm"].to_numpy(dtype=float)
        base = ds.frame["hba1c_base"].to_numpy(dtype=float)
        y = ds.frame["y10"].to_numpy(dtype=float)
        a1, a0, eff, s1, s0, se = ancova_estimates(y, arm, base, ("hba1c_base",))
        assert abs(est.effect - eff) < 3 * max(est.effect_se, se)

    def test_confounded_trial_within_3se_of_truth(self):
        ds, truth = simulate_trial(default_scenario(n=900, seed=8))
        est = analyze_gformula_mi(ds, method_id=12, m=20, seed=2)
        assert abs(est.effect - truth.estimand) < 3 * est.effect_se

    def test_agreement_with_parametric_gformula(self):
        from icefree.gformula import analyze_gformula

        ds, _ = simulate_trial(default_scenario(n=700, seed=9))
        e12 = analyze_gformula_mi(ds, method_id=12, m=20, seed=3)
        e9 = analyze_gformula(ds, method_id=9, b=40, copies=10, seed=3)
        joint = np.hypot(e12.effect_se, e9.effect_se)
        assert abs(e12.effect - e9.effect) < 3 * joint

    def test_categorical_and_tier3_modes_run(self):
        ds, _ = simulate_trial(default_scenario(n=300, seed=10))
        for mid in (13, 14):
            est = analyze_gformula_mi(ds, method_id=mid, m=4, seed=4)
            assert np.isfinite(est.effect)
            assert est.effect_se > 0

    def test_permutation_invariance(self):
        ds, _ = complete_trial(n=80, seed=11)
        est1 = analyze_gformula_mi(ds, method_id=12, m=5, seed=6)
        perm = np.random.default_rng(0).permutation(ds.n)
        ds2 = ds.with_frame(ds.frame.iloc[perm].reset_index(drop=True))
        est2 = analyze_gformula_mi(ds2, method_id=12, m=5, seed=6)
        assert abs(est1.effect - est2.effect) < 3 * np.hypot(est1.effect_se, est2.effect_se)
