import numpy as np
import pytest

from icefree.data import mask_post_ice
from icefree.errors import DegenerateOutcomeError
from icefree.inference import ancova_estimates
from icefree.iptw import (
    analyze_iptw,
    build_at_risk_table,
    compute_weights,
    fit_weight_model,
)
from icefree.numerics import BinaryFit, DesignMatrix
from icefree.simulator import default_scenario, simulate_trial

from toy import build_toy_dataset, enumeration_oracle, naive_completer_means


def logit(p):
    return float(np.log(p / (1 - p)))


class TestWeightArithmetic:
    def test_product_rule_for_ice_at_visit_three(self):
        # p_no_ice = (0.9, 0.8) before the event: W = 1/(0.9*0.8)
        import pandas as pd

        table = pd.DataFrame({
            "subject": [0, 0, 0],
            "visit": [1, 2, 3],
            "event": [0, 0, 1],
        })
        X = DesignMatrix(("v1", "v2", "v3"), np.eye(3))
        fit = BinaryFit(names=X.names,
                        coefficients=np.array([logit(0.1), logit(0.2), logit(0.9)]),
                        converged=True, iterations=1, n_used=3)
        w, truncated, floored = compute_weights(fit, table, X=X)
        assert w[0] == pytest.approx(1.0 / (0.9 * 0.8), rel=1e-10)
        assert not truncated[0] and not floored[0]

    def test_all_certain_no_ice_gives_unit_weight(self):
        import pandas as pd

        table = pd.DataFrame({"subject": [0, 0], "visit": [1, 2], "event": [0, 0]})
        X = DesignMatrix(("v1", "v2"), np.eye(2))
        fit = BinaryFit(names=X.names, coefficients=np.array([-30.0, -30.0]),
                        converged=False, iterations=5, n_used=2)
        w, _, _ = compute_weights(fit, table, X=X)
        assert w[0] == pytest.approx(1.0, abs=1e-10)


class TestWeightModel:
    def test_no_ice_raises_degenerate(self):
        sc = default_scenario(n=80, seed=1, mcar_rate=0.0, mar_intercept=None,
                              haz_rescue=-60.0, haz_disc=-60.0, haz_both=-60.0)
        ds, _ = simulate_trial(sc)
        table = build_at_risk_table(ds)
        with pytest.raises(DegenerateOutcomeError):
            fit_weight_model(table, method_id=5)

    def test_constant_hazard_recovered(self):
        # intercept-only truth with p(event) ~ 0.109 per visit
        sc = default_scenario(
            n=4000, seed=2, mcar_rate=0.0, mar_intercept=None,
            haz_cur=0.0, haz_prev=0.0, haz_avg=0.0, haz_arm=0.0,
            haz_rescue=-2.5, haz_disc=-3.5, haz_both=-4.5)
        ds, _ = simulate_trial(sc)
        table = build_at_risk_table(ds)
        fit, X = fit_weight_model(table, method_id=5)
        p_event = fit.predict_proba(X.values)
        truth = sum(np.exp(c) for c in (-2.5, -3.5, -4.5))
        truth = truth / (1 + truth)
        assert p_event.mean() == pytest.approx(truth, abs=0.01)
        assert p_event.std() < 0.01

    def test_method8_collapses_missing_category(self, caplog):
        sc = default_scenario(n=600, seed=3, mcar_rate=0.0, mar_intercept=None, haz_both=-60.0, haz_disc=-60.0)
        ds, _ = simulate_trial(sc)
        table = build_at_risk_table(ds)
        with caplog.at_level("WARNING"):
            fit, _ = fit_weight_model(table, method_id=8)
        assert fit.collapsed


class TestAnalyzeIptw:
    def test_no_ice_no_missingness_equals_plain_ancova(self):
        sc = default_scenario(n=150, seed=4, mcar_rate=0.0, mar_intercept=None,
                              haz_rescue=-60.0, haz_disc=-60.0, haz_both=-60.0)
        ds, _ = simulate_trial(sc)
        est = analyze_iptw(mask_post_ice(ds), method_id=5, m=2, b=8, seed=0)
        arm = ds.frame["arm"].to_numpy(dtype=float)
        base = ds.frame["hba1c_base"].to_numpy(dtype=float)
        y = ds.frame["y10"].to_numpy(dtype=float)
        a1, a0, eff, *_ = ancova_estimates(y, arm, base, ("hba1c_base",))
        assert est.effect == pytest.approx(eff, abs=1e-10)
        assert est.arm1_mean == pytest.approx(a1, abs=1e-10)

    def test_confounded_trial_within_3se_of_truth(self):
        ds, truth = simulate_trial(default_scenario(n=900, seed=5))
        est = analyze_iptw(mask_post_ice(ds), method_id=5, m=5, b=40, seed=1)
        assert abs(est.effect - truth.estimand) < 3 * est.effect_se

    def test_determinism(self):
        ds, _ = simulate_trial(default_scenario(n=200, seed=6))
        m = mask_post_ice(ds)
        e1 = analyze_iptw(m, method_id=5, m=3, b=10, seed=7)
        e2 = analyze_iptw(m, method_id=5, m=3, b=10, seed=7)
        assert e1.effect == e2.effect
        assert e1.effect_se == e2.effect_se


class TestSaturatedOracle:
    def test_weighted_estimate_matches_enumeration(self):
        ds = build_toy_dataset()
        a1, a0, eff = enumeration_oracle()
        est = analyze_iptw(
            ds, method_id=5, m=2, b=4, seed=0,
            saturated=True, analysis_covariates=())
        assert est.arm1_mean == pytest.approx(a1, abs=1e-8)
        assert est.arm0_mean == pytest.approx(a0, abs=1e-8)
        assert est.effect == pytest.approx(eff, abs=1e-8)

    def test_oracle_differs_from_naive_completers(self):
        a1, a0, eff = enumeration_oracle()
        n1, n0 = naive_completer_means()
        assert abs((n1 - n0) - eff) > 1e-3

    def test_horvitz_thompson_balance(self):
        ds = build_toy_dataset()
        table = build_at_risk_table(ds)
        fit, X = fit_weight_model(table, method_id=5, saturated=True)
        w, _, _ = compute_weights(fit, table, X=X)
        frame = ds.frame
        free = (frame["rescue2"] == 0).to_numpy()
        for a in (0, 1):
            for b in (0.0, 1.0):
                for y1 in (0.0, 1.0):
                    cell = ((frame["arm"] == a) & (frame["hba1c_base"] == b)
                            & (frame["y1"] == y1)).to_numpy()
                    assert w[cell & free].sum() / cell.sum() == pytest.approx(1.0, abs=1e-6)
