"""Registry mapping method ids 1-17 to their pipelines.

The registry owns the data-handling contract of each estimator: ids 1-8 are
fitted on post-event-masked data, ids 9-17 use the unmasked data, and every
pipeline restricts to the analysis set (baseline HbA1c present plus at least
one follow-up outcome) first. Method 0 is the naive event-free-completer
regression, kept as a diagnostic baseline.
"""

import time
from dataclasses import dataclass

import numpy as np

from .data import build_ice_history, mask_post_ice, restrict_analysis_set
from .errors import ConfigError
from .gestimation import analyze_gestimation
from .gformula import analyze_gformula
from .gformula_mi import analyze_gformula_mi
from .inference import EstimateTriple, ancova_estimates
from .iptw import analyze_iptw
from .mi import analyze_mi
from .mmrm import analyze_mmrm


@dataclass(frozen=True)
class MethodInfo:
    method_id: int
    label: str
    family: str
    masks_post_ice: bool
    uses_mi: bool
    ice_mode: str  # binary / categorical / none


REGISTRY = {
    0: MethodInfo(0, "Naive event-free completers (diagnostic)", "naive", True, False, "none"),
    1: MethodInfo(1, "Repeated-measures model", "mmrm", True, False, "none"),
    2: MethodInfo(2, "MI: HbA1c and treatment", "mi", True, True, "none"),
    3: MethodInfo(3, "MI: + baseline covariates", "mi", True, True, "none"),
    4: MethodInfo(4, "MI: + time-varying covariates", "mi", True, True, "none"),
    5: MethodInfo(5, "IPW: HbA1c and treatment", "iptw", True, True, "binary"),
    6: MethodInfo(6, "IPW: + baseline covariates", "iptw", True, True, "binary"),
    7: MethodInfo(7, "IPW: + time-varying covariates", "iptw", True, True, "binary"),
    8: MethodInfo(8, "IPW: separate event mechanisms", "iptw", True, True, "categorical"),
    9: MethodInfo(9, "G-formula: HbA1c and treatment", "gformula", False, False, "binary"),
    10: MethodInfo(10, "G-formula: all covariates", "gformula", False, False, "binary"),
    11: MethodInfo(11, "G-formula: separate event mechanisms", "gformula", False, False, "categorical"),
    12: MethodInfo(12, "G-formula via MI: HbA1c and treatment", "gformula_mi", False, True, "binary"),
    13: MethodInfo(13, "G-formula via MI: all covariates", "gformula_mi", False, True, "binary"),
    14: MethodInfo(14, "G-formula via MI: separate event mechanisms", "gformula_mi", False, True, "categorical"),
    15: MethodInfo(15, "G-estimation: HbA1c and treatment", "gestimation", False, True, "binary"),
    16: MethodInfo(16, "G-estimation: all covariates", "gestimation", False, True, "binary"),
    17: MethodInfo(17, "G-estimation: separate event mechanisms", "gestimation", False, True, "categorical"),
}


def _naive_completers(dataset, method_id=0):
    """Unweighted final-visit regression among observed event-free subjects."""
    hist = build_ice_history(dataset)
    y = dataset.frame[f"y{dataset.K}"].to_numpy(dtype=float)
    keep = (hist.first_visit == 0) & np.isfinite(y)
    arm = dataset.frame["arm"].to_numpy(dtype=float)[keep]
    base = dataset.frame["hba1c_base"].to_numpy(dtype=float)[keep]
    a1, a0, eff, s1, s0, se = ancova_estimates(y[keep], arm, base, ("hba1c_base",))
    return EstimateTriple(
        method_id=method_id, arm1_mean=a1, arm1_se=s1, arm0_mean=a0, arm0_se=s0,
        effect=eff, effect_se=se, diagnostics={"n_completers": int(keep.sum())})


def run_method(method_id, dataset, m=100, b=100, iterations=5, copies=10,
               gformula_b=500, seed=0, deterministic=False, truncation=None,
               stabilize=False):
    """Dispatch one analysis; returns its EstimateTriple with wall time set."""
    if method_id not in REGISTRY:
        raise ConfigError(f"unknown method id {method_id}")
    info = REGISTRY[method_id]
    t0 = time.perf_counter()
    data = restrict_analysis_set(dataset)
    if info.masks_post_ice:
        data = mask_post_ice(data)
    if method_id == 0:
        est = _naive_completers(data)
    elif method_id == 1:
        est = analyze_mmrm(data)
    elif method_id in (2, 3, 4):
        est = analyze_mi(data, method_id, m=m, iterations=iterations, seed=seed)
    elif method_id in (5, 6, 7, 8):
        est = analyze_iptw(data, method_id, m=m, b=b, iterations=iterations,
                           seed=seed, truncation=truncation, stabilize=stabilize)
    elif method_id in (9, 10, 11):
        est = analyze_gformula(data, method_id, b=gformula_b, copies=copies,
                               seed=seed, deterministic=deterministic)
    elif method_id in (12, 13, 14):
        est = analyze_gformula_mi(data, method_id, m=m, iterations=iterations, seed=seed)
    else:
        est = analyze_gestimation(data, method_id, m=m, b=b,
                                  iterations=iterations, seed=seed)
    wall = time.perf_counter() - t0
    return EstimateTriple(
        method_id=est.method_id,
        arm1_mean=est.arm1_mean, arm1_se=est.arm1_se,
        arm0_mean=est.arm0_mean, arm0_se=est.arm0_se,
        effect=est.effect, effect_se=est.effect_se,
        diagnostics=est.diagnostics, wall_time_s=wall)
