"""Small discrete two-visit instance with a brute-force standardization oracle.

Construction: baseline b in {0,1} with arms exactly balanced within b; a
binary visit-1 outcome y1; a deterministic visit-2 outcome y2 = f(a, b, y1);
no events possible at visit 1; a visit-2 rescue probability that depends on
(a, b, y1), so event-free completers are a biased subset. Because y2 is
deterministic given (a, b, y1) and the arms are balanced within b, saturated
IPTW and saturated G-formula (deterministic-mean mode) must both reproduce
the enumeration oracle exactly.
"""

import numpy as np
import pandas as pd

from icefree.data import TrialDataset, VisitSchedule

# (arm, b) -> (count y1=0, count y1=1)
Y1_COUNTS = {
    (0, 0): (6, 2),
    (1, 0): (4, 4),
    (0, 1): (3, 5),
    (1, 1): (5, 3),
}
# (arm, b, y1) -> number of rescue events at visit 2 within the cell
RESCUE_COUNTS = {
    (0, 0, 0): 2, (0, 0, 1): 1,
    (1, 0, 0): 1, (1, 0, 1): 0,
    (0, 1, 0): 1, (0, 1, 1): 2,
    (1, 1, 0): 1, (1, 1, 1): 1,
}


def outcome(a, b, y1):
    return -1.0 - 0.3 * a + 0.5 * b + 0.8 * y1 + 0.1 * a * y1


def build_toy_dataset():
    rows = []
    i = 0
    for (a, b), (c0, c1) in Y1_COUNTS.items():
        for y1, count in ((0, c0), (1, c1)):
            n_resc = RESCUE_COUNTS[(a, b, y1)]
            for j in range(count):
                rescued = j < n_resc
                rows.append({
                    "id": f"t{i:03d}", "arm": a,
                    "age": 58.0, "sex": 0, "bmi_cat": 1, "sbp": 139.0,
                    "duration": 7.0, "cpeptide": 0.9, "hba1c_base": float(b),
                    "y1": float(y1), "fpg1": 10.0, "egfr1": 85.0,
                    "rescue1": 0, "disc1": 0,
                    "y2": outcome(a, b, y1), "fpg2": 10.0, "egfr2": 85.0,
                    "rescue2": int(rescued), "disc2": 0,
                })
                i += 1
    frame = pd.DataFrame(rows)
    return TrialDataset(frame, VisitSchedule((2, 4)))


def enumeration_oracle():
    """Nonparametric standardization over the empirical distribution."""
    total = sum(sum(v) for v in Y1_COUNTS.values())
    means = {}
    for a in (0, 1):
        acc = 0.0
        for b in (0, 1):
            n_ab = sum(Y1_COUNTS[(a, b)])
            p_b = sum(sum(Y1_COUNTS[(arm, b)]) for arm in (0, 1)) / total
            for y1, count in zip((0, 1), Y1_COUNTS[(a, b)]):
                p_y1 = count / n_ab
                acc += p_b * p_y1 * outcome(a, b, y1)
        means[a] = acc
    return means[1], means[0], means[1] - means[0]


def naive_completer_means():
    """Unweighted completer means per arm (biased under confounded rescue)."""
    sums = {0: 0.0, 1: 0.0}
    counts = {0: 0, 1: 0}
    for (a, b), (c0, c1) in Y1_COUNTS.items():
        for y1, count in ((0, c0), (1, c1)):
            free = count - RESCUE_COUNTS[(a, b, y1)]
            sums[a] += free * outcome(a, b, y1)
            counts[a] += free
    return sums[1] / counts[1], sums[0] / counts[0]
