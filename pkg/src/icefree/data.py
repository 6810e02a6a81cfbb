"""Canonical trial data model.

A trial is stored wide: one row per subject with columns

    id, arm, age, sex, bmi_cat, sbp, duration, cpeptide, hba1c_base,
    y{k}, fpg{k}, egfr{k}, rescue{k}, disc{k}      for k = 1..K

where ``y{k}`` is the change in HbA1c from baseline at visit k (missable),
``fpg{k}``/``egfr{k}`` are time-varying covariates (missable), and
``rescue{k}``/``disc{k}`` are monotone absorbing event flags. Empty CSV cells
are missing values. The visit schedule (weeks since randomization) lives in
the run configuration; the default is ten visits ending at week 52.
"""

import io
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DuplicateRowError, InvalidDataError, MonotonicityViolationError, SchemaError

BASELINE_COLS = ("age", "sex", "bmi_cat", "sbp", "duration", "cpeptide", "hba1c_base")

# Fortnightly visits over the first 12 weeks, then quarterly out to week 52.
DEFAULT_WEEKS = (2, 4, 6, 8, 10, 12, 24, 36, 48, 52)


@dataclass(frozen=True)
class VisitSchedule:
    weeks: tuple

    def __post_init__(self):
        weeks = tuple(float(w) for w in self.weeks)
        if len(weeks) < 1:
            raise InvalidDataError("visit schedule must have at least one visit")
        if any(b <= a for a, b in zip(weeks, weeks[1:])):
            raise InvalidDataError("visit weeks must be strictly increasing")
        object.__setattr__(self, "weeks", weeks)

    @property
    def n_visits(self):
        return len(self.weeks)


DEFAULT_SCHEDULE = VisitSchedule(DEFAULT_WEEKS)


def visit_columns(K):
    cols = []
    for k in range(1, K + 1):
        cols += [f"y{k}", f"fpg{k}", f"egfr{k}", f"rescue{k}", f"disc{k}"]
    return cols


def all_columns(K):
    return ["id", "arm", *BASELINE_COLS, *visit_columns(K)]


@dataclass(frozen=True)
class TrialDataset:
    """Wide-format trial data plus its visit schedule. Treat as immutable:
    every transform returns a new dataset."""

    frame: pd.DataFrame
    schedule: VisitSchedule

    def __post_init__(self):
        K = self.schedule.n_visits
        frame = self.frame
        missing = [c for c in all_columns(K) if c not in frame.columns]
        if missing:
            raise SchemaError(f"missing columns: {missing}")
        if frame["id"].duplicated().any():
            raise SchemaError("duplicate subject ids")
        arm = frame["arm"]
        if arm.isna().any():
            raise SchemaError("arm must be non-missing")
        if not set(arm.unique()) <= {0, 1}:
            raise SchemaError("arm must be coded 0/1")
        _check_monotone_flags(frame, K)
        frame = frame.reset_index(drop=True)
        object.__setattr__(self, "frame", frame)

    @property
    def n(self):
        return len(self.frame)

    @property
    def K(self):
        return self.schedule.n_visits

    def y_matrix(self):
        return self.frame[[f"y{k}" for k in range(1, self.K + 1)]].to_numpy(dtype=float)

    def flag_matrix(self, kind):
        cols = [f"{kind}{k}" for k in range(1, self.K + 1)]
        return self.frame[cols].to_numpy(dtype=float)

    def with_frame(self, frame):
        return TrialDataset(frame, self.schedule)


def _check_monotone_flags(frame, K):
    for kind in ("rescue", "disc"):
        flags = frame[[f"{kind}{k}" for k in range(1, K + 1)]].to_numpy(dtype=float)
        bad_vals = ~(np.isnan(flags) | (flags == 0) | (flags == 1))
        if bad_vals.any():
            raise SchemaError(f"{kind} flags must be 0/1 or missing")
        seen = np.fmax.accumulate(np.where(np.isnan(flags), -np.inf, flags), axis=1)
        prev_seen = np.concatenate([np.full((flags.shape[0], 1), -np.inf), seen[:, :-1]], axis=1)
        bad = (flags == 0) & (prev_seen == 1)
        if bad.any():
            i, k = np.argwhere(bad)[0]
            raise MonotonicityViolationError(frame["id"].iloc[i], int(k) + 1)


@dataclass(frozen=True)
class IceHistory:
    """Per-subject ICE coding across visits.

    binary[i, k-1]      1 once the subject has had rescue and/or discontinuation
                        by visit k (monotone).
    categorical[i, k-1] 0 none, 1 rescue only, 2 discontinuation only, 3 both,
                        evaluated cumulatively at visit k.
    weeks_since[i, k-1] weeks since the first ICE; 0 before and at the visit of
                        first occurrence.
    first_visit[i]      1-based visit of first occurrence, 0 if ICE-free.
    """

    binary: np.ndarray
    categorical: np.ndarray
    weeks_since: np.ndarray
    first_visit: np.ndarray


def build_ice_history(dataset):
    """Derive the combined ICE coding from the raw rescue/discontinuation flags."""
    rescue = dataset.flag_matrix("rescue")
    disc = dataset.flag_matrix("disc")
    if np.isnan(rescue).any() or np.isnan(disc).any():
        raise InvalidDataError("event flags must be non-missing to build an ICE history")
    rescue = rescue.astype(int)
    disc = disc.astype(int)
    binary = np.maximum(rescue, disc)
    categorical = rescue + 2 * disc
    first = np.where(binary.any(axis=1), binary.argmax(axis=1) + 1, 0)
    weeks = weeks_since_ice(binary, dataset.schedule)
    return IceHistory(binary=binary, categorical=categorical, weeks_since=weeks, first_visit=first)


def weeks_since_ice(binary, schedule):
    """weeks[k] - weeks[first occurrence], and 0 before or at the first occurrence."""
    binary = np.atleast_2d(np.asarray(binary, dtype=int))
    weeks = np.asarray(schedule.weeks)
    n, K = binary.shape
    if K != schedule.n_visits:
        raise InvalidDataError("history width does not match schedule")
    out = np.zeros((n, K))
    has = binary.any(axis=1)
    first = np.where(has, binary.argmax(axis=1), 0)
    for i in np.flatnonzero(has):
        j = first[i]
        out[i, j + 1:] = weeks[j + 1:] - weeks[j]
    return out


def mask_post_ice(dataset):
    """Set y/fpg/egfr to missing strictly after the first ICE visit.

    The visit of first occurrence keeps its values (the measurement precedes
    the event decision at that visit). Idempotent; the input is untouched.
    """
    hist = build_ice_history(dataset)
    frame = dataset.frame.copy()
    K = dataset.K
    for k in range(2, K + 1):
        # visits strictly after the first occurrence: first_visit < k
        hit = (hist.first_visit > 0) & (hist.first_visit < k)
        if hit.any():
            for stem in ("y", "fpg", "egfr"):
                col = frame.columns.get_loc(f"{stem}{k}")
                frame.iloc[np.flatnonzero(hit), col] = np.nan
    return dataset.with_frame(frame)


def wide_to_long(dataset):
    """One row per (subject, visit), carrying all time-varying fields."""
    K = dataset.K
    base = dataset.frame[["id", "arm", *BASELINE_COLS]]
    pieces = []
    for k in range(1, K + 1):
        piece = base.copy()
        piece["visit"] = k
        piece["week"] = dataset.schedule.weeks[k - 1]
        for stem in ("y", "fpg", "egfr", "rescue", "disc"):
            piece[stem] = dataset.frame[f"{stem}{k}"].to_numpy()
        pieces.append(piece)
    long = pd.concat(pieces, ignore_index=True)
    return long.sort_values(["id", "visit"], kind="stable").reset_index(drop=True)


def long_to_wide(long, schedule):
    """Inverse of wide_to_long; missing (id, visit) combinations fill with NaN."""
    if long.duplicated(subset=["id", "visit"]).any():
        dup = long[long.duplicated(subset=["id", "visit"])].iloc[0]
        raise DuplicateRowError(f"duplicate row for id={dup['id']!r} visit={dup['visit']}")
    K = schedule.n_visits
    first = long.groupby("id", sort=True).first().reset_index()
    wide = first[["id", "arm", *BASELINE_COLS]].copy()
    index = pd.Index(wide["id"])
    for k in range(1, K + 1):
        sub = long[long["visit"] == k].set_index("id")
        for stem in ("y", "fpg", "egfr", "rescue", "disc"):
            col = sub[stem].reindex(index)
            wide[f"{stem}{k}"] = col.to_numpy()
    return TrialDataset(wide, schedule)


@dataclass(frozen=True)
class PositivityReport:
    table: pd.DataFrame
    summary: pd.DataFrame
    warnings: tuple


def positivity_diagnostics(dataset, thresholds):
    """Empirical check that crossing the rescue threshold does not force rescue.

    thresholds maps visit -> FPG cutoff for the visits where rescue is
    possible. Returns a plot-ready person-visit table plus per-visit counts of
    above-threshold subjects (not yet on rescue coming into the visit) who did
    and did not initiate rescue; a visit where every such subject initiated
    rescue is flagged as a positivity warning.
    """
    frame = dataset.frame
    K = dataset.K
    rows = []
    warnings = []
    summary_rows = []
    for k in sorted(thresholds):
        if not 1 <= k <= K:
            raise InvalidDataError(f"threshold visit {k} outside schedule")
        thr = float(thresholds[k])
        fpg = frame[f"fpg{k}"].to_numpy(dtype=float)
        on_rescue = frame[f"rescue{k}"].to_numpy(dtype=float) == 1
        prev = frame[f"rescue{k - 1}"].to_numpy(dtype=float) == 1 if k > 1 else np.zeros(len(frame), bool)
        measured = np.isfinite(fpg)
        above = measured & (fpg > thr)
        at_risk = ~prev
        rows.append(pd.DataFrame({
            "id": frame["id"],
            "visit": k,
            "fpg": fpg,
            "threshold": thr,
            "rescue_initiated": on_rescue.astype(int),
            "above_threshold": above.astype(int),
        }))
        n_above = int(np.sum(above & at_risk))
        n_non_init = int(np.sum(above & at_risk & ~on_rescue))
        summary_rows.append({
            "visit": k,
            "threshold": thr,
            "n_above_threshold_at_risk": n_above,
            "n_above_not_initiating": n_non_init,
        })
        if n_above > 0 and n_non_init == 0:
            warnings.append(
                f"visit {k}: all {n_above} above-threshold at-risk subjects initiated rescue"
            )
    table = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(
        columns=["id", "visit", "fpg", "threshold", "rescue_initiated", "above_threshold"])
    summary = pd.DataFrame(summary_rows)
    return PositivityReport(table=table, summary=summary, warnings=tuple(warnings))


def restrict_analysis_set(dataset):
    """Keep subjects with a baseline HbA1c and at least one follow-up outcome."""
    y = dataset.y_matrix()
    keep = np.isfinite(dataset.frame["hba1c_base"].to_numpy(dtype=float))
    keep &= np.isfinite(y).any(axis=1)
    if keep.all():
        return dataset
    return dataset.with_frame(dataset.frame.loc[keep].reset_index(drop=True))


def hba1c_lag_features(dataset):
    """Absolute-scale HbA1c history features per (subject, visit).

    Returns (current, prev, running) arrays of shape (n, K): the absolute
    HbA1c at the visit, at the previous visit, and its running average up to
    the previous visit. At visit 1 both history values fall back to the
    baseline HbA1c. NaNs propagate from missing outcomes.
    """
    base = dataset.frame["hba1c_base"].to_numpy(dtype=float)
    y = dataset.y_matrix()
    K = dataset.K
    absolute = base[:, None] + y
    prev = np.concatenate([base[:, None], absolute[:, : K - 1]], axis=1)
    running = np.empty_like(prev)
    csum = np.cumsum(np.concatenate([base[:, None], absolute[:, : K - 1]], axis=1), axis=1)
    for k in range(K):
        running[:, k] = csum[:, k] / (k + 1)
    return absolute, prev, running


def timevarying_lag_features(dataset, stem):
    """Lag-1 value and running average for fpg/egfr.

    No baseline measurement exists in the schema, so the visit-1 history
    values fall back to the visit-1 measurement itself.
    """
    cols = [f"{stem}{k}" for k in range(1, dataset.K + 1)]
    x = dataset.frame[cols].to_numpy(dtype=float)
    K = dataset.K
    prev = np.concatenate([x[:, :1], x[:, : K - 1]], axis=1)
    running = np.empty_like(prev)
    csum = np.cumsum(prev, axis=1)
    for k in range(K):
        running[:, k] = csum[:, k] / (k + 1)
    return prev, running


_AGE_BAND_FALLBACK_LOW = 24.0  # midpoint of the open 18-30 band


def _parse_age(value):
    """Accept raw years or 5-year band labels like '50-54' (midpoint)."""
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return np.nan
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    if text == "":
        return np.nan
    if "-" in text:
        lo, hi = text.split("-", 1)
        try:
            lo, hi = float(lo), float(hi)
        except ValueError:
            raise SchemaError(f"unparseable age band {text!r}")
        if (lo, hi) == (18.0, 30.0):
            return _AGE_BAND_FALLBACK_LOW
        return (lo + hi) / 2.0
    try:
        return float(text)
    except ValueError:
        raise SchemaError(f"unparseable age value {text!r}")


def read_trial_csv(path_or_buffer, schedule=DEFAULT_SCHEDULE):
    """Ingest the wide CSV schema; empty cells are missing values."""
    frame = pd.read_csv(path_or_buffer, dtype={"id": str})
    K = schedule.n_visits
    missing = [c for c in all_columns(K) if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")
    frame["age"] = [_parse_age(v) for v in frame["age"]]
    for col in all_columns(K):
        if col == "id":
            continue
        frame[col] = pd.to_numeric(frame[col], errors="raise")
    return TrialDataset(frame[all_columns(K)], schedule)


def write_trial_csv(dataset, path):
    dataset.frame.to_csv(path, index=False)


def trial_csv_text(dataset):
    buf = io.StringIO()
    dataset.frame.to_csv(buf, index=False)
    return buf.getvalue()
