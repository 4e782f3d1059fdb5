"""Survival datasets, risk tables, and Kaplan-Meier estimation.

Everything downstream (rank tests, estimands, design) consumes the
structures built here. Conventions: time is a nonnegative finite real
in whatever unit the caller likes (configs say months), event is 1 for
an observed event and 0 for censoring, arm is 0 for control and 1 for
treatment. At tied times events precede censorings, so a subject
censored at t still counts as at risk for the events at t.
"""

from __future__ import annotations

import csv

import numpy as np

ARM_CONTROL = 0
ARM_TREATMENT = 1

_SELECTORS = ("pooled", "control", "treatment")


class SurvivalDataset:
    """Immutable column store of (time, event, arm) records.

    Record order never affects any result; it is kept only so CSV
    round-trips are byte-identical.
    """

    __slots__ = ("time", "event", "arm")

    def __init__(self, time, event, arm):
        t = np.asarray(time, dtype=np.float64)
        e = np.asarray(event, dtype=np.int8)
        a = np.asarray(arm, dtype=np.int8)
        if t.ndim != 1 or e.shape != t.shape or a.shape != t.shape:
            raise ValueError("time, event, arm must be 1-d arrays of equal length")
        if t.size == 0:
            raise ValueError("dataset must contain at least one record")
        if not np.all(np.isfinite(t)):
            raise ValueError("times must be finite")
        if np.any(t < 0):
            raise ValueError("times must be nonnegative")
        if not np.all((e == 0) | (e == 1)):
            raise ValueError("event must be 0 or 1")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("arm must be 0 (control) or 1 (treatment)")
        for arr in (t, e, a):
            arr.flags.writeable = False
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", e)
        object.__setattr__(self, "arm", a)

    def __setattr__(self, name, value):
        raise AttributeError("SurvivalDataset is immutable")

    def __len__(self) -> int:
        return self.time.size

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    def n_per_arm(self):
        """(control count, treatment count)."""
        n1 = int(np.count_nonzero(self.arm))
        return len(self) - n1, n1


def _mask_for(data: SurvivalDataset, selector: str) -> np.ndarray:
    if selector == "pooled":
        return np.ones(len(data), dtype=bool)
    if selector == "control":
        return data.arm == ARM_CONTROL
    if selector == "treatment":
        return data.arm == ARM_TREATMENT
    raise ValueError(f"selector must be one of {_SELECTORS}, got {selector!r}")


def load_csv(path, columns=None, arm_labels=None) -> SurvivalDataset:
    """Read a dataset from a CSV file with a header row.

    columns maps the logical names "time", "event", "arm" to actual
    header names (default: identity). arm_labels maps raw arm cell
    values to 0/1 (default: "0" -> 0, "1" -> 1). Malformed input is
    rejected with the offending row and column named.
    """
    colmap = {"time": "time", "event": "event", "arm": "arm"}
    if columns:
        colmap.update(columns)
    labels = {"0": 0, "1": 1}
    if arm_labels:
        labels = {str(k): int(v) for k, v in arm_labels.items()}

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for logical, actual in colmap.items():
            if actual not in header:
                raise ValueError(
                    f"missing column {actual!r} (for {logical}) in {path}"
                )
        times, events, arms = [], [], []
        for i, row in enumerate(reader, start=1):
            raw_t = row.get(colmap["time"])
            raw_e = row.get(colmap["event"])
            raw_a = row.get(colmap["arm"])
            try:
                t = float(raw_t)
            except (TypeError, ValueError):
                raise ValueError(
                    f"row {i}: unparsable time {raw_t!r}"
                ) from None
            if not np.isfinite(t) or t < 0:
                raise ValueError(f"row {i}: time must be finite and >= 0, got {raw_t!r}")
            if raw_e not in ("0", "1"):
                raise ValueError(f"row {i}: event must be 0 or 1, got {raw_e!r}")
            if raw_a not in labels:
                raise ValueError(
                    f"row {i}: arm {raw_a!r} not among labels {sorted(labels)}"
                )
            times.append(t)
            events.append(int(raw_e))
            arms.append(labels[raw_a])
    if not times:
        raise ValueError(f"no data rows in {path}")
    return SurvivalDataset(times, events, arms)


def save_csv(data: SurvivalDataset, path) -> None:
    """Write `time,event,arm` rows; floats use shortest round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "event", "arm"])
        for t, e, a in zip(data.time, data.event, data.arm):
            writer.writerow([repr(float(t)), int(e), int(a)])


class RiskTable:
    """Pooled at-risk/event counts at each distinct pooled event time.

    Arrays are aligned and ascending in time: n/d pooled, n1/d1
    treatment, n0/d0 control. Every row has d >= 1.
    """

    __slots__ = ("time", "n", "d", "n1", "d1", "n0", "d0")

    def __init__(self, time, n, d, n1, d1, n0, d0):
        for name, arr in zip(self.__slots__, (time, n, d, n1, d1, n0, d0)):
            arr = np.asarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not (np.all(self.n == self.n0 + self.n1)
                and np.all(self.d == self.d0 + self.d1)):
            raise ValueError("risk table columns inconsistent across arms")
        if np.any(self.d < 1):
            raise ValueError("risk table row with no events")

    def __setattr__(self, name, value):
        raise AttributeError("RiskTable is immutable")

    def __len__(self) -> int:
        return self.time.size


def build_risk_table(data: SurvivalDataset) -> RiskTable:
    """Collapse a dataset to counts at pooled distinct event times."""
    if data.n_events == 0:
        raise ValueError("no events")
    ev_mask = data.event == 1
    t_events = np.unique(data.time[ev_mask])

    # at-risk = subjects with observed time >= t (censorings at t included)
    time1 = np.sort(data.time[data.arm == ARM_TREATMENT])
    time0 = np.sort(data.time[data.arm == ARM_CONTROL])
    n1 = time1.size - np.searchsorted(time1, t_events, side="left")
    n0 = time0.size - np.searchsorted(time0, t_events, side="left")

    et1 = np.sort(data.time[ev_mask & (data.arm == ARM_TREATMENT)])
    et0 = np.sort(data.time[ev_mask & (data.arm == ARM_CONTROL)])
    d1 = (np.searchsorted(et1, t_events, side="right")
          - np.searchsorted(et1, t_events, side="left"))
    d0 = (np.searchsorted(et0, t_events, side="right")
          - np.searchsorted(et0, t_events, side="left"))

    table = RiskTable(t_events, n1 + n0, d1 + d0, n1, d1, n0, d0)
    if int(table.d.sum()) != data.n_events:
        raise AssertionError("risk table lost events")  # pragma: no cover
    return table


class KMCurve:
    """Kaplan-Meier step function with Greenwood variance.

    time holds the distinct event times of the estimated subset; surv
    is S(t_i), surv_left the left limit S(t_i-) (1 at the first event),
    var the Greenwood variance of S(t_i). S(t) = 1 for t before the
    first event. Where S hits exactly 0 the variance is reported as 0.
    """

    __slots__ = ("time", "surv", "surv_left", "var")

    def __init__(self, time, surv, surv_left, var):
        for name, arr in zip(self.__slots__, (time, surv, surv_left, var)):
            arr = np.asarray(arr, dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __setattr__(self, name, value):
        raise AttributeError("KMCurve is immutable")

    def _step_at(self, t, values, before):
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if self.time.size == 0:
            out = np.full(t_arr.shape, before)
        else:
            idx = np.searchsorted(self.time, t_arr, side="right")
            out = np.where(idx == 0, before, values[np.maximum(idx - 1, 0)])
        return float(out[0]) if np.isscalar(t) or np.ndim(t) == 0 else out

    def survival_at(self, t):
        """Right-continuous step evaluation; scalar in, scalar out."""
        return self._step_at(t, self.surv, 1.0)

    def left_survival_at(self, t):
        """S(t-), the value just before t; 1 at and before the first event."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if self.time.size == 0:
            out = np.ones(t_arr.shape)
        else:
            idx = np.searchsorted(self.time, t_arr, side="left")
            out = np.where(idx == 0, 1.0, self.surv[np.maximum(idx - 1, 0)])
        return float(out[0]) if np.isscalar(t) or np.ndim(t) == 0 else out

    def variance_at(self, t):
        return self._step_at(t, self.var, 0.0)


def km_estimate(data: SurvivalDataset, selector: str = "pooled") -> KMCurve:
    """Kaplan-Meier estimate over one arm or the pooled sample."""
    mask = _mask_for(data, selector)
    if not mask.any():
        raise ValueError(f"no records in {selector!r} subset")
    time = data.time[mask]
    event = data.event[mask]

    ev_times = np.unique(time[event == 1])
    if ev_times.size == 0:
        empty = np.empty(0)
        return KMCurve(empty, empty, empty, empty)

    t_sorted = np.sort(time)
    n_at = time.size - np.searchsorted(t_sorted, ev_times, side="left")
    et_sorted = np.sort(time[event == 1])
    d_at = (np.searchsorted(et_sorted, ev_times, side="right")
            - np.searchsorted(et_sorted, ev_times, side="left"))

    surv = np.cumprod(1.0 - d_at / n_at)
    surv_left = np.concatenate(([1.0], surv[:-1]))
    # Greenwood accumulator sum d/(n(n-d)); blows up only where S drops to 0
    terms = np.full(ev_times.size, np.inf)
    ok = n_at > d_at
    terms[ok] = d_at[ok] / (n_at[ok] * (n_at[ok] - d_at[ok]).astype(float))
    acc = np.cumsum(terms)
    var = np.zeros_like(surv)
    alive = surv > 0.0
    var[alive] = surv[alive] ** 2 * acc[alive]
    return KMCurve(ev_times, surv, surv_left, var)


def km_median(curve: KMCurve):
    """Smallest time with S(t) <= 0.5, or None if S stays above 0.5."""
    below = np.nonzero(curve.surv <= 0.5)[0]
    if below.size == 0:
        return None
    return float(curve.time[below[0]])
