"""Piecewise-exponential trial simulation and operating characteristics.

A trial scenario bundles per-arm piecewise-constant hazards, an
enrollment pattern, an exponential dropout rate, and a data cutoff
rule. Generation is fully deterministic: subject j consumes counters
3j, 3j+1, 3j+2 (enrollment, event, dropout) of the counter RNG, and
replicate r of an operating-characteristics run derives its own seed
from the master seed, so any single replicate can be reproduced in
isolation and aggregation order cannot change results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr

from ._backend import USING_NUMBA, njit
from .data import SurvivalDataset, build_risk_table, km_estimate
from .mvnorm import mvn_rectangle
from .ranktests import as_combo, combo_correlation, wlr_test
from .rng import derive_seed, uniform01

LN2 = float(np.log(2.0))


class PiecewiseHazard:
    """Hazard that is constant on segments; the last segment is open.

    cutpoints are the ascending switch times (the first segment starts
    at 0 implicitly), rates has one entry per segment.
    """

    __slots__ = ("cutpoints", "rates", "_cum")

    def __init__(self, cutpoints, rates):
        cp = np.asarray(cutpoints, dtype=np.float64)
        r = np.asarray(rates, dtype=np.float64)
        if cp.ndim != 1 or r.ndim != 1 or r.size != cp.size + 1:
            raise ValueError("need one rate per segment: len(rates) == len(cutpoints)+1")
        if cp.size and (np.any(cp <= 0) or np.any(np.diff(cp) <= 0)):
            raise ValueError("cutpoints must be positive and strictly ascending")
        if np.any(r <= 0):
            raise ValueError("rates must be positive")
        # cumulative hazard at each cutpoint
        seg = np.diff(np.concatenate(([0.0], cp)))
        cum = np.concatenate(([0.0], np.cumsum(seg * r[:-1])))
        for arr in (cp, r, cum):
            arr.flags.writeable = False
        object.__setattr__(self, "cutpoints", cp)
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "_cum", cum)

    def __setattr__(self, name, value):
        raise AttributeError("PiecewiseHazard is immutable")

    def __reduce__(self):
        # immutability breaks default slot unpickling; rebuild instead
        return (PiecewiseHazard, (self.cutpoints.tolist(), self.rates.tolist()))

    def __eq__(self, other):
        if not isinstance(other, PiecewiseHazard):
            return NotImplemented
        return (np.array_equal(self.cutpoints, other.cutpoints)
                and np.array_equal(self.rates, other.rates))

    def __hash__(self):
        return hash((tuple(self.cutpoints), tuple(self.rates)))

    def cumulative_hazard(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.cutpoints, t, side="right")
        start = np.concatenate(([0.0], self.cutpoints))
        return self._cum[idx] + self.rates[idx] * (t - start[idx])

    def survival(self, t):
        return np.exp(-self.cumulative_hazard(t))

    def invert(self, total_hazard):
        """Time at which the cumulative hazard reaches the given value."""
        e = np.asarray(total_hazard, dtype=np.float64)
        idx = np.searchsorted(self._cum, e, side="right") - 1
        idx = np.clip(idx, 0, self.rates.size - 1)
        start = np.concatenate(([0.0], self.cutpoints))
        return start[idx] + (e - self._cum[idx]) / self.rates[idx]


if USING_NUMBA:

    @njit(cache=True)
    def _invert_kernel(e, cum, starts, rates):  # pragma: no cover
        out = np.empty(e.size)
        for i in range(e.size):
            j = rates.size - 1
            for k in range(1, cum.size):
                if cum[k] > e[i]:
                    j = k - 1
                    break
            out[i] = starts[j] + (e[i] - cum[j]) / rates[j]
        return out

    def _invert(h: PiecewiseHazard, e: np.ndarray) -> np.ndarray:
        starts = np.concatenate(([0.0], h.cutpoints))
        return _invert_kernel(np.asarray(e, dtype=np.float64), h._cum,
                              starts, h.rates)

else:

    def _invert(h: PiecewiseHazard, e: np.ndarray) -> np.ndarray:
        return np.atleast_1d(h.invert(e))


def sample_event_time(h: PiecewiseHazard, u):
    """Inverse-CDF draw(s): exhaust -log(u) across the hazard segments."""
    u_arr = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if np.any((u_arr <= 0.0) | (u_arr >= 1.0)):
        raise ValueError("u must lie strictly inside (0, 1)")
    out = _invert(h, -np.log(u_arr))
    return float(out[0]) if np.ndim(u) == 0 else out


@dataclass(frozen=True)
class EnrollmentModel:
    kind: str  # "uniform" or "instantaneous"
    duration: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "instantaneous"):
            raise ValueError("enrollment kind must be 'uniform' or 'instantaneous'")
        if self.kind == "uniform" and self.duration <= 0:
            raise ValueError("uniform enrollment needs a positive duration")

    def times(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "instantaneous":
            return np.zeros(u.shape)
        return u * self.duration


@dataclass(frozen=True)
class CutoffRule:
    kind: str  # "calendar", "events", "later_of"
    calendar: Optional[float] = None
    events: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("calendar", "events", "later_of"):
            raise ValueError("cutoff kind must be 'calendar', 'events', or 'later_of'")
        if self.kind in ("calendar", "later_of"):
            if self.calendar is None or self.calendar <= 0:
                raise ValueError(f"{self.kind} cutoff needs a positive calendar time")
        if self.kind in ("events", "later_of"):
            if self.events is None or self.events < 1:
                raise ValueError(f"{self.kind} cutoff needs a positive event count")


@dataclass(frozen=True)
class TrialScenario:
    label: str
    n_per_arm: int
    enrollment: EnrollmentModel
    control_hazard: PiecewiseHazard
    treatment_hazard: PiecewiseHazard
    dropout_rate: float
    cutoff: CutoffRule

    def __post_init__(self):
        if self.n_per_arm < 1:
            raise ValueError("n_per_arm must be at least 1")
        if self.dropout_rate < 0:
            raise ValueError("dropout rate must be nonnegative")


@dataclass(frozen=True)
class LatentTrial:
    """Calendar enrollment plus latent event/dropout times, pre-cutoff."""
    enroll: np.ndarray
    event_time: np.ndarray
    dropout_time: np.ndarray
    arm: np.ndarray


def simulate_latent(scenario: TrialScenario, seed: int) -> LatentTrial:
    n = scenario.n_per_arm
    total = 2 * n
    u = uniform01(seed, np.arange(3 * total, dtype=np.int64)).reshape(total, 3)
    arm = np.repeat(np.array([0, 1], dtype=np.int8), n)
    enroll = scenario.enrollment.times(u[:, 0])
    event = np.empty(total)
    event[:n] = _invert(scenario.control_hazard, -np.log(u[:n, 1]))
    event[n:] = _invert(scenario.treatment_hazard, -np.log(u[n:, 1]))
    if scenario.dropout_rate > 0:
        dropout = -np.log(u[:, 2]) / scenario.dropout_rate
    else:
        dropout = np.full(total, np.inf)
    return LatentTrial(enroll, event, dropout, arm)


def resolve_cutoff(latent: LatentTrial, rule: CutoffRule) -> float:
    """Calendar time at which the analysis snapshot is taken."""
    if rule.kind == "calendar":
        return float(rule.calendar)
    # an event is only ever observed if it precedes the dropout
    has_event = latent.event_time <= latent.dropout_time
    ev_cal = np.sort(latent.enroll[has_event] + latent.event_time[has_event])
    if ev_cal.size < rule.events:
        raise ValueError(
            f"cutoff needs {rule.events} events but only {ev_cal.size} can occur")
    kth = float(ev_cal[rule.events - 1])
    if rule.kind == "events":
        return kth
    return max(kth, float(rule.calendar))


def apply_cutoff(latent: LatentTrial, rule: CutoffRule) -> SurvivalDataset:
    """Censor the latent trial at the resolved calendar cutoff."""
    cut = resolve_cutoff(latent, rule)
    keep = latent.enroll <= cut
    if not keep.any():
        raise ValueError("no subjects enrolled before the cutoff")
    enroll = latent.enroll[keep]
    ev = latent.event_time[keep]
    dr = latent.dropout_time[keep]
    horizon = cut - enroll
    observed = np.minimum(ev, np.minimum(dr, horizon))
    # the event flag compares calendar times with the same arithmetic
    # the cutoff resolution used, so the k-th event of an event-count
    # rule cannot be lost to a one-ulp horizon round-off
    event = (ev <= dr) & (enroll + ev <= cut)
    return SurvivalDataset(observed, event.astype(np.int8), latent.arm[keep])


def simulate_trial(scenario: TrialScenario, seed: int) -> SurvivalDataset:
    """One fully deterministic trial: generate, then cut."""
    return apply_cutoff(simulate_latent(scenario, seed), scenario.cutoff)


# --- scenario library ---------------------------------------------------

def _strong_null_1():
    # control exponential median 15; treatment worse until month 6 and
    # better after, with the exact post-6 rate that makes the two
    # survival curves meet at month 36 (display value 0.04)
    late = (36.0 * LN2 / 15.0 - 6.0 * LN2 / 9.0) / 30.0
    return TrialScenario(
        "strong_null_1", 100,
        EnrollmentModel("uniform", 12.0),
        PiecewiseHazard([], [LN2 / 15.0]),
        PiecewiseHazard([6.0], [LN2 / 9.0, late]),
        0.0, CutoffRule("calendar", calendar=36.0))


def _severe_late_crossing():
    # same early excess harm, but the late hazard 0.036 lets the curves
    # cross inside the window (just after month 24), leaving a small
    # late benefit; 0.036 reproduces the published rejection rates
    # where the derive-from-crossing-at-27 value 0.0374 does not
    return TrialScenario(
        "severe_late_crossing", 100,
        EnrollmentModel("uniform", 12.0),
        PiecewiseHazard([], [LN2 / 15.0]),
        PiecewiseHazard([6.0], [LN2 / 9.0, 0.036]),
        0.0, CutoffRule("calendar", calendar=36.0))


def _strong_null_2():
    # this scenario runs on a year scale: control median 2.77 years,
    # treatment hazard 4/year for the first 0.1 year (a third die in
    # the first 1.2 months) then 0.19, curves converging but never
    # crossing before the 5-year cutoff
    return TrialScenario(
        "strong_null_2", 1000,
        EnrollmentModel("instantaneous"),
        PiecewiseHazard([], [0.25]),
        PiecewiseHazard([0.1], [4.0, 0.19]),
        0.0, CutoffRule("calendar", calendar=5.0))


def _ph_marginal():
    return TrialScenario(
        "ph_marginal", 236,
        EnrollmentModel("uniform", 15.0),
        PiecewiseHazard([], [LN2 / 8.0]),
        PiecewiseHazard([], [0.692 * LN2 / 8.0]),
        0.001, CutoffRule("later_of", calendar=31.0, events=372))


def _delayed_6m_hr056():
    return TrialScenario(
        "delayed_6m_hr056", 236,
        EnrollmentModel("uniform", 15.0),
        PiecewiseHazard([], [LN2 / 8.0]),
        PiecewiseHazard([6.0], [LN2 / 8.0, 0.56 * LN2 / 8.0]),
        0.001, CutoffRule("later_of", calendar=31.0, events=372))


def _with_6mo_enrollment(build):
    sc = build()
    return TrialScenario(sc.label + "_6mo", sc.n_per_arm,
                         EnrollmentModel("uniform", 6.0),
                         sc.control_hazard, sc.treatment_hazard,
                         sc.dropout_rate, sc.cutoff)


def _ph_hr0625():
    # proportional benefit on the small 36-month chassis; hazard ratio
    # 0.625 is a median shift from 15 to 24 months and lands the
    # battery at its reference power (74.4% default, 76.1% modified)
    return TrialScenario(
        "ph_hr0625", 100,
        EnrollmentModel("uniform", 12.0),
        PiecewiseHazard([], [LN2 / 15.0]),
        PiecewiseHazard([], [0.625 * LN2 / 15.0]),
        0.0, CutoffRule("calendar", calendar=36.0))


def _delayed_6m_hr050():
    # same chassis, benefit withheld for 6 months then hazard ratio 0.5
    # (reference power 79.9% default, 78.2% modified)
    return TrialScenario(
        "delayed_6m_hr050", 100,
        EnrollmentModel("uniform", 12.0),
        PiecewiseHazard([], [LN2 / 15.0]),
        PiecewiseHazard([6.0], [LN2 / 15.0, 0.50 * LN2 / 15.0]),
        0.0, CutoffRule("calendar", calendar=36.0))


_SCENARIO_BUILDERS = {
    "strong_null_1": _strong_null_1,
    "severe_late_crossing": _severe_late_crossing,
    "strong_null_2": _strong_null_2,
    "ph_marginal": _ph_marginal,
    "delayed_6m_hr056": _delayed_6m_hr056,
    "strong_null_1_6mo": lambda: _with_6mo_enrollment(_strong_null_1),
    "severe_late_crossing_6mo": lambda: _with_6mo_enrollment(_severe_late_crossing),
    "ph_hr0625": _ph_hr0625,
    "delayed_6m_hr050": _delayed_6m_hr050,
}


def list_scenarios():
    return sorted(_SCENARIO_BUILDERS)


def get_scenario(name: str) -> TrialScenario:
    try:
        return _SCENARIO_BUILDERS[name]()
    except KeyError:
        raise ValueError(
            f"unknown scenario {name!r}; available: {list_scenarios()}") from None


# --- operating characteristics ------------------------------------------

def _decide_rejection(z_min, table, km, weights, level):
    """Rejection decision at `level` without a full-precision p-value.

    P(min Z <= z) is sandwiched between Phi(z) and k*Phi(z), which
    settles almost every replicate with no integration at all. Only
    when the level falls inside the sandwich is the adjusted p-value
    integrated, coarsely first and tighter only if the decision is
    still inside the error band. The escalation path is a fixed
    function of the data, so results stay deterministic.
    """
    p_lo = float(ndtr(z_min))
    if p_lo > level:
        return False
    if len(weights) * p_lo <= level:
        return True
    corr = combo_correlation(table, km, weights)
    k = len(weights)
    lo, hi = np.full(k, z_min), np.full(k, np.inf)
    for acc in (1e-3, 1e-4):
        res = mvn_rectangle(lo, hi, corr, accuracy=acc)
        p_adj = 1.0 - res.prob
        if abs(p_adj - level) > res.error:
            break
    return p_adj <= level


@dataclass(frozen=True)
class OperatingCharacteristics:
    label: str
    replicates: int
    completed: int
    errors: int
    rejections: int
    rejection_rate: float
    mc_se: float
    selection_counts: tuple
    selection_freq: tuple
    mean_events: float
    mean_calendar_time: float


def _oc_chunk(args):
    """Tallies for one contiguous replicate range; pure and commutative."""
    scenario, weights, r_lo, r_hi, seed, boundary, level = args
    k = len(weights)
    tallies = {"rejections": 0, "errors": 0, "completed": 0,
               "sel": np.zeros(k, dtype=np.int64), "ev": 0.0, "cal": 0.0}
    for r in range(r_lo, r_hi):
        rep_seed = derive_seed(seed, r)
        try:
            latent = simulate_latent(scenario, rep_seed)
            cut = resolve_cutoff(latent, scenario.cutoff)
            data = apply_cutoff(latent, scenario.cutoff)
            table = build_risk_table(data)
            km = km_estimate(data, "pooled")
            zs = np.array([wlr_test(table, km, w).Z for w in weights])
            sel = int(np.argmin(zs))
            z_min = float(zs[sel])
            if boundary is not None:
                reject = z_min <= boundary
            elif k == 1:
                reject = float(ndtr(z_min)) <= level
            else:
                reject = _decide_rejection(z_min, table, km, weights, level)
        except ValueError:
            tallies["errors"] += 1
            continue
        tallies["completed"] += 1
        tallies["rejections"] += bool(reject)
        tallies["sel"][sel] += 1
        tallies["ev"] += data.n_events
        tallies["cal"] += cut
    return tallies


def operating_characteristics(scenario: TrialScenario, weights,
                              replicates: int, seed: int,
                              boundary: Optional[float] = None,
                              level: float = 0.025,
                              n_jobs: int = 1) -> OperatingCharacteristics:
    """Monte Carlo rejection rate and selection profile of the battery.

    Each replicate simulates one trial and runs the weighted battery.
    With `boundary` set, rejection means min Z <= boundary (a fixed
    critical value); otherwise the multiplicity-adjusted p-value is
    compared to `level` per replicate. Replicates that fail (for
    example a degenerate weight on a tiny table) are excluded and
    tallied, not fatal.

    `n_jobs > 1` spreads replicate ranges over worker processes. Each
    replicate derives its own seed and the reduction is commutative
    counting, so the result is identical for any n_jobs.
    """
    if replicates < 100:
        raise ValueError("need at least 100 replicates")
    weights = as_combo(weights)
    k = len(weights)

    if n_jobs > 1:
        import multiprocessing as mp
        bounds = np.linspace(0, replicates, n_jobs + 1).astype(int)
        jobs = [(scenario, weights, int(lo), int(hi), seed, boundary, level)
                for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        ctx = mp.get_context("fork")
        with ctx.Pool(len(jobs)) as pool:
            parts = pool.map(_oc_chunk, jobs)
    else:
        parts = [_oc_chunk((scenario, weights, 0, replicates, seed,
                            boundary, level))]

    rejections = sum(p["rejections"] for p in parts)
    errors = sum(p["errors"] for p in parts)
    completed = sum(p["completed"] for p in parts)
    sel_counts = np.sum([p["sel"] for p in parts], axis=0)
    ev_sum = sum(p["ev"] for p in parts)
    cal_sum = sum(p["cal"] for p in parts)

    if completed == 0:
        raise ValueError("every replicate failed")
    rate = rejections / completed
    return OperatingCharacteristics(
        scenario.label, replicates, completed, errors, rejections, rate,
        float(np.sqrt(rate * (1.0 - rate) / completed)),
        tuple(int(c) for c in sel_counts),
        tuple(float(c / completed) for c in sel_counts),
        ev_sum / completed, cal_sum / completed)
