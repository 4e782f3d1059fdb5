"""Sample-size workflow for the weighted-battery test.

The pipeline mirrors the planning recipe: pick a trial duration from a
size-vs-duration grid, estimate the null correlation of the battery
from one large simulated trial, solve the equicoordinate boundary,
size each component at the resulting nominal level with a fixed-grid
Markov (Lakatos-style) computation, take the cheapest component, and
confirm the choice by simulation, growing the event target or the
follow-up until the operating characteristics hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .mvnorm import CorrelationMatrix, equicoordinate_lower_quantile
from .ranktests import DEFAULT_COMBO, WeightSpec, as_combo, combo_correlation
from .data import build_risk_table, km_estimate
from .simulation import (CutoffRule, EnrollmentModel, OperatingCharacteristics,
                         PiecewiseHazard, TrialScenario,
                         operating_characteristics, simulate_trial)

DEFAULT_GRID_STEP = 1.0 / 30.0


@dataclass(frozen=True)
class DesignInput:
    enrollment: EnrollmentModel
    control_hazard: PiecewiseHazard
    treatment_hazard: PiecewiseHazard  # the powered alternative
    dropout_rate: float
    alpha: float  # one-sided
    power: float
    combo: tuple = DEFAULT_COMBO
    durations: tuple = ()
    treatment_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha < self.power < 1.0:
            raise ValueError("need 0 < alpha < power < 1")
        if self.dropout_rate < 0:
            raise ValueError("dropout rate must be nonnegative")
        if not 0.0 < self.treatment_fraction < 1.0:
            raise ValueError("treatment fraction must be inside (0, 1)")
        object.__setattr__(self, "combo", as_combo(self.combo))
        object.__setattr__(self, "durations", tuple(float(t) for t in self.durations))


@dataclass(frozen=True)
class DesignResult:
    chosen_duration: float
    corr: CorrelationMatrix
    z_cutoff: float
    nominal_level: float
    duration_grid: dict  # duration -> {weight label -> (events, n)} at raw alpha
    component_table: dict  # weight label -> (events, n) at the nominal level
    selected: WeightSpec
    initial_events: int
    initial_n: int
    final_events: int
    final_n: int
    final_cutoff: CutoffRule
    confirmation: dict  # scenario label -> OperatingCharacteristics
    logrank_comparison: tuple  # (events, n) for the unweighted test at raw alpha
    iterations: int = 0


# --- fixed-grid model quantities -----------------------------------------

def _model_grid(d: DesignInput, w: WeightSpec, duration: float,
                step: float = DEFAULT_GRID_STEP):
    """Per-subject mean and variance increments of the weighted statistic.

    The observation window [0, duration] is discretized; on each cell
    the at-risk proportion of arm j is S_j(t) e^{-mu t} G(t) with G the
    uniform-enrollment administrative-censoring survivor. Returns the
    drift E (per subject), the variance V (per subject), and the total
    event probability, all under the design's alternative.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    a = d.enrollment.duration if d.enrollment.kind == "uniform" else 0.0
    if duration <= a:
        raise ValueError("duration must exceed the enrollment period")
    m = int(round(duration / step))
    t = np.arange(m) * step  # left cell edges
    p1 = d.treatment_fraction
    p0 = 1.0 - p1

    s1 = d.treatment_hazard.survival(t)
    s0 = d.control_hazard.survival(t)
    lam1 = d.treatment_hazard.rates[
        np.searchsorted(d.treatment_hazard.cutpoints, t, side="right")]
    lam0 = d.control_hazard.rates[
        np.searchsorted(d.control_hazard.cutpoints, t, side="right")]
    decay = np.exp(-d.dropout_rate * t)
    if a > 0:
        g = np.clip((duration - t) / a, 0.0, 1.0)
    else:
        g = np.ones_like(t)

    r1 = p1 * s1 * decay * g
    r0 = p0 * s0 * decay * g
    d1 = r1 * lam1 * step
    d0 = r0 * lam0 * step
    dtot = d1 + d0
    atrisk = r1 + r0
    live = atrisk > 0
    pi = np.zeros(m)
    pi[live] = r1[live] / atrisk[live]
    share = np.zeros(m)
    ev = dtot > 0
    share[ev] = d1[ev] / dtot[ev]

    pooled = p1 * s1 + p0 * s0  # model survival drives the weight
    wts = pooled ** w.rho * (1.0 - pooled) ** w.gamma

    drift = float(np.sum(wts * dtot * (share - pi)))
    var = float(np.sum(wts * wts * dtot * pi * (1.0 - pi)))
    event_prob = float(np.sum(dtot))
    return drift, var, event_prob


def wlr_sample_size(d: DesignInput, w: WeightSpec, nominal_level: float,
                    duration: float, step: float = DEFAULT_GRID_STEP):
    """Required (events, subjects) for one component at a one-sided level."""
    drift, var, event_prob = _model_grid(d, w, duration, step)
    if abs(drift) < 1e-12 or drift >= 0.0:
        raise ValueError(
            f"alternative carries no benefit detectable by {w.label()}")
    if var <= 0.0:
        raise ValueError(f"degenerate variance for weight {w.label()}")
    za = float(ndtri(1.0 - nominal_level))
    zb = float(ndtri(d.power))
    n = ((za + zb) * math.sqrt(var) / abs(drift)) ** 2
    if d.treatment_fraction == 0.5:
        n_int = int(2 * math.ceil(n / 2.0))  # whole subjects, both arms equal
    else:
        n_int = int(math.ceil(n))
    events = int(math.ceil(n_int * event_prob))
    return events, n_int


def wlr_power(d: DesignInput, w: WeightSpec, nominal_level: float,
              duration: float, n: int, step: float = DEFAULT_GRID_STEP) -> float:
    """Analytic power of one component at sample size n."""
    drift, var, _ = _model_grid(d, w, duration, step)
    zc = float(ndtri(nominal_level))
    return float(ndtr(zc + abs(drift) * math.sqrt(n / var)))


# --- null correlation and boundary ----------------------------------------

def estimate_null_correlation(d: DesignInput, duration: float,
                              n_large: int = 5000,
                              seed: int = 0) -> CorrelationMatrix:
    """Battery correlation from one large simulated null trial."""
    if n_large < 1000:
        raise ValueError("need at least 1000 subjects for a stable estimate")
    scenario = TrialScenario(
        "null_correlation", n_large // 2, d.enrollment,
        d.control_hazard, d.control_hazard, d.dropout_rate,
        CutoffRule("calendar", calendar=float(duration)))
    data = simulate_trial(scenario, seed)
    table = build_risk_table(data)
    km = km_estimate(data, "pooled")
    return combo_correlation(table, km, d.combo)


def adjusted_boundary(corr: CorrelationMatrix, alpha: float):
    """Equicoordinate critical value and its nominal per-test level."""
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must be inside (0, 0.5)")
    if corr.dim == 1:
        z = float(ndtri(alpha))
        return z, alpha
    z = float(equicoordinate_lower_quantile(corr, alpha))
    return z, float(ndtr(z))


# --- full workflow ---------------------------------------------------------

def choose_duration(grid: dict, knee_fraction: float = 0.3) -> float:
    """Smallest duration whose cheapest component is near the asymptote.

    The size-vs-duration curve flattens for long trials; this helper
    picks the earliest duration whose minimum component sample size is
    within (1 + knee_fraction) of the longest candidate's.
    """
    durations = sorted(grid)
    floor_n = min(n for _, n in grid[durations[-1]].values())
    for dur in durations:
        if min(n for _, n in grid[dur].values()) <= (1.0 + knee_fraction) * floor_n:
            return dur
    return durations[-1]


def design_trial(d: DesignInput, alternatives=None, replicates: int = 2000,
                 seed: int = 0, chosen_duration: Optional[float] = None,
                 knee_fraction: float = 0.3,
                 final_min_followup: Optional[float] = None,
                 corr_n: int = 5000, power_margin: float = 0.015,
                 max_iter: int = 20, n_jobs: int = 1) -> DesignResult:
    """End-to-end sizing: grid, boundary, component minimum, confirmation.

    `alternatives` maps labels to treatment hazards for the power
    confirmation (default: the design alternative as "alternative").
    With `final_min_followup` set, the analysis rule becomes "event
    target or enrollment end plus that many months, whichever is
    later", and the selected component is resized at that horizon.
    The confirmation loop grows the event target by 5% (and the
    follow-up by one month when applicable) until the simulated type I
    error and power both hold, or max_iter is hit.
    """
    if not d.durations:
        raise ValueError("need at least one candidate duration")
    weights = d.combo

    grid = {}
    for dur in d.durations:
        grid[dur] = {w.label(): wlr_sample_size(d, w, d.alpha, dur)
                     for w in weights}

    duration = float(chosen_duration) if chosen_duration is not None \
        else choose_duration(grid, knee_fraction)

    corr = estimate_null_correlation(d, duration, corr_n, seed=seed)
    z_cutoff, nominal = adjusted_boundary(corr, d.alpha)

    table = {w.label(): wlr_sample_size(d, w, nominal, duration)
             for w in weights}
    sel_label = min(table, key=lambda k: table[k][1])
    selected = next(w for w in weights if w.label() == sel_label)
    initial_events, initial_n = table[sel_label]

    if final_min_followup is not None:
        if d.enrollment.kind != "uniform":
            raise ValueError("minimum follow-up needs a uniform enrollment")
        final_duration = d.enrollment.duration + float(final_min_followup)
        final_events, final_n = wlr_sample_size(d, selected, nominal,
                                                final_duration)
    else:
        final_duration = duration
        final_events, final_n = initial_events, initial_n

    if alternatives is None:
        alternatives = {"alternative": d.treatment_hazard}

    logrank_comparison = wlr_sample_size(d, WeightSpec(0, 0), d.alpha,
                                         final_duration)

    followup = final_duration
    events = final_events
    iterations = 0
    while True:
        cutoff = CutoffRule("later_of", calendar=float(followup),
                            events=int(events))
        half = final_n // 2

        def scen(label, trt):
            return TrialScenario(label, half, d.enrollment, d.control_hazard,
                                 trt, d.dropout_rate, cutoff)

        confirmation = {}
        confirmation["null"] = operating_characteristics(
            scen("null", d.control_hazard), weights, replicates,
            derive_seed_for(seed, "null", iterations),
            boundary=z_cutoff, n_jobs=n_jobs)
        ok = confirmation["null"].rejection_rate <= d.alpha + 3.0 * max(
            confirmation["null"].mc_se, 1e-12)
        for label, trt in alternatives.items():
            oc = operating_characteristics(
                scen(label, trt), weights, replicates,
                derive_seed_for(seed, label, iterations),
                boundary=z_cutoff, n_jobs=n_jobs)
            confirmation[label] = oc
            ok = ok and oc.rejection_rate >= d.power - power_margin
        if ok:
            break
        iterations += 1
        if iterations >= max_iter:
            rates = {k: round(v.rejection_rate, 4) for k, v in confirmation.items()}
            raise ValueError(
                f"design did not confirm after {max_iter} iterations; "
                f"last rates {rates} with events={events}, followup={followup:.1f}")
        events = int(math.ceil(events * 1.05))
        if final_min_followup is not None:
            followup += 1.0

    return DesignResult(duration, corr, z_cutoff, nominal, grid, table,
                        selected, initial_events, initial_n, int(events),
                        final_n, cutoff, confirmation, logrank_comparison,
                        iterations)


def derive_seed_for(seed: int, label: str, iteration: int) -> int:
    """Stable per-purpose seed: hash the label into the stream index."""
    from .rng import derive_seed
    h = 0
    for ch in label:
        h = (h * 131 + ord(ch)) % (2 ** 31)
    return derive_seed(seed, h * 64 + iteration)
