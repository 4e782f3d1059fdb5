"""Treatment-effect quantifiers beyond the hazard ratio.

Each estimator returns an EffectEstimate whose one-sided p-value is
small when TREATMENT LOOKS GOOD, whatever direction "good" means on
that scale: HR < 1, RMST difference > 0, restricted-loss ratio < 1,
milestone difference > 0, net benefit > 0. Two-sided 95% intervals
unless a coverage argument says otherwise.

The default restriction time tau is the smaller of the two arms'
largest observed times, so every integral stays inside the range where
both curves are identified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import chi2

from .data import SurvivalDataset, _mask_for, build_risk_table, km_estimate
from .rng import derive_seed, uniform01

SCALE_HR = "hazard_ratio"
SCALE_DIFF = "difference"
SCALE_RATIO = "ratio"
SCALE_PROB = "probability"


@dataclass(frozen=True)
class EffectEstimate:
    name: str
    estimate: float
    ci_lower: float
    ci_upper: float
    p_value: Optional[float]
    scale: str

    def __post_init__(self):
        if not (self.ci_lower <= self.estimate <= self.ci_upper):
            raise ValueError(f"{self.name}: estimate outside its own CI")


@dataclass(frozen=True)
class PHDiagnostic:
    gt_statistic: float
    gt_p_value: float
    times: np.ndarray  # pooled event times
    scaled_residuals: np.ndarray  # local log-HR reading per event time


def default_tau(data: SurvivalDataset) -> float:
    t1 = data.time[data.arm == 1]
    t0 = data.time[data.arm == 0]
    if t1.size == 0 or t0.size == 0:
        raise ValueError("both arms must be nonempty")
    return float(min(t1.max(), t0.max()))


def _check_tau(data, tau):
    if tau is None:
        return default_tau(data)
    tau = float(tau)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if tau > default_tau(data) + 1e-12:
        raise ValueError("tau exceeds the follow-up of at least one arm")
    return tau


def _cox_quantities(data: SurvivalDataset):
    table = build_risk_table(data)
    d = table.d.astype(np.float64)
    d1 = table.d1.astype(np.float64)
    n1 = table.n1.astype(np.float64)
    n0 = table.n0.astype(np.float64)
    return table, d, d1, n1, n0


def cox_hr(data: SurvivalDataset) -> EffectEstimate:
    """Cox proportional-hazards HR for treatment vs control.

    Single binary covariate, Breslow handling of ties, Newton-Raphson
    on the partial likelihood. Wald CI and one-sided Wald p (small when
    HR < 1).
    """
    table, d, d1, n1, n0 = _cox_quantities(data)
    tot1, tot = float(d1.sum()), float(d.sum())
    if tot1 == 0.0 or tot1 == tot:
        raise ValueError("monotone likelihood: all events in one arm")

    theta = 0.0
    for _ in range(50):
        r = np.exp(theta)
        p = n1 * r / (n1 * r + n0)
        score = float(np.sum(d1 - d * p))
        info = float(np.sum(d * p * (1.0 - p)))
        if info <= 0.0:
            raise ValueError("singular information")
        step = score / info
        theta += np.clip(step, -2.0, 2.0)
        if abs(score) < 1e-12 and abs(step) < 1e-12:
            break
        if abs(theta) > 20.0:
            raise ValueError("monotone likelihood: estimate diverges")
    else:
        raise ValueError("Newton iteration did not converge")

    se = 1.0 / np.sqrt(info)
    z = ndtri(0.975)
    return EffectEstimate(
        "cox_hr",
        float(np.exp(theta)),
        float(np.exp(theta - z * se)),
        float(np.exp(theta + z * se)),
        float(ndtr(theta / se)),
        SCALE_HR,
    )


def gt_test(data: SurvivalDataset, transform: str = "identity") -> PHDiagnostic:
    """Proportional-hazards diagnostic from scaled Schoenfeld residuals.

    Score test for a linear association between the residuals and g(t),
    where g is the identity by default or the pooled left-continuous KM
    transform g(t) = 1 - S(t-). Chi-square with 1 df. Residuals are
    collapsed per event time (Breslow), and the reported scaled series
    s_i/(d_i v_i) + theta reads as a local log-HR estimate.
    """
    if transform not in ("identity", "km"):
        raise ValueError("transform must be 'identity' or 'km'")
    fit = cox_hr(data)
    theta = float(np.log(fit.estimate))
    table, d, d1, n1, n0 = _cox_quantities(data)
    if len(table) < 3:
        raise ValueError("need at least 3 distinct event times")

    r = np.exp(theta)
    p = n1 * r / (n1 * r + n0)
    resid = d1 - d * p  # Schoenfeld residual summed within each event time
    v = d * p * (1.0 - p)  # matching information share

    if transform == "identity":
        g = table.time.astype(np.float64)
    else:
        km = km_estimate(data, "pooled")
        g = 1.0 - km.left_survival_at(table.time)

    gbar = float(np.sum(d * g) / np.sum(d))
    gc = g - gbar
    num = float(np.sum(gc * resid)) ** 2
    den = float(np.sum(gc * gc * v)) - float(np.sum(gc * v)) ** 2 / float(np.sum(v))
    if den <= 0.0:
        raise ValueError("degenerate diagnostic variance")
    stat = num / den

    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(v > 0, resid / v + theta, np.nan)
    return PHDiagnostic(stat, float(chi2.sf(stat, 1)), table.time.copy(), scaled)


def _greenwood_factors(time, event, ev_times):
    """d/(n(n-d)) at the given event times of one sample; rows where
    n == d get 0 (the curve hits 0 there, so integral tails vanish)."""
    ev_times = np.asarray(ev_times, dtype=np.float64)
    t_sorted = np.sort(time)
    n = time.size - np.searchsorted(t_sorted, ev_times, side="left")
    et_sorted = np.sort(time[event == 1])
    d = (np.searchsorted(et_sorted, ev_times, side="right")
         - np.searchsorted(et_sorted, ev_times, side="left"))
    out = np.zeros(ev_times.size)
    ok = n > d
    out[ok] = d[ok] / (n[ok] * (n[ok] - d[ok]).astype(float))
    return out


def _km_step_integral(km, tau):
    """Integral of the KM step function on [0, tau] plus the variance
    pieces: returns (area, tail areas A_i over the curve's event times,
    the times kept, and their d/(n(n-d)) factors)."""
    times = km.time
    keep = times <= tau
    t = times[keep]
    s = km.surv[keep]
    grid = np.concatenate(([0.0], t, [tau]))
    vals = np.concatenate(([1.0], s))  # value on each [grid_k, grid_k+1)
    widths = np.diff(grid)
    area = float(np.sum(vals * widths))
    # tail area from each event time to tau
    seg = vals * widths
    suffix = np.concatenate((np.cumsum(seg[::-1])[::-1], [0.0]))
    tails = suffix[1:-1] if t.size else np.empty(0)
    return area, t, tails


def _rmst_one_arm(data, selector, tau):
    km = km_estimate(data, selector)
    area, t, tails = _km_step_integral(km, tau)

    # per-event variance factors d/(n(n-d)) recomputed from the subset
    mask = _mask_for(data, selector)
    time, event = data.time[mask], data.event[mask]
    var = float(np.sum(tails * tails * _greenwood_factors(time, event, t)))
    return area, var


@dataclass(frozen=True)
class RMSTResult:
    control: EffectEstimate
    treatment: EffectEstimate
    difference: EffectEstimate
    tau: float


def rmst(data: SurvivalDataset, tau: Optional[float] = None) -> RMSTResult:
    """Restricted mean survival time per arm and their difference.

    Exact step-function integration of each KM curve to tau; variance
    by the standard KM-integral formula. The difference is treatment
    minus control, so positive favors treatment.
    """
    tau = _check_tau(data, tau)
    z = ndtri(0.975)
    ests = {}
    for selector in ("control", "treatment"):
        area, var = _rmst_one_arm(data, selector, tau)
        se = float(np.sqrt(var)) if np.isfinite(var) else np.inf
        ests[selector] = EffectEstimate(
            f"rmst_{selector}", area,
            area - z * se, area + z * se, None, SCALE_DIFF)
    diff = ests["treatment"].estimate - ests["control"].estimate
    se = float(np.sqrt(
        (ests["treatment"].ci_upper - ests["treatment"].estimate) ** 2
        + (ests["control"].ci_upper - ests["control"].estimate) ** 2
    )) / z
    p = float(1.0 - ndtr(diff / se)) if se > 0 else None
    dest = EffectEstimate("rmst_difference", diff,
                          diff - z * se, diff + z * se, p, SCALE_DIFF)
    return RMSTResult(ests["control"], ests["treatment"], dest, tau)


def rmtl(data: SurvivalDataset, tau: Optional[float] = None) -> EffectEstimate:
    """Ratio of restricted mean time lost, treatment over control.

    RMTL is tau minus RMST; a ratio below 1 favors treatment exactly
    when the RMST difference is positive. CI by the delta method on the
    log ratio.
    """
    res = rmst(data, tau)
    z = ndtri(0.975)
    loss_c = res.tau - res.control.estimate
    loss_t = res.tau - res.treatment.estimate
    if loss_c <= 0.0 or loss_t <= 0.0:
        raise ValueError("restricted loss is zero in one arm; ratio undefined")
    var_c = ((res.control.ci_upper - res.control.estimate) / z) ** 2
    var_t = ((res.treatment.ci_upper - res.treatment.estimate) / z) ** 2
    log_ratio = float(np.log(loss_t / loss_c))
    se = float(np.sqrt(var_t / loss_t ** 2 + var_c / loss_c ** 2))
    p = float(ndtr(log_ratio / se)) if se > 0 else None
    return EffectEstimate(
        "rmtl_ratio", float(loss_t / loss_c),
        float(np.exp(log_ratio - z * se)), float(np.exp(log_ratio + z * se)),
        p, SCALE_RATIO)


def milestone_difference(data: SurvivalDataset, t_star: float) -> EffectEstimate:
    """Difference in survival probability at a landmark time.

    S_treatment(t*) - S_control(t*) with Greenwood standard errors; the
    CI is truncated to [-1, 1]. Positive favors treatment.
    """
    t_star = float(t_star)
    if t_star <= 0:
        raise ValueError("t_star must be positive")
    if t_star > default_tau(data) + 1e-12:
        raise ValueError("t_star exceeds the follow-up of at least one arm")
    km1 = km_estimate(data, "treatment")
    km0 = km_estimate(data, "control")
    diff = km1.survival_at(t_star) - km0.survival_at(t_star)
    var = km1.variance_at(t_star) + km0.variance_at(t_star)
    se = float(np.sqrt(var))
    z = ndtri(0.975)
    lo = max(diff - z * se, -1.0)
    hi = min(diff + z * se, 1.0)
    p = float(1.0 - ndtr(diff / se)) if se > 0 else None
    return EffectEstimate("milestone_difference", float(diff), lo, hi, p,
                          SCALE_PROB)


@dataclass(frozen=True)
class IntervalHR:
    lower_time: float
    upper_time: float  # inf for the open last interval
    events_treatment: int
    events_control: int
    exposure_treatment: float
    exposure_control: float
    estimate: Optional[EffectEstimate]  # None when inestimable

    @property
    def estimable(self) -> bool:
        return self.estimate is not None


def piecewise_hr(data: SurvivalDataset, cutpoints) -> list:
    """Interval hazard ratios by occurrence/exposure.

    Intervals are (0, c1], (c1, c2], ..., (c_last, inf). Within each,
    the arm hazard is events over at-risk time accrued inside the
    interval (subjects enter when their observed time passes the left
    edge, a left truncation handled internally); HR is the rate ratio
    with log-scale variance 1/d1 + 1/d0. Intervals lacking events in
    either arm come back flagged inestimable rather than failing.
    """
    cuts = [float(c) for c in cutpoints]
    if any(c <= 0 for c in cuts) or any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise ValueError("cutpoints must be positive and strictly ascending")
    edges = [0.0] + cuts + [np.inf]
    z = ndtri(0.975)
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        row = {}
        for arm in (0, 1):
            m = data.arm == arm
            t, e = data.time[m], data.event[m]
            inside = t > a
            expo = float(np.sum(np.clip(np.minimum(t[inside], b) - a, 0.0, None)))
            dcount = int(np.sum(inside & (t <= b) & (e == 1))) if np.isfinite(b) \
                else int(np.sum(inside & (e == 1)))
            row[arm] = (dcount, expo)
        d1, e1 = row[1]
        d0, e0 = row[0]
        est = None
        if d1 > 0 and d0 > 0 and e1 > 0 and e0 > 0:
            hr = (d1 / e1) / (d0 / e0)
            se = np.sqrt(1.0 / d1 + 1.0 / d0)
            log_hr = np.log(hr)
            est = EffectEstimate(
                f"hr({a},{b}]", float(hr),
                float(np.exp(log_hr - z * se)), float(np.exp(log_hr + z * se)),
                float(ndtr(log_hr / se)), SCALE_HR)
        out.append(IntervalHR(a, b, d1, d0, e1, e0, est))
    return out


def _censoring_km(data, arm):
    m = data.arm == arm
    flipped = SurvivalDataset(data.time[m], 1 - data.event[m],
                              np.zeros(int(m.sum()), dtype=np.int8))
    return km_estimate(flipped, "pooled")


def wkm_test(data: SurvivalDataset, tau: Optional[float] = None):
    """Integrated weighted KM difference (censoring-stabilized).

    Statistic is the integral over [0, tau] of w(t) (S1(t) - S0(t))
    with w(t) = C1(t-) C0(t-) / (p1 C1(t-) + p0 C0(t-)), the C_j being
    per-arm censoring KM curves and p_j the arm fractions. Variance
    accumulates per-arm KM-integral terms with the weighted integrand.
    Returns (z statistic, one-sided p), positive z favoring treatment.
    With no censoring the weight is 1 and z equals the RMST-difference
    z exactly.
    """
    tau = _check_tau(data, tau)
    n0, n1 = data.n_per_arm()
    p1, p0 = n1 / len(data), n0 / len(data)

    km1 = km_estimate(data, "treatment")
    km0 = km_estimate(data, "control")
    ckm1 = _censoring_km(data, 1)
    ckm0 = _censoring_km(data, 0)

    # all step functions jump only at observed times, so on each open
    # segment of this grid every factor is constant; C(t-) inside a
    # segment equals C at the segment's left endpoint
    grid = np.unique(np.concatenate(([0.0], data.time[data.time < tau], [tau])))
    starts = grid[:-1]
    c1_seg = np.atleast_1d(ckm1.survival_at(starts))
    c0_seg = np.atleast_1d(ckm0.survival_at(starts))
    denom = p1 * c1_seg + p0 * c0_seg
    if np.any(denom <= 0.0):
        raise ValueError("degenerate censoring weight inside [0, tau]")
    w_seg = c1_seg * c0_seg / denom

    s1_seg = np.atleast_1d(km1.survival_at(starts))
    s0_seg = np.atleast_1d(km0.survival_at(starts))
    widths = np.diff(grid)
    stat = float(np.sum(w_seg * (s1_seg - s0_seg) * widths))

    var = 0.0
    for km, arm, s_seg in ((km1, 1, s1_seg), (km0, 0, s0_seg)):
        seg = w_seg * s_seg * widths
        suffix = np.concatenate((np.cumsum(seg[::-1])[::-1], [0.0]))
        ev = km.time[km.time <= tau]
        # every event time is a grid point, so suffix at that index is
        # the exact integral of wS_j from the event time to tau
        tails = suffix[np.searchsorted(grid, ev, side="left")]
        m = data.arm == arm
        factors = _greenwood_factors(data.time[m], data.event[m], ev)
        var += float(np.sum(tails * tails * factors))
    if not np.isfinite(var) or var <= 0.0:
        raise ValueError("degenerate variance")
    z = stat / np.sqrt(var)
    return float(z), float(1.0 - ndtr(z))


def net_benefit(data: SurvivalDataset, margin: float = 0.0,
                resamples: int = 2000, seed: int = 0) -> EffectEstimate:
    """Proportion of determinable pairwise wins minus losses.

    Every treatment-control pair is classified: a win when the
    treatment subject is known to survive more than `margin` longer
    (which requires the control time to be an observed event), a loss
    in the mirrored case, otherwise indeterminate and counted as
    neither. The estimate is (wins - losses) / all pairs. Inference by
    within-arm subject bootstrap with the package's counter RNG, so
    results are reproducible from the seed alone.
    """
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if resamples < 1:
        raise ValueError("resamples must be positive")
    m1 = data.arm == 1
    t1, e1 = data.time[m1], data.event[m1]
    t0, e0 = data.time[~m1], data.event[~m1]
    if t1.size == 0 or t0.size == 0:
        raise ValueError("both arms must be nonempty")

    def estimate_nb(t1s, e1s, t0s, e0s):
        st1 = np.sort(t1s)
        st0 = np.sort(t0s)
        # wins: control event at t0, any treatment time beyond t0+margin
        ct0 = t0s[e0s == 1]
        wins = int(np.sum(st1.size - np.searchsorted(st1, ct0 + margin, side="right")))
        ct1 = t1s[e1s == 1]
        losses = int(np.sum(st0.size - np.searchsorted(st0, ct1 + margin, side="right")))
        return (wins - losses) / (t1s.size * t0s.size)

    est = estimate_nb(t1, e1, t0, e0)

    boots = np.empty(resamples)
    for r in range(resamples):
        s = derive_seed(seed, r)
        u = uniform01(s, np.arange(t1.size + t0.size))
        i1 = np.floor(u[: t1.size] * t1.size).astype(np.int64)
        i0 = np.floor(u[t1.size:] * t0.size).astype(np.int64)
        boots[r] = estimate_nb(t1[i1], e1[i1], t0[i0], e0[i0])
    se = float(boots.std(ddof=1))
    z = ndtri(0.975)
    if se > 0:
        p = float(1.0 - ndtr(est / se))
        lo, hi = max(est - z * se, -1.0), min(est + z * se, 1.0)
    else:
        p, lo, hi = None, est, est
    return EffectEstimate("net_benefit", float(est), lo, hi, p, SCALE_PROB)
