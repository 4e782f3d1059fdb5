"""Two-look testing: spending-function interim, combination-test final.

One interim analysis of the unweighted log-rank statistic at an
information fraction t, with the final weighted-battery boundary
solved so the two looks jointly spend the overall one-sided alpha.
Benefit is a negative Z throughout, so boundaries are negative and
"tighter" means more negative.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .data import SurvivalDataset, build_risk_table, km_estimate
from .estimands import cox_hr
from .mvnorm import CorrelationMatrix, mvn_rectangle
from .ranktests import DEFAULT_COMBO, WeightSpec, as_combo, wlr_covariance
from .simulation import CutoffRule, TrialScenario, apply_cutoff, \
    resolve_cutoff, simulate_latent

_LOGRANK = WeightSpec(0, 0)


@dataclass(frozen=True)
class GSPlan:
    information_fraction: float
    alpha: float = 0.025
    spending: str = "obrien_fleming"
    combo: tuple = DEFAULT_COMBO
    futility_hr: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.information_fraction < 1.0:
            raise ValueError("information fraction must be inside (0, 1)")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError("alpha must be inside (0, 0.5)")
        if self.spending != "obrien_fleming":
            raise ValueError(f"unknown spending function {self.spending!r}")
        if self.futility_hr is not None and self.futility_hr <= 0:
            raise ValueError("futility threshold must be positive")
        object.__setattr__(self, "combo", as_combo(self.combo))


@dataclass(frozen=True)
class GSBoundaries:
    interim_z: float
    interim_nominal: float
    final_z: float
    corr: CorrelationMatrix  # interim statistic first, then the battery


def obf_spending_boundary(t: float, alpha: float):
    """O'Brien-Fleming-type spent alpha and interim critical value.

    a(t) = 2 (1 - Phi(z_{1-alpha/2} / sqrt(t))); the interim rejects
    when Z <= Phi^{-1}(a(t)).
    """
    if not 0.0 < t <= 1.0:
        raise ValueError("information fraction must be inside (0, 1]")
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must be inside (0, 0.5)")
    spent = 2.0 * (1.0 - float(ndtr(ndtri(1.0 - alpha / 2.0) / np.sqrt(t))))
    return float(ndtri(spent)), spent


def interim_final_correlation(interim_table, final_table, interim_km,
                              final_km, combo=DEFAULT_COMBO) -> CorrelationMatrix:
    """Joint correlation of the interim log-rank and the final battery.

    Independent increments make every cross covariance a same-window
    quantity: cov(G00 at t, G_w at 1) accumulates the product weight
    over the interim window only, which is the interim-table covariance
    of the two weight functions.
    """
    combo = as_combo(combo)
    k = len(combo)
    cov = np.empty((1 + k, 1 + k))
    cov[0, 0] = wlr_covariance(interim_table, interim_km, _LOGRANK, _LOGRANK)
    if cov[0, 0] <= 0.0:
        raise ValueError("degenerate interim variance")
    v_lr_final = wlr_covariance(final_table, final_km, _LOGRANK, _LOGRANK)
    if cov[0, 0] > v_lr_final * (1.0 + 1e-9):
        raise ValueError("interim data must be a prefix of the final data")
    for j, w in enumerate(combo):
        cov[0, 1 + j] = cov[1 + j, 0] = wlr_covariance(
            interim_table, interim_km, _LOGRANK, w)
    for i, wi in enumerate(combo):
        for j in range(i, k):
            cov[1 + i, 1 + j] = cov[1 + j, 1 + i] = wlr_covariance(
                final_table, final_km, wi, combo[j])
    v = np.diag(cov)
    if np.any(v <= 0.0):
        raise ValueError("degenerate variance in the final battery")
    return CorrelationMatrix(cov / np.sqrt(np.outer(v, v)))


def final_boundary(corr: CorrelationMatrix, z_interim: float, alpha: float,
                   xtol: float = 2.5e-4, accuracy: float = 2e-5) -> float:
    """Final battery cutoff preserving the overall one-sided level.

    Solves P(Z_I <= z_I) + P(Z_I > z_I, min_j Z_j <= z_F) = alpha,
    equivalently P(Z_I > z_I, all Z_j > z_F) = 1 - alpha, by bisection
    over joint rectangle probabilities on the (1+k)-dim distribution.
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must be inside (0, 0.5)")
    if z_interim >= 0.0:
        raise ValueError("interim boundary must be negative")
    k = corr.dim - 1
    if k < 1:
        raise ValueError("correlation matrix must include the battery")
    target = 1.0 - alpha

    def survive(z: float) -> float:
        lower = np.full(corr.dim, z)
        lower[0] = z_interim
        return mvn_rectangle(lower, np.full(corr.dim, np.inf), corr,
                             accuracy=accuracy).prob

    lo, hi = -5.0, -0.5
    if survive(lo) < target or survive(hi) > target:
        raise ValueError("final boundary not bracketed; check the inputs")
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        if survive(mid) >= target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class Recommendation(enum.Enum):
    CONTINUE = "continue"
    STOP_HARM = "stop_harm"


def futility_check(data: SurvivalDataset, threshold: float = 1.5) -> Recommendation:
    """Advisory harm check at the interim; never credited to the level."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    try:
        est = cox_hr(data)
    except ValueError as exc:
        warnings.warn(f"hazard ratio inestimable ({exc}); continuing")
        return Recommendation.CONTINUE
    if est.estimate > threshold:
        return Recommendation.STOP_HARM
    return Recommendation.CONTINUE


def plan_boundaries(plan: GSPlan, null_scenario: TrialScenario,
                    final_events: int, seed: int = 0,
                    n_scale: int = 10) -> GSBoundaries:
    """Boundaries from one simulated large null trial (planning mode).

    The given scenario should describe the trial under the null (both
    arms on the control hazard). Subject count and both event targets
    are scaled up by n_scale to stabilize the correlation estimate.
    """
    if final_events < 2:
        raise ValueError("need a final event target of at least 2")
    if n_scale < 1:
        raise ValueError("n_scale must be at least 1")
    interim_events = int(round(plan.information_fraction * final_events))
    if interim_events < 1:
        raise ValueError("interim lands before the first event")
    scaled = TrialScenario(
        null_scenario.label + "_planning",
        null_scenario.n_per_arm * n_scale,
        null_scenario.enrollment,
        null_scenario.control_hazard,
        null_scenario.treatment_hazard,
        null_scenario.dropout_rate,
        CutoffRule("events", events=final_events * n_scale))
    latent = simulate_latent(scaled, seed)
    final_data = apply_cutoff(latent, scaled.cutoff)
    interim_data = apply_cutoff(
        latent, CutoffRule("events", events=interim_events * n_scale))
    return _boundaries_from_data(plan, interim_data, final_data,
                                 plan.information_fraction)


def observed_boundaries(plan: GSPlan, interim_data: SurvivalDataset,
                        final_data: SurvivalDataset,
                        planned_final_events: int = 0) -> GSBoundaries:
    """Boundaries recomputed from the trial's actual datasets.

    The spent alpha uses the observed interim event count against the
    planned final target when given, else against the observed final
    count.
    """
    denom = planned_final_events if planned_final_events > 0 \
        else final_data.n_events
    t = interim_data.n_events / denom
    if not 0.0 < t < 1.0:
        raise ValueError(
            f"interim information fraction {t:.3f} outside (0, 1)")
    return _boundaries_from_data(plan, interim_data, final_data, t)


def _boundaries_from_data(plan, interim_data, final_data, t) -> GSBoundaries:
    z_i, spent = obf_spending_boundary(t, plan.alpha)
    corr = interim_final_correlation(
        build_risk_table(interim_data), build_risk_table(final_data),
        km_estimate(interim_data, "pooled"), km_estimate(final_data, "pooled"),
        plan.combo)
    z_f = final_boundary(corr, z_i, plan.alpha)
    return GSBoundaries(z_i, spent, z_f, corr)


def two_look_rejection_rate(scenario: TrialScenario, bounds: GSBoundaries,
                            interim_events: int, weights=DEFAULT_COMBO,
                            replicates: int = 1000, seed: int = 0):
    """Monte Carlo rejection rate of the full two-look procedure.

    Each replicate tests the interim log-rank at the interim boundary,
    then, if the trial continues, the battery minimum at the final
    boundary. Returns (rate, interim share of rejections, mc se).
    """
    from .ranktests import wlr_test
    from .rng import derive_seed
    weights = as_combo(weights)
    if replicates < 100:
        raise ValueError("need at least 100 replicates")
    interim_rule = CutoffRule("events", events=interim_events)
    hits = hits_interim = done = 0
    for r in range(replicates):
        latent = simulate_latent(scenario, derive_seed(seed, r))
        try:
            interim = apply_cutoff(latent, interim_rule)
            i_table = build_risk_table(interim)
            i_km = km_estimate(interim, "pooled")
            z_i = wlr_test(i_table, i_km, _LOGRANK).Z
            if z_i <= bounds.interim_z:
                hits += 1
                hits_interim += 1
                done += 1
                continue
            final = apply_cutoff(latent, scenario.cutoff)
            f_table = build_risk_table(final)
            f_km = km_estimate(final, "pooled")
            z_min = min(wlr_test(f_table, f_km, w).Z for w in weights)
            if z_min <= bounds.final_z:
                hits += 1
            done += 1
        except ValueError:
            continue
    if done == 0:
        raise ValueError("every replicate failed")
    rate = hits / done
    se = float(np.sqrt(rate * (1.0 - rate) / done))
    share = hits_interim / hits if hits else 0.0
    return rate, share, se
