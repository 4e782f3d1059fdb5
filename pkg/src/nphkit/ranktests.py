"""Weighted log-rank tests and the combination (min-of-battery) test.

Sign convention used throughout the package: the statistic counts
treatment events minus their null expectation, so treatment BENEFIT
gives a NEGATIVE Z and the one-sided p-value is the lower tail Phi(Z).
The combination statistic is the minimum over the component Z's and its
rejection region is a lower tail; published boundary values like -2.286
live on this scale.

Weights are Fleming-Harrington: at event time t the weight is
S(t-)^rho * (1-S(t-))^gamma with S the pooled left-continuous
Kaplan-Meier curve and 0^0 = 1. The family is closed under exponent
averaging, which gives the exact covariance identity
cov(a, b) = var at ((rho_a+rho_b)/2, (gamma_a+gamma_b)/2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .data import KMCurve, RiskTable, SurvivalDataset, build_risk_table, km_estimate
from .mvnorm import (
    CorrelationMatrix,
    equicoordinate_central_quantile,
    mvn_rectangle,
)


@dataclass(frozen=True)
class WeightSpec:
    rho: float
    gamma: float

    def __post_init__(self):
        if self.rho < 0 or self.gamma < 0:
            raise ValueError("rho and gamma must be nonnegative")

    def label(self) -> str:
        def fmt(x):
            return str(int(x)) if float(x).is_integer() else str(x)
        return f"G({fmt(self.rho)},{fmt(self.gamma)})"


DEFAULT_COMBO = (
    WeightSpec(0, 0),
    WeightSpec(0, 1),
    WeightSpec(1, 1),
    WeightSpec(1, 0),
)
# variant battery with milder tail emphasis
MODIFIED_COMBO = (
    WeightSpec(0, 0),
    WeightSpec(0, 0.5),
    WeightSpec(0.5, 0.5),
    WeightSpec(0.5, 0),
)


def as_combo(weights) -> tuple:
    """Normalize a weight list into a validated tuple of WeightSpec."""
    out = []
    for w in weights:
        if isinstance(w, WeightSpec):
            out.append(w)
        else:
            rho, gamma = w
            out.append(WeightSpec(float(rho), float(gamma)))
    if not out:
        raise ValueError("weight list must be nonempty")
    if len({(w.rho, w.gamma) for w in out}) != len(out):
        raise ValueError("duplicate (rho, gamma) pairs")
    return tuple(out)


@dataclass(frozen=True)
class WLRResult:
    weight: WeightSpec
    U: float
    V: float
    Z: float
    p: float  # one-sided, lower tail


@dataclass(frozen=True)
class MaxComboResult:
    components: tuple  # of WLRResult, in spec order
    corr: CorrelationMatrix
    z_min: float
    selected: WeightSpec
    selected_index: int
    p_adjusted: float
    p_error: float  # integration error bound on p_adjusted
    whr_ci: Optional[tuple] = None  # (estimate, lower, upper) when requested


def _fh_weights(table: RiskTable, km: KMCurve, w: WeightSpec) -> np.ndarray:
    s = km.left_survival_at(table.time)
    s = np.atleast_1d(s)
    # 0^0 = 1 by convention; numpy's power already does that
    return s ** w.rho * (1.0 - s) ** w.gamma


def _variance_terms(table: RiskTable) -> np.ndarray:
    # hypergeometric variance per row; single-subject rows contribute 0
    n = table.n.astype(np.float64)
    d = table.d.astype(np.float64)
    terms = np.zeros(n.size)
    ok = table.n > 1
    nf, df = n[ok], d[ok]
    terms[ok] = (table.n1[ok] * table.n0[ok] * df * (nf - df)
                 / (nf * nf * (nf - 1.0)))
    return terms


def wlr_test(table: RiskTable, km: KMCurve, w: WeightSpec) -> WLRResult:
    """One weighted log-rank test from precomputed table and pooled KM."""
    if len(table) == 0:
        raise ValueError("empty risk table")
    wts = _fh_weights(table, km, w)
    expected = table.n1 * table.d / table.n.astype(np.float64)
    U = float(np.sum(wts * (table.d1 - expected)))
    V = float(np.sum(wts * wts * _variance_terms(table)))
    if V <= 0.0:
        raise ValueError(f"degenerate variance for weight {w.label()}")
    Z = U / np.sqrt(V)
    return WLRResult(w, U, V, Z, float(ndtr(Z)))


def wlr_covariance(table: RiskTable, km: KMCurve,
                   a: WeightSpec, b: WeightSpec) -> float:
    """Covariance of two weighted statistics over the same risk table."""
    wa = _fh_weights(table, km, a)
    wb = _fh_weights(table, km, b)
    return float(np.sum(wa * wb * _variance_terms(table)))


def combo_correlation(table: RiskTable, km: KMCurve, weights) -> CorrelationMatrix:
    """Estimated correlation matrix of the battery's Z statistics."""
    weights = as_combo(weights)
    k = len(weights)
    cov = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            cov[i, j] = cov[j, i] = wlr_covariance(table, km, weights[i], weights[j])
    v = np.diag(cov)
    if np.any(v <= 0):
        bad = weights[int(np.argmax(v <= 0))]
        raise ValueError(f"degenerate variance for weight {bad.label()}")
    corr = cov / np.sqrt(np.outer(v, v))
    return CorrelationMatrix(corr)


def maxcombo_test(data: SurvivalDataset, weights=DEFAULT_COMBO,
                  compute_ci: bool = False, coverage: float = 0.95,
                  accuracy: float = 1e-5) -> MaxComboResult:
    """Combination test: most extreme of the weighted statistics.

    The adjusted one-sided p-value is P(min_j Z_j <= z_min) under the
    joint null with the estimated correlation, so it accounts for
    having picked the best-looking weight. compute_ci adds the
    multiplicity-adjusted weighted-HR interval at the selected weight
    (a quantile solve, noticeably slower than the test itself).
    """
    weights = as_combo(weights)
    if data.n_events < 2:
        raise ValueError("need at least 2 events")
    n0, n1 = data.n_per_arm()
    if n0 == 0 or n1 == 0:
        raise ValueError("both arms must be nonempty")

    table = build_risk_table(data)
    km = km_estimate(data, "pooled")
    components = tuple(wlr_test(table, km, w) for w in weights)
    corr = combo_correlation(table, km, weights)

    zs = np.array([c.Z for c in components])
    sel = int(np.argmin(zs))
    z_min = float(zs[sel])

    k = len(weights)
    if k == 1:
        p_adj, p_err = float(ndtr(z_min)), 0.0
    else:
        res = mvn_rectangle(np.full(k, z_min), np.full(k, np.inf), corr,
                            accuracy=accuracy)
        p_adj, p_err = 1.0 - res.prob, res.error

    whr_ci = None
    if compute_ci:
        est, se = weighted_hr(data, weights[sel])
        if k == 1:
            cstar = float(ndtri(0.5 + coverage / 2.0))
        else:
            cstar = equicoordinate_central_quantile(corr, coverage)
        log_est = np.log(est)
        whr_ci = (est, float(np.exp(log_est - cstar * se)),
                  float(np.exp(log_est + cstar * se)))

    return MaxComboResult(components, corr, z_min, weights[sel], sel,
                          p_adj, p_err, whr_ci)


def weighted_hr(data: SurvivalDataset, w: WeightSpec):
    """Weighted hazard-ratio estimate (treatment vs control).

    Solves the weighted partial-likelihood score equation for the
    treatment coefficient, with the same per-event-time weights as the
    corresponding rank test and risk-set totals for ties. Returns
    (hazard ratio, standard error of the log hazard ratio).
    """
    table = build_risk_table(data)
    km = km_estimate(data, "pooled")
    wts = _fh_weights(table, km, w)
    if float(np.sum(wts * table.d)) <= 0.0:
        raise ValueError(f"degenerate variance for weight {w.label()}")
    d = table.d.astype(np.float64)
    d1 = table.d1.astype(np.float64)
    fn1 = table.n1.astype(np.float64)
    fn0 = table.n0.astype(np.float64)

    def score(theta):
        r = np.exp(theta)
        p = fn1 * r / (fn1 * r + fn0)
        return float(np.sum(wts * (d1 - d * p)))

    lo, hi = -10.0, 10.0
    s_lo, s_hi = score(lo), score(hi)
    # score is decreasing in theta; equal signs mean a monotone likelihood
    if s_lo <= 0.0 or s_hi >= 0.0:
        if not (s_lo == 0.0 or s_hi == 0.0):
            raise ValueError("monotone likelihood: all weighted events in one arm")
    theta = brentq(score, lo, hi, xtol=1e-10)
    r = np.exp(theta)
    p = fn1 * r / (fn1 * r + fn0)
    info = float(np.sum(wts * d * p * (1.0 - p)))
    if info <= 0.0:
        raise ValueError("singular information at the estimate")
    return float(np.exp(theta)), float(1.0 / np.sqrt(info))


def simultaneous_ci(data: SurvivalDataset, weights=DEFAULT_COMBO,
                    coverage: float = 0.95):
    """Multiplicity-adjusted CI for the weighted HR at the selected weight.

    The critical value is the equicoordinate central quantile of the
    estimated battery correlation, so the interval is never narrower
    than the unadjusted Wald interval at the same coverage.
    """
    res = maxcombo_test(data, weights, compute_ci=True, coverage=coverage)
    return res.whr_ci
