import numpy as np
import pytest
from scipy.special import ndtri

from nphkit.data import SurvivalDataset, build_risk_table, km_estimate
from nphkit.ranktests import (
    DEFAULT_COMBO,
    MODIFIED_COMBO,
    WeightSpec,
    as_combo,
    combo_correlation,
    maxcombo_test,
    simultaneous_ci,
    weighted_hr,
    wlr_covariance,
    wlr_test,
)


def random_dataset(n, seed, censor_frac=0.25):
    rng = np.random.default_rng(seed)
    time = rng.exponential(10.0, n).round(2)
    event = (rng.random(n) > censor_frac).astype(int)
    arm = np.repeat([0, 1], [n - n // 2, n // 2])
    return SurvivalDataset(time, event, arm)


def delayed_benefit_dataset(n_per_arm, seed, delay=4.0, hr=0.5, cens=30.0):
    # control exponential; treatment matches it until `delay`, then thins out
    rng = np.random.default_rng(seed)
    lam = np.log(2) / 10.0
    tc = rng.exponential(1 / lam, n_per_arm)
    u = rng.random(n_per_arm)
    p_delay = np.exp(-lam * delay)
    tt = np.where(
        u > p_delay,
        -np.log(u) / lam,
        delay - (np.log(u) + lam * delay) / (hr * lam),
    )
    t_all = np.concatenate([tc, tt])
    obs = np.minimum(t_all, cens)
    ev = (t_all <= cens).astype(int)
    return SurvivalDataset(obs, ev, np.repeat([0, 1], n_per_arm))


def swap_arms(ds):
    return SurvivalDataset(ds.time, ds.event, 1 - ds.arm)


def prepared(ds):
    return build_risk_table(ds), km_estimate(ds, "pooled")


class TestWeightSpec:
    def test_labels(self):
        assert WeightSpec(0, 1).label() == "G(0,1)"
        assert WeightSpec(0.5, 0.5).label() == "G(0.5,0.5)"

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            WeightSpec(-1, 0)

    def test_combo_validation(self):
        assert as_combo([(0, 0), (0, 1)]) == (WeightSpec(0, 0), WeightSpec(0, 1))
        with pytest.raises(ValueError):
            as_combo([])
        with pytest.raises(ValueError):
            as_combo([(0, 0), (0, 0)])


class TestWLR:
    def test_logrank_matches_unweighted_formula(self):
        ds = random_dataset(80, seed=1)
        tab, km = prepared(ds)
        res = wlr_test(tab, km, WeightSpec(0, 0))
        # classical log-rank recomputed without any weight machinery
        U = V = 0.0
        for i in range(len(tab)):
            n, d = tab.n[i], tab.d[i]
            U += tab.d1[i] - tab.n1[i] * d / n
            if n > 1:
                V += tab.n1[i] * tab.n0[i] * d * (n - d) / (n * n * (n - 1))
        assert abs(res.U - U) < 1e-12
        assert abs(res.V - V) < 1e-12
        assert abs(res.Z - U / np.sqrt(V)) < 1e-12

    @pytest.mark.parametrize("w", DEFAULT_COMBO + MODIFIED_COMBO)
    def test_arm_swap_flips_z(self, w):
        ds = random_dataset(70, seed=2)
        res = wlr_test(*prepared(ds), w)
        res_sw = wlr_test(*prepared(swap_arms(ds)), w)
        assert res_sw.U == pytest.approx(-res.U, abs=1e-12)
        assert res_sw.V == pytest.approx(res.V, rel=1e-12)
        assert res_sw.Z == pytest.approx(-res.Z, abs=1e-12)

    def test_brute_force_uv_oracle(self):
        ds = random_dataset(40, seed=3)
        tab, km = prepared(ds)
        res = wlr_test(tab, km, WeightSpec(0, 1))
        # recompute everything from raw records: pooled KM left limit by
        # literal product, then the row sums
        ev_times = sorted({t for t, e in zip(ds.time, ds.event) if e})
        U = V = 0.0
        s = 1.0
        for t in ev_times:
            n = sum(1 for tt in ds.time if tt >= t)
            d = sum(1 for tt, ee in zip(ds.time, ds.event) if ee and tt == t)
            n1 = sum(1 for tt, aa in zip(ds.time, ds.arm) if aa == 1 and tt >= t)
            d1 = sum(1 for tt, ee, aa in zip(ds.time, ds.event, ds.arm)
                     if aa == 1 and ee and tt == t)
            wt = 1.0 - s  # rho=0, gamma=1 on the left limit
            U += wt * (d1 - n1 * d / n)
            if n > 1:
                V += wt * wt * n1 * (n - n1) * d * (n - d) / (n * n * (n - 1))
            s *= 1.0 - d / n
        assert abs(res.U - U) < 1e-12
        assert abs(res.V - V) < 1e-12

    def test_degenerate_variance(self):
        # one event at the very first time: S(t-) = 1 so (1-S)^1 = 0
        ds = SurvivalDataset([1.0, 2.0, 3.0, 4.0], [1, 0, 0, 0], [0, 1, 0, 1])
        tab, km = prepared(ds)
        with pytest.raises(ValueError, match="degenerate"):
            wlr_test(tab, km, WeightSpec(0, 1))

    def test_benefit_gives_negative_z(self):
        ds = delayed_benefit_dataset(300, seed=4, delay=0.0, hr=0.4)
        res = wlr_test(*prepared(ds), WeightSpec(0, 0))
        assert res.Z < -3
        assert res.p < 0.005

    def test_scale_invariance(self):
        ds = random_dataset(60, seed=5)
        scaled = SurvivalDataset(ds.time * 3.7, ds.event, ds.arm)
        for w in DEFAULT_COMBO:
            a = wlr_test(*prepared(ds), w)
            b = wlr_test(*prepared(scaled), w)
            assert a.Z == pytest.approx(b.Z, abs=1e-12)


class TestCovariance:
    def test_self_covariance_is_variance(self):
        ds = random_dataset(60, seed=6)
        tab, km = prepared(ds)
        for w in DEFAULT_COMBO:
            v = wlr_test(tab, km, w).V
            assert wlr_covariance(tab, km, w, w) == pytest.approx(v, rel=1e-14)

    @pytest.mark.parametrize(
        "a,b",
        [((0, 0), (1, 1)), ((0, 0), (0, 1)), ((0, 1), (1, 0)), ((0.5, 0), (0.5, 1))],
    )
    def test_averaged_exponent_identity(self, a, b):
        ds = random_dataset(60, seed=7)
        tab, km = prepared(ds)
        cov = wlr_covariance(tab, km, WeightSpec(*a), WeightSpec(*b))
        mid = WeightSpec((a[0] + b[0]) / 2, (a[1] + b[1]) / 2)
        assert cov == pytest.approx(wlr_test(tab, km, mid).V, abs=1e-12)

    def test_correlation_matrix_properties(self):
        ds = random_dataset(60, seed=8)
        corr = combo_correlation(*prepared(ds), DEFAULT_COMBO).values
        assert np.allclose(corr, corr.T)
        assert np.all(np.diag(corr) == 1.0)
        assert np.all((corr > 0) & (corr <= 1))
        assert np.linalg.eigvalsh(corr).min() > -1e-10


class TestMaxCombo:
    def test_preconditions(self):
        with pytest.raises(ValueError, match="2 events"):
            maxcombo_test(SurvivalDataset([1, 2, 3], [1, 0, 0], [0, 1, 0]))
        with pytest.raises(ValueError, match="arms"):
            maxcombo_test(SurvivalDataset([1, 2, 3], [1, 1, 1], [0, 0, 0]))

    def test_selected_attains_min(self):
        res = maxcombo_test(delayed_benefit_dataset(200, seed=9))
        zs = [c.Z for c in res.components]
        assert res.z_min == min(zs)
        assert res.selected_index == int(np.argmin(zs))
        assert res.selected == res.components[res.selected_index].weight

    def test_adjusted_p_dominates_selected(self):
        # the multiplicity penalty applies to the component that was
        # picked: P(min <= z_min) >= Phi(z_min). Components that did NOT
        # attain the minimum can legitimately have larger unadjusted p.
        res = maxcombo_test(random_dataset(100, seed=10))
        sel_p = res.components[res.selected_index].p
        assert sel_p == min(c.p for c in res.components)
        assert res.p_adjusted >= sel_p - 2e-5

    def test_perfect_correlation_no_penalty(self):
        # all events at a single time with gamma-free weights: the two
        # statistics coincide and the adjustment must vanish
        ds = SurvivalDataset([1.0] * 20 + [5.0] * 20, [1] * 20 + [0] * 20,
                             [0, 1] * 20)
        res = maxcombo_test(ds, weights=[(0, 0), (1, 0)])
        assert res.components[0].Z == pytest.approx(res.components[1].Z, abs=1e-12)
        assert np.allclose(res.corr.values, 1.0)
        assert res.p_adjusted == pytest.approx(res.components[0].p, abs=5e-5)

    def test_monotone_multiplicity(self):
        # enlarging the battery while the same weight stays selected can
        # only add multiplicity, never remove it
        ds = delayed_benefit_dataset(250, seed=11)
        full = maxcombo_test(ds, weights=DEFAULT_COMBO)
        w_star = full.selected
        other = next(w for w in DEFAULT_COMBO if w != w_star)
        small = maxcombo_test(ds, weights=[other, w_star])
        assert small.selected == w_star
        assert full.z_min == small.z_min
        assert full.p_adjusted >= small.p_adjusted - 4e-5

    def test_arm_swap_mirrors_selection(self):
        ds = delayed_benefit_dataset(200, seed=12)
        res = maxcombo_test(ds)
        res_sw = maxcombo_test(swap_arms(ds))
        zs = [c.Z for c in res.components]
        zs_sw = [c.Z for c in res_sw.components]
        np.testing.assert_allclose(zs_sw, [-z for z in zs], atol=1e-12)
        np.testing.assert_allclose(res_sw.corr.values, res.corr.values, atol=1e-12)

    def test_crossing_hazards_selects_late_weight(self):
        # treatment hurts before month 3 and helps after, the shape that
        # motivates late weighting; the battery should notice
        lam = np.log(2) / 10
        picks = []
        for s in range(60):
            rng = np.random.default_rng(20_000 + s)
            tc = rng.exponential(1 / lam, 300)
            u = rng.random(300)
            h1, h2 = 2.0 * lam, 0.45 * lam
            p_flip = np.exp(-h1 * 3.0)
            tt = np.where(u > p_flip, -np.log(u) / h1,
                          3.0 - (np.log(u) + h1 * 3.0) / h2)
            t_all = np.concatenate([tc, tt])
            ds = SurvivalDataset(np.minimum(t_all, 24.0),
                                 (t_all <= 24.0).astype(int),
                                 np.repeat([0, 1], 300))
            picks.append(maxcombo_test(ds).selected)
        share = np.mean([p == WeightSpec(0, 1) for p in picks])
        assert share > 0.5


@pytest.fixture(scope="module")
def null_z_battery():
    # 10k trials under an exact null: both arms exponential median 8,
    # 500 per arm, full follow-up; columns are the default battery Z's
    rng = np.random.default_rng(321)
    zs = np.empty((10_000, 4))
    for r in range(10_000):
        time = rng.exponential(8.0 / np.log(2.0), 1000)
        ds = SurvivalDataset(time, np.ones(1000, np.int8), np.repeat([0, 1], 500))
        tab = build_risk_table(ds)
        km = km_estimate(ds, "pooled")
        zs[r] = [wlr_test(tab, km, w).Z for w in DEFAULT_COMBO]
    return zs


class TestNullCalibration:
    def test_single_wlr_rates(self, null_z_battery):
        rates = (null_z_battery <= ndtri(0.025)).mean(axis=0)
        for rate in rates:
            assert 0.020 <= rate <= 0.030

    def test_combo_boundary_rate(self, null_z_battery):
        rate = (null_z_battery.min(axis=1) <= -2.286).mean()
        assert 0.020 <= rate <= 0.030


class TestWeightedHR:
    def test_arm_swap_inverts(self):
        ds = delayed_benefit_dataset(150, seed=13)
        for w in [WeightSpec(0, 0), WeightSpec(0, 1)]:
            est, _ = weighted_hr(ds, w)
            est_sw, _ = weighted_hr(swap_arms(ds), w)
            assert est_sw == pytest.approx(1.0 / est, rel=1e-8)

    def test_score_zero_at_estimate(self):
        ds = SurvivalDataset(
            [1.0, 1.5, 2.0, 3.0, 3.5, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
            [1, 1, 0, 1, 1, 1, 0, 1, 1, 1, 0, 1],
            [0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1],
        )
        for w in [WeightSpec(0, 0), WeightSpec(0, 1), WeightSpec(1, 1)]:
            est, se = weighted_hr(ds, w)
            theta = np.log(est)
            # brute-force score: enumerate risk sets record by record
            ev_times = sorted({t for t, e in zip(ds.time, ds.event) if e})
            s, score = 1.0, 0.0
            for t in ev_times:
                n = sum(1 for tt in ds.time if tt >= t)
                d = sum(1 for tt, ee in zip(ds.time, ds.event) if ee and tt == t)
                n1 = sum(1 for tt, aa in zip(ds.time, ds.arm) if aa and tt >= t)
                d1 = sum(1 for tt, ee, aa in zip(ds.time, ds.event, ds.arm)
                         if aa and ee and tt == t)
                wt = s ** w.rho * (1 - s) ** w.gamma
                p = n1 * np.exp(theta) / (n1 * np.exp(theta) + (n - n1))
                score += wt * (d1 - d * p)
                s *= 1 - d / n
            assert abs(score) < 1e-10
            assert se > 0

    def test_monotone_likelihood_rejected(self):
        ds = SurvivalDataset([1, 2, 3, 9, 9, 9], [1, 1, 1, 0, 0, 0],
                             [1, 1, 1, 0, 0, 0])
        with pytest.raises(ValueError, match="monotone"):
            weighted_hr(ds, WeightSpec(0, 0))

    def test_strong_effect_recovered(self):
        ds = delayed_benefit_dataset(2000, seed=14, delay=0.0, hr=0.5)
        est, se = weighted_hr(ds, WeightSpec(0, 0))
        assert 0.4 < est < 0.62
        assert se < 0.1


class TestSimultaneousCI:
    def test_contains_unadjusted_wald(self):
        ds = delayed_benefit_dataset(200, seed=15)
        est, lo, hi = simultaneous_ci(ds, DEFAULT_COMBO, coverage=0.95)
        sel = maxcombo_test(ds).selected
        est_u, se = weighted_hr(ds, sel)
        assert est == pytest.approx(est_u, rel=1e-12)
        z = ndtri(0.975)
        wald_lo, wald_hi = est_u * np.exp(-z * se), est_u * np.exp(z * se)
        assert lo <= wald_lo + 1e-12
        assert hi >= wald_hi - 1e-12

    def test_single_weight_reduces_to_wald(self):
        ds = delayed_benefit_dataset(150, seed=16)
        est, lo, hi = simultaneous_ci(ds, [(0, 0)], coverage=0.95)
        est_u, se = weighted_hr(ds, WeightSpec(0, 0))
        z = ndtri(0.975)
        assert lo == pytest.approx(est_u * np.exp(-z * se), rel=1e-12)
        assert hi == pytest.approx(est_u * np.exp(z * se), rel=1e-12)
