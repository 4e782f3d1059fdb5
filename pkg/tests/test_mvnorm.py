import warnings

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from nphkit.mvnorm import (
    CorrelationMatrix,
    equicoordinate_central_quantile,
    equicoordinate_lower_quantile,
    mvn_rectangle,
)

from conftest import CLEAN_CORR, EMPIRICAL_NULL_CORR, random_correlation

# Frozen oracle: crude Monte Carlo on the regularized empirical null
# matrix, 2e7 draws of min(Z) <= -2.286, run once and pinned here.
MC_MIN_BELOW_2286 = 0.024048
MC_3SE = 1.02e-4


class TestCorrelationMatrix:
    def test_valid(self):
        cm = CorrelationMatrix(CLEAN_CORR)
        assert cm.dim == 4
        assert not cm.clipped

    def test_clips_indefinite_with_warning(self):
        with pytest.warns(RuntimeWarning, match="indefinite"):
            cm = CorrelationMatrix(EMPIRICAL_NULL_CORR)
        assert cm.clipped
        assert np.linalg.eigvalsh(cm.values).min() >= 0.0
        assert np.allclose(np.diag(cm.values), 1.0)

    def test_degenerate_all_ones_allowed(self):
        cm = CorrelationMatrix(np.ones((4, 4)))
        assert cm.clipped

    @pytest.mark.parametrize("bad", [
        np.ones((3, 2)),                       # not square
        np.array([[1.0, 0.5], [0.4, 1.0]]),    # not symmetric
        np.array([[2.0, 0.0], [0.0, 1.0]]),    # diagonal not 1
        np.array([[1.0, 1.2], [1.2, 1.0]]),    # entry out of range
        np.eye(7),                             # dimension too large
    ])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            CorrelationMatrix(bad)


class TestRectangle:
    def test_independence_quadrant(self):
        r = mvn_rectangle([-np.inf, -np.inf], [0.0, 0.0], np.eye(2))
        assert abs(r.prob - 0.25) <= max(r.error, 1e-10)

    def test_perfectly_correlated_degenerate(self):
        r = mvn_rectangle(np.full(4, -np.inf), np.full(4, 0.0), np.ones((4, 4)))
        assert abs(r.prob - 0.5) <= 1e-4

    def test_against_scipy(self):
        corr = np.full((4, 4), 0.5)
        np.fill_diagonal(corr, 1.0)
        r = mvn_rectangle(np.full(4, -np.inf), np.zeros(4), corr)
        oracle = multivariate_normal(np.zeros(4), corr).cdf(np.zeros(4))
        assert abs(r.prob - oracle) < 5e-5

    def test_boundary_tail_against_frozen_mc(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cm = CorrelationMatrix(EMPIRICAL_NULL_CORR)
        tail = mvn_rectangle(np.full(4, -2.286), np.full(4, np.inf), cm).prob
        assert abs((1.0 - tail) - MC_MIN_BELOW_2286) < 3e-5 + MC_3SE

    def test_monotone_in_rectangle(self):
        corr = random_correlation(3, seed=4)
        lo = np.array([-1.0, -0.5, -2.0])
        hi = np.array([0.5, 1.5, 0.3])
        inner = mvn_rectangle(lo, hi, corr).prob
        outer = mvn_rectangle(lo - 1.0, hi + 1.0, corr).prob
        assert outer >= inner - 2e-5

    def test_central_symmetry(self):
        corr = random_correlation(4, seed=9)
        u = np.array([0.3, -0.4, 1.1, 0.2])
        a = mvn_rectangle(np.full(4, -np.inf), u, corr).prob
        b = mvn_rectangle(-u, np.full(4, np.inf), corr).prob
        assert abs(a - b) < 3e-5

    def test_partition_sums_to_one(self):
        corr = np.array([[1.0, -0.3], [-0.3, 1.0]])
        cut = (0.3, -0.2)
        total = 0.0
        for lo0, hi0 in ((-np.inf, cut[0]), (cut[0], np.inf)):
            for lo1, hi1 in ((-np.inf, cut[1]), (cut[1], np.inf)):
                total += mvn_rectangle([lo0, lo1], [hi0, hi1], corr).prob
        assert abs(total - 1.0) < 4e-5

    def test_deterministic(self):
        corr = random_correlation(4, seed=2)
        lo = np.full(4, -1.0)
        hi = np.full(4, 2.0)
        a = mvn_rectangle(lo, hi, corr)
        b = mvn_rectangle(lo, hi, corr)
        assert a.prob == b.prob and a.error == b.error

    def test_error_bound_reported(self):
        r = mvn_rectangle(np.full(4, -1.0), np.full(4, 1.0), CLEAN_CORR,
                          accuracy=1e-5)
        assert 0.0 <= r.error <= 1e-5
        assert 0.0 <= r.prob <= 1.0

    def test_input_validation(self):
        with pytest.raises(ValueError):
            mvn_rectangle([0.0], [1.0, 2.0], np.eye(2))
        with pytest.raises(ValueError):
            mvn_rectangle([0.0, 0.0], [1.0, 0.0], np.eye(2))
        with pytest.raises(ValueError):
            mvn_rectangle([0.0, 0.0], [1.0, 1.0], np.eye(2), accuracy=0.0)


class TestLowerQuantile:
    def test_univariate_degenerate(self):
        c = equicoordinate_lower_quantile(np.eye(1), 0.025)
        assert abs(c - (-1.95996)) < 1e-4

    def test_independence_closed_form(self):
        c = equicoordinate_lower_quantile(np.eye(4), 0.025)
        closed = norm.ppf(1.0 - 0.975 ** 0.25)
        assert abs(c - closed) < 1e-4

    def test_inversion(self):
        c = equicoordinate_lower_quantile(CLEAN_CORR, 0.025)
        tail = mvn_rectangle(np.full(4, c), np.full(4, np.inf), CLEAN_CORR,
                             accuracy=6e-6).prob
        assert abs((1.0 - tail) - 0.025) < 2e-5

    def test_target_validation(self):
        with pytest.raises(ValueError):
            equicoordinate_lower_quantile(np.eye(2), 0.0)
        with pytest.raises(ValueError):
            equicoordinate_lower_quantile(np.eye(2), 0.6)


class TestCentralQuantile:
    def test_univariate_degenerate(self):
        c = equicoordinate_central_quantile(np.eye(1), 0.95)
        assert abs(c - 1.95996) < 1e-4

    def test_independence_closed_form(self):
        c = equicoordinate_central_quantile(np.eye(4), 0.95)
        closed = norm.ppf((1.0 + 0.95 ** 0.25) / 2.0)
        assert abs(c - closed) < 1e-4

    def test_bracketed_by_univariate_and_bonferroni(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for corr in (CLEAN_CORR, EMPIRICAL_NULL_CORR, np.eye(4)):
                c = equicoordinate_central_quantile(corr, 0.95)
                assert 1.95996 - 1e-4 <= c <= norm.ppf(1 - 0.025 / 4) + 1e-4

    def test_inversion(self):
        c = equicoordinate_central_quantile(CLEAN_CORR, 0.95)
        box = mvn_rectangle(np.full(4, -c), np.full(4, c), CLEAN_CORR,
                            accuracy=6e-6).prob
        assert abs(box - 0.95) < 2e-5

    def test_coverage_validation(self):
        with pytest.raises(ValueError):
            equicoordinate_central_quantile(np.eye(2), 0.5)
        with pytest.raises(ValueError):
            equicoordinate_central_quantile(np.eye(2), 1.0)
