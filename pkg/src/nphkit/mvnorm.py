"""Multivariate normal rectangle probabilities in low dimension.

Computes P(lower <= Z <= upper) for Z ~ N(0, R) with R a correlation
matrix, k <= 6, plus the two equicoordinate critical values the
combination test and its confidence intervals need.

The integrator is the classic separation-of-variables scheme: variables
are reordered greedily (most constraining first) while building a
Cholesky factor whose pivots are clamped at zero for semidefinite input,
then the (k-1)-dimensional unit-cube integral is evaluated by a rank-1
lattice rule with a tent periodization and a dozen independent random
shifts. The generating vector comes from a fast component-by-component
construction, cached per (dimension, size). The spread across shifts
gives an honest error estimate; the lattice size escalates until
3.5 standard errors fall under the requested accuracy.

Shifts come from the counter RNG under a fixed internal seed, so results
are reproducible call-to-call and nothing is shared between concurrent
callers.
"""

import math
import warnings

import numpy as np
from scipy.special import ndtr, ndtri

from ._backend import USING_NUMBA, njit

_PSD_TOL = 1e-8  # declare-invalid threshold for eigenvalues
_CLIP_FLOOR = 1e-10
_N_SHIFTS = 12
_LATTICE_SIZES = (983, 3989, 16381, 65521, 262139, 1048573)
_INTERNAL_SEED = 0x6E70686B69746D76  # arbitrary fixed constant


def _regularize_psd(mat: np.ndarray, floor: float = _CLIP_FLOOR):
    """Clip eigenvalues at `floor`, rescale to unit diagonal.

    Returns (matrix, clipped flag). Never mutates the input.
    """
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() >= floor:
        return mat.copy(), False
    vals = np.clip(vals, floor, None)
    out = (vecs * vals) @ vecs.T
    d = np.sqrt(np.diag(out))
    out = out / np.outer(d, d)
    return (out + out.T) / 2.0, True


class CorrelationMatrix:
    """Validated correlation matrix, regularized to PSD on construction.

    `clipped` records whether eigenvalue clipping changed the matrix.
    Dimension 1 is allowed as a degenerate passthrough for the quantile
    helpers; the integrator itself is exercised for k in [2, 6].
    """

    __slots__ = ("values", "clipped")

    def __init__(self, mat):
        m = np.asarray(mat, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("correlation matrix must be square")
        k = m.shape[0]
        if not 1 <= k <= 6:
            raise ValueError(f"dimension {k} outside supported range 1..6")
        if not np.allclose(m, m.T, atol=1e-8):
            raise ValueError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(m), 1.0, atol=1e-8):
            raise ValueError("correlation matrix must have unit diagonal")
        if np.abs(m).max() > 1.0 + 1e-8:
            raise ValueError("correlation entries must lie in [-1, 1]")
        m = (m + m.T) / 2.0
        np.fill_diagonal(m, 1.0)
        min_eig = np.linalg.eigvalsh(m).min() if k > 1 else 1.0
        if min_eig < -_PSD_TOL:
            warnings.warn(
                f"correlation matrix indefinite (min eigenvalue {min_eig:.3e}); "
                "clipping to PSD",
                RuntimeWarning,
                stacklevel=2,
            )
        self.values, self.clipped = _regularize_psd(m) if k > 1 else (m, False)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __repr__(self):
        return f"CorrelationMatrix(dim={self.dim}, clipped={self.clipped})"


class MVNResult:
    """Probability estimate plus the integrator's error bound."""

    __slots__ = ("prob", "error")

    def __init__(self, prob: float, error: float):
        self.prob = prob
        self.error = error

    def __repr__(self):
        return f"MVNResult(prob={self.prob:.8f}, error={self.error:.2e})"


# ---------------------------------------------------------------------------
# rank-1 lattice construction (fast CBC, Bernoulli-2 kernel)

def _prev_prime(n: int) -> int:
    # largest prime <= n; n stays small enough for trial division
    m = n if n % 2 else n - 1
    while m > 2:
        if all(m % p for p in range(3, int(math.isqrt(m)) + 1, 2)):
            return m
        m -= 2
    return 2


def _primitive_root(p: int) -> int:
    pm = p - 1
    # unique prime factors of p-1
    factors = []
    q = pm
    f = 2
    while f * f <= q:
        if q % f == 0:
            factors.append(f)
            while q % f == 0:
                q //= f
        f += 1
    if q > 1:
        factors.append(q)
    r = 2
    while True:
        if all(pow(r, pm // f, p) != 1 for f in factors):
            return r
        r += 1


_lattice_cache: dict = {}


def _cbc_lattice(ndim: int, size: int):
    """Generating vector for an `ndim`-dimensional rank-1 lattice.

    `size` is rounded down to a prime. Returns (q, n) with q the vector
    of fractions z/n. Component-by-component minimization of the
    worst-case error for the shift-invariant Bernoulli-2 kernel, using
    the circulant/FFT trick so each component costs one FFT pair.
    """
    key = (ndim, size)
    hit = _lattice_cache.get(key)
    if hit is not None:
        return hit
    n = _prev_prime(size)
    m = (n - 1) // 2
    g = _primitive_root(n)
    perm = np.ones(m, dtype=np.int64)
    for j in range(m - 1):
        perm[j + 1] = (g * perm[j]) % n
    perm = np.minimum(n - perm, perm)
    x = perm / n
    kern = x * x - x + 1.0 / 6.0  # Bernoulli B2 kernel values
    fkern = np.fft.fft(kern)
    z = np.ones(ndim, dtype=np.int64)
    gamma = 0.8 ** np.arange(ndim)  # coordinate weights, decaying
    prod = np.ones(m)
    w = 0
    for s in range(1, ndim):
        reordered = np.concatenate([kern[: w + 1][::-1], kern[w + 1:][::-1]])
        prod = prod * (1.0 + gamma[s - 1] * reordered)
        conv = np.fft.ifft(fkern * np.fft.fft(prod)).real
        w = int(conv.argmin())
        z[s] = perm[w]
    q = z / n
    _lattice_cache[key] = (q, n)
    return q, n


# ---------------------------------------------------------------------------
# reordered, clamped Cholesky (greedy: most constraining variable first)

def _ordered_cholesky(corr: np.ndarray, lower: np.ndarray, upper: np.ndarray):
    """Permuted Cholesky factor with bounds carried along.

    At step k the remaining variable with the smallest conditional
    interval probability is pivoted into position k; conditioning uses
    the truncated-normal mean of the already-factored coordinates.
    Pivots that collapse (semidefinite input) zero out their column; the
    integrand treats those coordinates as deterministic. Rows are scaled
    so every nonzero pivot is exactly 1.
    """
    a = np.array(corr, dtype=np.float64)
    lo = np.array(lower, dtype=np.float64)
    hi = np.array(upper, dtype=np.float64)
    k = a.shape[0]
    L = a  # factored in place, lower triangle
    y = np.zeros(k)
    for j in range(k):
        # pick the most constraining remaining variable
        best = -1
        best_de = np.inf
        best_lo = best_hi = best_piv = 0.0
        for i in range(j, k):
            piv = L[i, i] - L[i, :j] @ L[i, :j] if j else L[i, i]
            if piv <= 1e-10:
                continue
            s = L[i, :j] @ y[:j] if j else 0.0
            ci = math.sqrt(piv)
            lo_i = (lo[i] - s) / ci
            hi_i = (hi[i] - s) / ci
            de = ndtr(hi_i) - ndtr(lo_i)
            if de < best_de:
                best, best_de, best_piv = i, de, ci
                best_lo, best_hi = lo_i, hi_i
        if best < 0:
            # all remaining pivots degenerate
            L[j:, j] = 0.0
            L[j, j + 1:] = 0.0
            y[j] = 0.0
            continue
        if best != j:
            L[[j, best], :] = L[[best, j], :]
            L[:, [j, best]] = L[:, [best, j]]
            lo[[j, best]] = lo[[best, j]]
            hi[[j, best]] = hi[[best, j]]
        # factor column j
        L[j, j] = best_piv
        for i in range(j + 1, k):
            L[i, j] = (L[i, j] - L[i, :j] @ L[j, :j]) / best_piv
        L[j, j + 1:] = 0.0
        # truncated-normal mean for conditioning later pivots
        if best_de > 1e-10:
            y[j] = (math.exp(-0.5 * best_lo * best_lo)
                    - math.exp(-0.5 * best_hi * best_hi)) / (
                        2.5066282746310002 * best_de)
        else:
            if best_lo < -10.0:
                y[j] = best_hi
            elif best_hi > 10.0:
                y[j] = best_lo
            else:
                y[j] = 0.5 * (best_lo + best_hi)
        # scale the row so the pivot is 1 and bounds are conditional z-scores
        L[j, :j] /= best_piv
        L[j, j] = 1.0
        lo[j] /= best_piv
        hi[j] /= best_piv
        if not math.isfinite(y[j]):
            y[j] = 0.0
    return L, lo, hi


# ---------------------------------------------------------------------------
# integration cores: one jitted scalar loop, one vectorized numpy twin.
# Same algorithm; aggregate results agree to integrator accuracy but not
# bitwise (summation order differs).

if USING_NUMBA:

    @njit(cache=True)
    def _phi(x):
        return 0.5 * math.erfc(-x * 0.7071067811865476)

    @njit(cache=True)
    def _phinv(p):
        # rational approximation plus one Halley polish; |error| < 1e-14
        if p < 1e-300:
            p = 1e-300
        if p > 1.0 - 1e-16:
            p = 1.0 - 1e-16
        if p < 0.02425:
            q = math.sqrt(-2.0 * math.log(p))
            x = (
                ((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q
                   - 2.400758277161838e+00) * q - 2.549732539343734e+00) * q
                 + 4.374664141464968e+00) * q + 2.938163982698783e+00
            ) / (
                (((7.784695709041462e-03 * q + 3.224671290700398e-01) * q
                  + 2.445134137142996e+00) * q + 3.754408661907416e+00) * q
                + 1.0
            )
        elif p > 1.0 - 0.02425:
            q = math.sqrt(-2.0 * math.log(1.0 - p))
            x = -(
                ((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q
                   - 2.400758277161838e+00) * q - 2.549732539343734e+00) * q
                 + 4.374664141464968e+00) * q + 2.938163982698783e+00
            ) / (
                (((7.784695709041462e-03 * q + 3.224671290700398e-01) * q
                  + 2.445134137142996e+00) * q + 3.754408661907416e+00) * q
                + 1.0
            )
        else:
            q = p - 0.5
            r = q * q
            x = (
                ((((-3.969683028665376e+01 * r + 2.209460984245205e+02) * r
                   - 2.759285104469687e+02) * r + 1.383577518672690e+02) * r
                 - 3.066479806614716e+01) * r + 2.506628277459239e+00
            ) * q / (
                ((((-5.447609879822406e+01 * r + 1.615858368580409e+02) * r
                   - 1.556989798598866e+02) * r + 6.680131188771972e+01) * r
                 - 1.328068155288572e+01) * r + 1.0
            )
        e = _phi(x) - p
        u = e * 2.5066282746310002 * math.exp(0.5 * x * x)
        return x - u / (1.0 + 0.5 * x * u)

    @njit(cache=True)
    def _cond_interval(bound, num, ljj):
        # one-sided bounds arrive as +-inf; degenerate pivot means the
        # coordinate is deterministic given its predecessors
        if not math.isfinite(bound):
            return 1.0 if bound > 0.0 else 0.0
        if ljj <= 1e-14:
            return 1.0 if num <= bound else 0.0
        return _phi((bound - num) / ljj)

    @njit(cache=True)
    def _qmc_shift_means(L, lower, upper, q, shifts, npts):
        k = L.shape[0]
        nsh = shifts.shape[0]
        out = np.empty(nsh)
        d1 = _cond_interval(lower[0], 0.0, L[0, 0])
        e1 = _cond_interval(upper[0], 0.0, L[0, 0])
        y = np.empty(k - 1)
        for s in range(nsh):
            acc = 0.0
            for i in range(1, npts + 1):
                f = e1 - d1
                d = d1
                e = e1
                for j in range(1, k):
                    t = i * q[j - 1] + shifts[s, j - 1]
                    w = abs(2.0 * (t - math.floor(t)) - 1.0)
                    p = d + w * (e - d)
                    y[j - 1] = _phinv(p)
                    num = 0.0
                    for m in range(j):
                        num += L[j, m] * y[m]
                    d = _cond_interval(lower[j], num, L[j, j])
                    e = _cond_interval(upper[j], num, L[j, j])
                    de = e - d
                    if de < 0.0:
                        de = 0.0
                    f *= de
                acc += f
            out[s] = acc / npts
        return out

else:  # pragma: no cover - exercised via NPHKIT_BACKEND=numpy runs
    _phi = None
    _phinv = None
    _qmc_shift_means = None


def _cond_interval_np(bound, num, ljj):
    if not math.isfinite(bound):
        return np.full_like(num, 1.0 if bound > 0 else 0.0)
    if ljj <= 1e-14:
        return (num <= bound).astype(np.float64)
    return ndtr((bound - num) / ljj)


def _qmc_shift_means_np(L, lower, upper, q, shifts, npts):
    k = L.shape[0]
    nsh = shifts.shape[0]
    out = np.empty(nsh)
    i = np.arange(1, npts + 1, dtype=np.float64)[:, None]
    d1 = 0.0 if lower[0] == -np.inf else float(ndtr(lower[0] / L[0, 0]))
    e1 = 1.0 if upper[0] == np.inf else float(ndtr(upper[0] / L[0, 0]))
    tiny = 1e-300
    for s in range(nsh):
        t = i * q[None, :] + shifts[s][None, :]
        w = np.abs(2.0 * (t - np.floor(t)) - 1.0)
        f = np.full(npts, e1 - d1)
        ys = np.empty((npts, k - 1))
        d = np.full(npts, d1)
        e = np.full(npts, e1)
        for j in range(1, k):
            p = np.clip(d + w[:, j - 1] * (e - d), tiny, 1.0 - 1e-16)
            ys[:, j - 1] = ndtri(p)
            num = ys[:, :j] @ L[j, :j]
            d = _cond_interval_np(lower[j], num, L[j, j])
            e = _cond_interval_np(upper[j], num, L[j, j])
            f *= np.clip(e - d, 0.0, 1.0)
        out[s] = f.mean()
    return out


def _as_corr(corr) -> CorrelationMatrix:
    return corr if isinstance(corr, CorrelationMatrix) else CorrelationMatrix(corr)


def mvn_rectangle(lower, upper, corr, accuracy: float = 1e-5,
                  seed: int = _INTERNAL_SEED) -> MVNResult:
    """P(lower <= Z <= upper), Z ~ N(0, corr), to absolute `accuracy`.

    Bounds may be +-inf. Deterministic: the shift randomization is driven
    by `seed` (fixed by default).
    """
    cm = _as_corr(corr)
    k = cm.dim
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    if lo.shape != (k,) or hi.shape != (k,):
        raise ValueError(f"bounds must be vectors of length {k}")
    if not np.all(lo < hi):
        raise ValueError("require lower < upper componentwise")
    if accuracy <= 0:
        raise ValueError("accuracy must be positive")

    if k == 1:
        p = float(ndtr(hi[0]) - ndtr(lo[0]))
        return MVNResult(min(max(p, 0.0), 1.0), 1e-15)

    L, a, b = _ordered_cholesky(cm.values, lo, hi)

    from .rng import derive_seed, uniform01

    core = _qmc_shift_means if USING_NUMBA else _qmc_shift_means_np
    est = 0.0
    err = math.inf
    for attempt, size in enumerate(_LATTICE_SIZES):
        q, npts = _cbc_lattice(k - 1, size)
        sh_seed = derive_seed(seed, attempt)
        shifts = uniform01(sh_seed, np.arange(_N_SHIFTS * (k - 1))).reshape(
            _N_SHIFTS, k - 1
        )
        means = core(L, a, b, q, shifts, npts)
        est = float(means.mean())
        err = 3.5 * float(means.std(ddof=1)) / math.sqrt(_N_SHIFTS)
        if err <= accuracy:
            break
    return MVNResult(min(max(est, 0.0), 1.0), err)


def _bisect(f, lo: float, hi: float, xtol: float, max_iter: int = 200) -> float:
    flo = f(lo)
    fhi = f(hi)
    if flo > 0.0 or fhi < 0.0:
        raise RuntimeError("root not bracketed")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo <= xtol:
            return mid
        fm = f(mid)
        if fm < 0.0:
            lo = mid
        else:
            hi = mid
    raise RuntimeError(f"bisection did not converge in {max_iter} iterations")


def _adaptive_bisect(f, lo_c: float, hi_c: float, floor_acc: float,
                     xtol: float = 5e-5, max_iter: int = 200) -> float:
    # integrator accuracy tracks the bracket: a step only has to decide
    # which side the root is on, so early (wide) iterations run coarse
    # and only the endgame pays for tight error bounds.  f returns
    # (value, error bound); a sign read inside the error band could
    # discard the root for good, so ambiguous midpoints are re-run
    # tighter until the sign is trustworthy or the floor is reached.
    for _ in range(max_iter):
        mid = 0.5 * (lo_c + hi_c)
        if hi_c - lo_c <= xtol:
            return mid
        acc = max(floor_acc, 0.05 * (hi_c - lo_c))
        val, err = f(mid, acc)
        while abs(val) <= err:
            if acc <= floor_acc:
                # the value is inside the error band at the accuracy
                # floor, so mid already reproduces the target to within
                # 2x the achievable integration error; further bisection
                # would only chase noise
                return mid
            acc = max(floor_acc, 0.25 * acc)
            val, err = f(mid, acc)
        if val < 0.0:
            lo_c = mid
        else:
            hi_c = mid
    raise RuntimeError(f"bisection did not converge in {max_iter} iterations")


def equicoordinate_lower_quantile(corr, target: float,
                                  accuracy: float = 4e-6) -> float:
    """c with P(min_j Z_j <= c) = target.

    This is the common critical value for a battery of correlated
    statistics rejected when any of them falls below c. Bisection on
    [-8, 0], at most 200 iterations; the returned c reproduces the
    target probability to ~1e-5.
    """
    if not 0.0 < target <= 0.5:
        raise ValueError("target must lie in (0, 0.5]")
    cm = _as_corr(corr)
    k = cm.dim
    if k == 1:
        return float(ndtri(target))
    hi = np.full(k, np.inf)

    def f(c, acc):
        res = mvn_rectangle(np.full(k, c), hi, cm, accuracy=acc)
        return (1.0 - res.prob) - target, res.error

    # P(min <= -8) ~ k*Phi(-8) << target and P(min <= 0) >= 0.5 >= target,
    # so the bracket holds without evaluating the endpoints.
    return _adaptive_bisect(f, -8.0, 0.0, floor_acc=accuracy)


def equicoordinate_central_quantile(corr, coverage: float,
                                    accuracy: float = 4e-6) -> float:
    """C with P(|Z_j| <= C for all j) = coverage."""
    if not 0.5 < coverage < 1.0:
        raise ValueError("coverage must lie in (0.5, 1)")
    cm = _as_corr(corr)
    k = cm.dim
    if k == 1:
        return float(ndtri(0.5 + coverage / 2.0))

    def f(c, acc):
        res = mvn_rectangle(np.full(k, -c), np.full(k, c), cm,
                            accuracy=acc)
        return res.prob - coverage, res.error

    # univariate value bounds C* below, Bonferroni bounds it above
    lo_c = float(ndtri(0.5 + coverage / 2.0)) - 1e-3
    hi_c = float(ndtri(1.0 - (1.0 - coverage) / (2.0 * k))) + 1e-3
    return _adaptive_bisect(f, lo_c, hi_c, floor_acc=accuracy)
