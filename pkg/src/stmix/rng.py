"""Random-sampling kernels used by the Gibbs sweep.

Every sampler takes a :class:`numpy.random.Generator` as its first argument.
Generators are built from :class:`numpy.random.SeedSequence` so that a stream
can be split into independent children with :func:`split`.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .errors import InvalidParameterError, NumericalError

# Generator = PCG64; bit-exact across platforms for the integer state.
RngStream = np.random.Generator

PG_EXACT_MAX = 50
_PG_TRUNC = 0.64
_PI2 = math.pi**2


def make_rng(seed: int | np.random.SeedSequence | None) -> RngStream:
    """Build a PCG64 stream from a 64-bit seed (or an existing SeedSequence)."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split(rng: RngStream, n: int) -> list[RngStream]:
    """Spawn ``n`` independent child streams from ``rng``."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


# ---------------------------------------------------------------------------
# Polya-gamma
# ---------------------------------------------------------------------------

def pg_mean(b, c):
    """Exact mean of PG(b, c): (b / 2c) tanh(c / 2), b/4 at c = 0."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-3
    cs = np.where(small, 1.0, c)
    exact = np.tanh(cs / 2.0) / (2.0 * cs)
    series = 0.25 - c**2 / 48.0 + c**4 / 480.0
    return b * np.where(small, series, exact)


def pg_var(b, c):
    """Exact variance of PG(b, c)."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-2
    cs = np.where(small, 1.0, c)
    exact = (np.sinh(cs) - cs) / (4.0 * cs**3) / np.cosh(cs / 2.0) ** 2
    series = 1.0 / 24.0 - c**2 / 120.0 + 17.0 * c**4 / 13440.0
    return b * np.where(small, series, exact)


def _a_coef(n: int, x: np.ndarray) -> np.ndarray:
    # Piecewise coefficients of the alternating series for J*(1, z).
    k = n + 0.5
    out = np.empty_like(x)
    hi = x > _PG_TRUNC
    xh = x[hi]
    out[hi] = math.pi * k * np.exp(-0.5 * k * k * _PI2 * xh)
    xl = x[~hi]
    out[~hi] = math.pi * k * np.exp(1.5 * np.log(2.0 / (math.pi * xl)) - 2.0 * k * k / xl)
    return out


def _exp_part_prob(z: np.ndarray) -> np.ndarray:
    # P(proposal from the exponential tail piece) for Devroye's J*(1, z) sampler.
    t = _PG_TRUNC
    fz = _PI2 / 8.0 + 0.5 * z * z
    rt = math.sqrt(1.0 / t)
    b = rt * (t * z - 1.0)
    a = -rt * (t * z + 1.0)
    x0 = np.log(fz) + fz * t
    xb = x0 - z + log_ndtr(b)
    xa = x0 + z + log_ndtr(a)
    qdivp = (4.0 / math.pi) * (np.exp(xb) + np.exp(xa))
    return 1.0 / (1.0 + qdivp)


def _truncated_inv_gauss(rng: RngStream, z: np.ndarray) -> np.ndarray:
    # IG(mu = 1/z, lambda = 1) truncated to (0, t).
    t = _PG_TRUNC
    out = np.empty_like(z)
    big_mu = z < 1.0 / t

    idx = np.flatnonzero(big_mu)
    while idx.size:
        n = idx.size
        e1 = rng.standard_exponential(n)
        e2 = rng.standard_exponential(n)
        bad = e1 * e1 > 2.0 * e2 / t
        while bad.any():
            nb = int(bad.sum())
            e1[bad] = rng.standard_exponential(nb)
            e2[bad] = rng.standard_exponential(nb)
            bad = e1 * e1 > 2.0 * e2 / t
        x = t / (1.0 + t * e1) ** 2
        zz = z[idx]
        ok = rng.random(n) <= np.exp(-0.5 * zz * zz * x)
        out[idx[ok]] = x[ok]
        idx = idx[~ok]

    idx = np.flatnonzero(~big_mu)
    while idx.size:
        n = idx.size
        mu = 1.0 / z[idx]
        y = rng.standard_normal(n) ** 2
        x = mu + 0.5 * mu * mu * y - 0.5 * mu * np.sqrt(4.0 * mu * y + (mu * y) ** 2)
        flip = rng.random(n) > mu / (mu + x)
        x[flip] = mu[flip] ** 2 / x[flip]
        ok = x <= t
        out[idx[ok]] = x[ok]
        idx = idx[~ok]
    return out


def _pg1(rng: RngStream, c: np.ndarray) -> np.ndarray:
    """Exact PG(1, c) draws (Devroye-type alternating-series sampler), vectorised."""
    z = 0.5 * np.abs(c)
    out = np.empty_like(z)
    todo = np.arange(z.size)
    while todo.size:
        zz = z[todo]
        n = todo.size
        fz = _PI2 / 8.0 + 0.5 * zz * zz
        use_exp = rng.random(n) < _exp_part_prob(zz)
        x = np.empty(n)
        ne = int(use_exp.sum())
        x[use_exp] = _PG_TRUNC + rng.standard_exponential(ne) / fz[use_exp]
        if ne < n:
            x[~use_exp] = _truncated_inv_gauss(rng, zz[~use_exp])
        s = _a_coef(0, x)
        y = rng.random(n) * s
        accepted = np.zeros(n, dtype=bool)
        open_ = np.ones(n, dtype=bool)
        k = 0
        while open_.any():
            k += 1
            live = np.flatnonzero(open_)
            ak = _a_coef(k, x[live])
            if k % 2:
                s[live] -= ak
                hit = y[live] <= s[live]
                accepted[live[hit]] = True
                open_[live[hit]] = False
            else:
                s[live] += ak
                miss = y[live] > s[live]
                open_[live[miss]] = False
        out[todo[accepted]] = 0.25 * x[accepted]
        todo = todo[~accepted]
    return out


def sample_polya_gamma(rng: RngStream, b, c, exact_max: int = PG_EXACT_MAX) -> np.ndarray:
    """Draw from PG(b, c) elementwise for integer ``b >= 1``.

    ``b <= exact_max`` sums ``b`` exact PG(1, c) draws. Above that a Gaussian
    with the exact PG mean and variance is used, resampled until positive.
    """
    b_arr = np.asarray(b)
    c_arr = np.asarray(c, dtype=float)
    b_arr, c_arr = np.broadcast_arrays(b_arr, c_arr)
    shape = b_arr.shape
    b_flat = b_arr.ravel()
    c_flat = c_arr.ravel()
    if b_flat.size and (np.any(b_flat < 1) or np.any(b_flat != np.round(b_flat))):
        raise InvalidParameterError("Polya-gamma shape b must be a positive integer")
    if not np.all(np.isfinite(c_flat)):
        raise InvalidParameterError("Polya-gamma tilt c must be finite")
    b_int = b_flat.astype(np.int64)
    out = np.empty(b_flat.size)

    exact = np.flatnonzero(b_int <= exact_max)
    if exact.size:
        reps = b_int[exact]
        owner = np.repeat(np.arange(exact.size), reps)
        draws = _pg1(rng, c_flat[exact][owner])
        out[exact] = np.bincount(owner, weights=draws, minlength=exact.size)

    approx = np.flatnonzero(b_int > exact_max)
    if approx.size:
        m = pg_mean(b_int[approx], c_flat[approx])
        sd = np.sqrt(pg_var(b_int[approx], c_flat[approx]))
        x = m + sd * rng.standard_normal(approx.size)
        bad = np.flatnonzero(x <= 0.0)
        while bad.size:
            x[bad] = m[bad] + sd[bad] * rng.standard_normal(bad.size)
            bad = bad[x[bad] <= 0.0]
        out[approx] = x
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# Truncated normal
# ---------------------------------------------------------------------------

_TAIL = 0.6
_MAX_ROUNDS = 200


def _std_truncnorm(rng: RngStream, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard normal truncated to [a, b) elementwise (a < b, b may be inf)."""
    n = a.size
    out = np.empty(n)
    # mirror the left tail onto the right
    flip = b <= -_TAIL
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)

    tail = lo >= _TAIL
    width = hi - lo
    with np.errstate(invalid="ignore"):
        narrow_tail = tail & (lo * width <= 1.0)
    expo = tail & ~narrow_tail
    bulk = ~tail
    bulk_uniform = bulk & (width < 1.0)
    bulk_normal = bulk & ~bulk_uniform

    # Exponential proposal (Robert 1995) for tails; uniform proposal for narrow
    # intervals; plain rejection from N(0, 1) otherwise.
    todo = np.flatnonzero(expo)
    rounds = 0
    while todo.size and rounds < _MAX_ROUNDS:
        l_ = lo[todo]
        lam = 0.5 * (l_ + np.sqrt(l_ * l_ + 4.0))
        x = l_ + rng.standard_exponential(todo.size) / lam
        ok = (x < hi[todo]) & (rng.random(todo.size) <= np.exp(-0.5 * (x - lam) ** 2))
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
        rounds += 1
    leftover = [todo]

    todo = np.flatnonzero(narrow_tail | bulk_uniform)
    rounds = 0
    while todo.size and rounds < _MAX_ROUNDS:
        l_, h_ = lo[todo], hi[todo]
        x = l_ + (h_ - l_) * rng.random(todo.size)
        ref = np.where((l_ <= 0.0) & (h_ >= 0.0), 0.0, np.minimum(l_ * l_, h_ * h_))
        ok = rng.random(todo.size) <= np.exp(-0.5 * (x * x - ref))
        ok &= x < h_
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
        rounds += 1
    leftover.append(todo)

    todo = np.flatnonzero(bulk_normal)
    rounds = 0
    while todo.size and rounds < _MAX_ROUNDS:
        x = rng.standard_normal(todo.size)
        ok = (x >= lo[todo]) & (x < hi[todo])
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
        rounds += 1
    leftover.append(todo)

    rest = np.concatenate(leftover)
    if rest.size:
        # Inverse CDF on the far side of zero; reached only with vanishing probability.
        pa = ndtr(-hi[rest])
        pb = ndtr(-lo[rest])
        u = pa + (pb - pa) * rng.random(rest.size)
        out[rest] = np.clip(-ndtri(u), lo[rest], np.nextafter(hi[rest], -np.inf))
    return np.where(flip, -out, out)


def sample_truncnorm(rng: RngStream, mean, sd, lo, hi) -> np.ndarray:
    """Draw N(mean, sd^2) truncated to [lo, hi), elementwise with broadcasting."""
    mean, sd, lo, hi = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(sd, float), np.asarray(lo, float), np.asarray(hi, float)
    )
    if np.any(sd <= 0) or np.any(~(lo < hi)):
        raise InvalidParameterError("truncated normal needs sd > 0 and lo < hi")
    a = ((lo - mean) / sd).ravel()
    b = ((hi - mean) / sd).ravel()
    z = _std_truncnorm(rng, a, b)
    x = mean.ravel() + sd.ravel() * z
    # guard the half-open support after rescaling
    x = np.clip(x, lo.ravel(), np.nextafter(hi.ravel(), -np.inf))
    return x.reshape(mean.shape)


# ---------------------------------------------------------------------------
# Discrete and Gaussian kernels
# ---------------------------------------------------------------------------

def sample_multinomial(rng: RngStream, n, p) -> np.ndarray:
    """Multinomial draws by sequential binomial conditioning.

    ``n`` has shape ``(...)`` and ``p`` shape ``(..., K)``; rows of ``p`` are
    normalised internally.
    """
    p = np.asarray(p, dtype=float)
    n = np.broadcast_to(np.asarray(n, dtype=np.int64), p.shape[:-1])
    if np.any(n < 0):
        raise InvalidParameterError("multinomial count must be non-negative")
    K = p.shape[-1]
    out = np.zeros(p.shape, dtype=np.int64)
    remaining = n.copy()
    mass = p.sum(axis=-1)
    for k in range(K - 1):
        pk = p[..., k]
        with np.errstate(invalid="ignore", divide="ignore"):
            q = np.where(mass > 0, pk / mass, 0.0)
        q = np.clip(q, 0.0, 1.0)
        draw = rng.binomial(remaining, q)
        out[..., k] = draw
        remaining = remaining - draw
        mass = mass - pk
    out[..., K - 1] = remaining
    return out


def sample_mvn_precision(rng: RngStream, h, P) -> np.ndarray:
    """Draw from N(P^{-1} h, P^{-1}) via the Cholesky factor of P."""
    h = np.asarray(h, dtype=float)
    P = np.asarray(P, dtype=float)
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"precision matrix not positive definite (pivot {_failing_pivot(P)})") from exc
    return mvn_from_cholesky(rng, h, L)


def mvn_from_cholesky(rng: RngStream, h: np.ndarray, L: np.ndarray) -> np.ndarray:
    # P = L L^T: mean solves P m = h; noise L^{-T} z has covariance P^{-1}.
    from scipy.linalg import solve_triangular

    w = solve_triangular(L, h, lower=True)
    z = rng.standard_normal(h.shape[0])
    return solve_triangular(L, w + z, lower=True, trans="T")


def _failing_pivot(P: np.ndarray) -> int:
    d = P.shape[0]
    for j in range(1, d + 1):
        try:
            np.linalg.cholesky(P[:j, :j])
        except np.linalg.LinAlgError:
            return j - 1
    return -1


def sample_gamma(rng: RngStream, shape, rate):
    """Gamma draw with shape-rate parameterisation."""
    shape = np.asarray(shape, float)
    rate = np.asarray(rate, float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise InvalidParameterError("gamma shape and rate must be positive")
    return rng.gamma(shape, 1.0 / rate)


def sample_inverse_gamma(rng: RngStream, shape, scale):
    """IG(a, b) draw as b / Gamma(a, 1); mean b / (a - 1) for a > 1."""
    shape = np.asarray(shape, float)
    scale = np.asarray(scale, float)
    if np.any(shape <= 0) or np.any(scale <= 0):
        raise InvalidParameterError("inverse-gamma shape and scale must be positive")
    return scale / rng.gamma(shape, 1.0)


def sample_normal(rng: RngStream, mean, var):
    """Normal draw from mean and variance; zero variance returns the mean exactly."""
    mean = np.asarray(mean, float)
    var = np.asarray(var, float)
    if np.any(var < 0):
        raise InvalidParameterError("normal variance must be non-negative")
    return mean + np.sqrt(var) * rng.standard_normal(np.broadcast(mean, var).shape)
