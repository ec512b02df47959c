"""Deterministic numerical kernels shared by the rest of the package.

Fixed-step RK4, jittered Cholesky, Gaussian densities and samples,
central finite differences and a seeded, splittable random stream.
"""

import math

import numpy as np

from .errors import IntegrationDiverged, NotPositiveSemidefinite

LOG_2PI = math.log(2.0 * math.pi)


def rk4_integrate(f, y0, t0, t1, substeps=50):
    """Integrate ``dy/dt = f(t, y)`` from ``t0`` to ``t1`` with classical RK4.

    Uses ``substeps`` equal steps. Raises :class:`IntegrationDiverged` with the
    failing sub-time if any intermediate state becomes non-finite.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    y = np.array(y0, dtype=float, copy=True)
    if t1 == t0:
        return y
    h = (t1 - t0) / substeps
    t = t0
    for i in range(substeps):
        k1 = np.asarray(f(t, y), dtype=float)
        k2 = np.asarray(f(t + 0.5 * h, y + 0.5 * h * k1), dtype=float)
        k3 = np.asarray(f(t + 0.5 * h, y + 0.5 * h * k2), dtype=float)
        k4 = np.asarray(f(t + h, y + h * k3), dtype=float)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + (i + 1) * h
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(f"non-finite state at t={t:g}", time=t)
    return y


MIN_JITTER_SCALE = 1e-280


def jitter_ladder(A, jitter_start=None):
    """Return the jitter values tried by :func:`cholesky_psd` for ``A``."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    scale = abs(np.trace(A)) / n if n else 0.0
    if scale == 0.0:
        scale = 1.0
    # keep the smallest rung a normal float for matrices of tiny magnitude
    scale = max(scale, MIN_JITTER_SCALE)
    start = 1e-12 * scale if jitter_start is None else float(jitter_start)
    top = 1e-4 * scale
    ladder = [0.0]
    if start > 0.0:
        j = start
        while j <= top * (1.0 + 1e-12):
            ladder.append(j)
            j *= 10.0
    return ladder


def cholesky_psd(A, jitter_start=None):
    """Lower Cholesky factor of ``A + jI`` for the smallest ladder jitter ``j``.

    The ladder is ``0, jitter_start, 10*jitter_start, ...`` up to
    ``1e-4 * trace(A) / dim``; ``jitter_start`` defaults to
    ``1e-12 * trace(A) / dim``. A zero matrix returns a zero factor.

    Returns ``(L, j)``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    n = A.shape[0]
    if not np.all(np.isfinite(A)):
        raise NotPositiveSemidefinite("matrix has non-finite entries")
    if not np.any(A):
        return np.zeros_like(A), 0.0
    eye = np.eye(n)
    for j in jitter_ladder(A, jitter_start):
        try:
            L = np.linalg.cholesky(A + j * eye if j else A)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, j
    raise NotPositiveSemidefinite("Cholesky failed at maximum jitter")


def _solve_lower(L, b):
    # forward substitution; zero pivots map to zero (degenerate directions)
    n = L.shape[0]
    x = np.zeros(n)
    for i in range(n):
        if L[i, i] == 0.0:
            x[i] = 0.0
        else:
            x[i] = (b[i] - L[i, :i] @ x[:i]) / L[i, i]
    return x


def mvn_logpdf(x, mean, cov):
    """Log density of ``N(mean, cov)`` at ``x`` via a jittered Cholesky."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = x.shape[0]
    if mean.shape != (d,) or cov.shape != (d, d):
        raise ValueError("dimension mismatch")
    L, _ = cholesky_psd(cov)
    diag = np.diag(L)
    if np.any(diag <= 0.0):
        raise NotPositiveSemidefinite("covariance is singular")
    z = _solve_lower(L, x - mean)
    return -0.5 * (d * LOG_2PI + z @ z) - np.sum(np.log(diag))


def mvn_sample(rng, mean, cov):
    """Draw one sample ``mean + L z`` with ``z`` standard normal from ``rng``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    L, _ = cholesky_psd(cov)
    z = rng.standard_normal(mean.shape[0])
    return mean + L @ z


def _fd_steps(theta, h_rel):
    return h_rel * np.maximum(1.0, np.abs(theta))


class NonFiniteStencil(FloatingPointError):
    """Raised when ``f`` is not finite at a finite-difference stencil point."""

    def __init__(self, coordinate):
        super().__init__(f"non-finite value at stencil point of coordinate {coordinate}")
        self.coordinate = coordinate


def _eval(f, x, k):
    v = float(f(x))
    if not math.isfinite(v):
        raise NonFiniteStencil(k)
    return v


def grad_fd(f, theta, h_rel=1e-5):
    """Central-difference gradient with steps ``h_rel * max(1, |theta_k|)``."""
    theta = np.asarray(theta, dtype=float)
    h = _fd_steps(theta, h_rel)
    g = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h[k]
        g[k] = (_eval(f, theta + e, k) - _eval(f, theta - e, k)) / (2.0 * h[k])
    return g


def hess_fd(f, theta, h_rel=1e-4, symmetrize=True, f0=None):
    """Central second-difference Hessian.

    Diagonal entries use the three-point stencil and off-diagonal entries the
    four-corner stencil; the raw matrix is symmetric by construction since each
    pair shares one set of evaluations. ``symmetrize`` applies ``(H + H^T)/2``.
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    h = _fd_steps(theta, h_rel)
    if f0 is None:
        f0 = _eval(f, theta, 0)
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        fp = _eval(f, theta + e, i)
        fm = _eval(f, theta - e, i)
        H[i, i] = (fp - 2.0 * f0 + fm) / (h[i] * h[i])
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h[i]
            ej[j] = h[j]
            fpp = _eval(f, theta + ei + ej, i)
            fpm = _eval(f, theta + ei - ej, i)
            fmp = _eval(f, theta - ei + ej, i)
            fmm = _eval(f, theta - ei - ej, i)
            H[i, j] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
            H[j, i] = H[i, j]
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


class RngStream:
    """Seeded random stream identified by ``(seed, stream_id)``.

    Built on the counter-based Philox bit generator; distinct stream ids give
    independent sequences and the same pair always replays the same draws.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._key = (self.stream_id,)
        self._gen = self._make(self._key)

    def _make(self, key):
        ss = np.random.SeedSequence(self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

    def spawn(self, sub_id):
        """Child stream keyed by this stream's full key path and ``sub_id``."""
        child = RngStream.__new__(RngStream)
        child.seed = self.seed
        child.stream_id = self.stream_id
        child._key = self._key + (int(sub_id),)
        child._gen = child._make(child._key)
        return child

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n, size=None, p=None):
        return self._gen.choice(n, size=size, p=p)

    def seed32(self):
        """A 32-bit integer for seeding compiled kernels."""
        return int(self._gen.integers(0, 2**31 - 1))
