"""Linear-noise moment filter: propagation, Bayesian updates and likelihoods."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import IntegrationDiverged, NotPositiveSemidefinite
from .model import _theta, log_prior_unconstrained, to_constrained
from .numerics import cholesky_psd, grad_fd, hess_fd, mvn_logpdf


@dataclass
class LnaMoments:
    """Mean and scaled covariance at time ``t``; full covariance is ``cov / omega``."""

    t: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class FilterDiagnostics:
    loglik_terms: list = field(default_factory=list)
    jitter: list = field(default_factory=list)
    clamp_events: int = 0
    failed: bool = False
    message: str = ""


def lna_propagate(net, theta, m, t1, substeps=50):
    """Integrate the mean and covariance ODEs from ``m.t`` to ``t1`` with RK4."""
    if t1 < m.t:
        raise ValueError("t1 precedes the moments' time")
    if t1 == m.t:
        return LnaMoments(m.t, m.mean.copy(), m.cov.copy())
    mean, cov, ok, _ = K.lna_propagate(
        *net.packed, _theta(net, theta), np.asarray(m.mean, dtype=float),
        np.asarray(m.cov, dtype=float), float(t1 - m.t), int(substeps))
    if not ok:
        raise IntegrationDiverged("moment equations diverged", time=t1)
    return LnaMoments(float(t1), mean, cov)


def bayes_update(m, y, G, Sigma, omega=1.0):
    """Condition the moments on ``y = G s + eps``, ``eps ~ N(0, Sigma)``.

    Returns the updated moments and the predictive log density of ``y``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    Gam = np.asarray(m.cov, dtype=float)
    S = G @ Gam @ G.T + omega * Sigma
    L, _ = cholesky_psd(S)
    if np.any(np.diag(L) <= 0):
        raise NotPositiveSemidefinite("innovation covariance is singular")
    GG = G @ Gam
    # K = Gam G^T S^-1, computed by two triangular solves
    KT = np.linalg.solve(L.T, np.linalg.solve(L, GG))
    pred = G @ m.mean
    alpha = m.mean + KT.T @ (y - pred)
    # Joseph form: algebraically Gam - K G Gam, but PSD under round-off
    A = np.eye(len(Gam)) - KT.T @ G
    beta = A @ Gam @ A.T + omega * KT.T @ Sigma @ KT
    beta = 0.5 * (beta + beta.T)
    ll = mvn_logpdf(y, pred, S / omega)
    return LnaMoments(m.t, alpha, beta), ll


# likelihoods --------------------------------------------------------------


class LogPosterior:
    """Log posterior over unconstrained parameters ``phi``.

    Parameters
    ----------
    net : ReactionNetwork
    ps : ParameterSpace
    data : ObservationSet
    init : (mean, cov) or callable
        Initial moments at the first observation time; ``cov`` is the scaled
        covariance (full covariance times omega).
    base_theta : array_like
        Full rate vector; inferred entries are overwritten from ``phi``.
    substeps : int
        RK4 substeps per observation interval.
    noise_scale : {"std", "variance"}
        Whether noise parameters are standard deviations or variances.
    likelihood : {"lna", "em"}
        Moment filter, or Euler-Maruyama transition density on dense,
        fully observed, noise-free paths.
    """

    def __init__(self, net, ps, data, init, base_theta, substeps=50,
                 noise_scale="std", likelihood="lna", h_grad=1e-5, h_hess=1e-4):
        self.net = net
        self.ps = ps
        self.data = data
        self.init_mean = np.asarray(init[0], dtype=float)
        self.init_cov = np.asarray(init[1], dtype=float)
        self.base_theta = np.asarray(base_theta, dtype=float)
        self.substeps = int(substeps)
        if noise_scale not in ("std", "variance"):
            raise ValueError("noise_scale must be 'std' or 'variance'")
        self.noise_scale = noise_scale
        if likelihood not in ("lna", "em"):
            raise ValueError("likelihood must be 'lna' or 'em'")
        self.likelihood = likelihood
        self.h_grad = h_grad
        self.h_hess = h_hess
        self.n_evals = 0
        self.n_grad = 0
        self.n_hess = 0
        self._rate_slots = [(k, p.index) for k, p in enumerate(ps.params) if p.target == "rate"]
        self._noise_slots = [(k, p.index) for k, p in enumerate(ps.params) if p.target == "noise"]
        self._trajs = [
            (np.ascontiguousarray(tr.times, dtype=float), np.ascontiguousarray(tr.mask),
             np.ascontiguousarray(np.nan_to_num(tr.values)), tr.sigma ** 2)
            for tr in data
        ]

    @property
    def dim(self):
        return self.ps.dim

    def split(self, theta_c):
        """Rate vector and per-species noise variance from constrained values."""
        theta = self.base_theta.copy()
        for k, j in self._rate_slots:
            theta[j] = theta_c[k]
        over = {}
        for k, j in self._noise_slots:
            val = theta_c[k]
            over[j] = val if self.noise_scale == "variance" else val * val
        return theta, over

    def _noise_var(self, sig2, over):
        if not over:
            return sig2
        nv = sig2.copy()
        for j, v in over.items():
            nv[:, j] = v
        return nv

    def loglik_constrained(self, theta_c):
        theta, over = self.split(theta_c)
        total = 0.0
        packed = self.net.packed
        for times, mask, values, sig2 in self._trajs:
            if self.likelihood == "em":
                dt = float(times[1] - times[0])
                ll = K.em_transition_loglik(*packed, theta, values, dt)
            else:
                ll, ok, _, _ = K.filter_loglik(
                    *packed, theta, self.init_mean, self.init_cov, times, mask, values,
                    self._noise_var(sig2, over), self.substeps)
            if not math.isfinite(ll):
                return -math.inf
            total += ll
        return total

    def log_likelihood(self, phi):
        phi = np.asarray(phi, dtype=float)
        if not np.all(np.isfinite(phi)):
            return -math.inf
        theta_c = to_constrained(self.ps, phi)
        if not np.all(np.isfinite(theta_c)):
            return -math.inf
        return self.loglik_constrained(theta_c)

    def __call__(self, phi):
        self.n_evals += 1
        lp = log_prior_unconstrained(self.ps, phi)
        if lp == -math.inf:
            return -math.inf
        ll = self.log_likelihood(phi)
        if not math.isfinite(ll):
            return -math.inf
        return ll + lp

    def grad(self, phi):
        """FD gradient; non-finite values propagate as a NaN vector."""
        self.n_grad += 1
        try:
            return grad_fd(self, phi, self.h_grad)
        except FloatingPointError:
            return np.full(len(phi), np.nan)

    def hess(self, phi):
        self.n_hess += 1
        try:
            return hess_fd(self, phi, self.h_hess)
        except FloatingPointError:
            return np.full((len(phi), len(phi)), np.nan)

    def filter_path(self, theta_c, traj_index=0, grid=None):
        """Filtered moments along one trajectory (pure-Python reference path).

        Returns ``(updates, grid_moments, diagnostics)``: the post-update
        moments at each observation time and, if ``grid`` is given, the
        current filtered moments at each grid time.
        """
        theta, over = self.split(np.asarray(theta_c, dtype=float))
        tr = self.data.trajectories[traj_index]
        return run_filter(self.net, theta, tr, (self.init_mean, self.init_cov),
                          self.substeps, over, grid)


def run_filter(net, theta, traj, init, substeps=50, noise_override=None, grid=None):
    """Propagate/update along ``traj`` using :func:`lna_propagate` and :func:`bayes_update`."""
    diag = FilterDiagnostics()
    m = LnaMoments(float(traj.times[0]), np.array(init[0], dtype=float),
                   np.array(init[1], dtype=float))
    obs_t = list(traj.times)
    grid = [] if grid is None else [float(g) for g in grid]
    events = sorted({*obs_t, *grid})
    obs_pos = {t: h for h, t in enumerate(obs_t)}
    grid_set = set(grid)
    updates = []
    at_grid = {}
    for t in events:
        if t < m.t:
            if t in grid_set:
                raise ValueError("grid time before the first observation")
            continue
        # propagate with substeps scaled to the observation spacing
        if t > m.t:
            if len(obs_t) > 1:
                ref = (obs_t[-1] - obs_t[0]) / (len(obs_t) - 1)
                n_sub = max(1, int(math.ceil(substeps * (t - m.t) / ref - 1e-9)))
            else:
                n_sub = substeps
            m = lna_propagate(net, theta, m, t, n_sub)
        if t in obs_pos:
            h = obs_pos[t]
            idx = traj.observed_index(h)
            if len(idx):
                G = traj.selection(h)
                sig2 = traj.sigma[h, idx] ** 2
                if noise_override:
                    sig2 = np.array([noise_override.get(j, s) for j, s in zip(idx, sig2)])
                m, ll = bayes_update(m, traj.values[h, idx], G, np.diag(sig2), net.omega)
                diag.loglik_terms.append(ll)
            updates.append(m)
        if t in grid_set:
            at_grid[t] = m
    return updates, [at_grid[g] for g in grid], diag


def log_likelihood(net, ps, phi, data, init, base_theta, substeps=50, noise_scale="std"):
    return LogPosterior(net, ps, data, init, base_theta, substeps, noise_scale).log_likelihood(phi)


def log_posterior(net, ps, phi, data, init, base_theta, substeps=50, noise_scale="std"):
    return LogPosterior(net, ps, data, init, base_theta, substeps, noise_scale)(phi)


# trajectory inference -----------------------------------------------------


@dataclass
class Bands:
    times: np.ndarray
    mean: np.ndarray  # (n_grid, n_species)
    lo95: np.ndarray
    hi95: np.ndarray

    def rows(self):
        for i, t in enumerate(self.times):
            for j in range(self.mean.shape[1]):
                yield (float(t), j, float(self.mean[i, j]), float(self.lo95[i, j]),
                       float(self.hi95[i, j]))


def _psd_factor(cov):
    try:
        L, _ = cholesky_psd(cov)
        return L
    except NotPositiveSemidefinite:
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        return V * np.sqrt(np.clip(w, 0.0, None))


def infer_trajectory(logpost, theta_samples, grid, n_draws, rng, traj_index=0):
    """Pointwise mean and 95% bands of sampled filtered trajectories.

    Each draw picks a parameter row from ``theta_samples`` (constrained
    scale), runs the filter and samples every grid time from the current
    filtered marginal ``N(mean, cov / omega)``.
    """
    theta_samples = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    grid = np.asarray(grid, dtype=float)
    omega = logpost.net.omega
    cache = {}
    n_s = logpost.net.num_species
    draws = np.empty((n_draws, len(grid), n_s))
    for d in range(n_draws):
        b = int(rng.integers(0, len(theta_samples)))
        if b not in cache:
            _, gm, _ = logpost.filter_path(theta_samples[b], traj_index, grid)
            cache[b] = [(g.mean, _psd_factor(g.cov / omega)) for g in gm]
        for i, (mu, L) in enumerate(cache[b]):
            draws[d, i] = mu + L @ rng.standard_normal(n_s)
    return Bands(grid, draws.mean(axis=0), np.quantile(draws, 0.025, axis=0),
                 np.quantile(draws, 0.975, axis=0))
