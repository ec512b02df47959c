"""Posterior samplers.

Langevin-type samplers act on the unconstrained parameter vector and only need
a callable log posterior with ``grad`` (and ``hess`` for the Gaussian
iterations). ABC samplers work on the constrained scale through a simulator.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneracyError, InfeasibleThreshold
from .model import to_constrained
from .numerics import cholesky_psd


@dataclass
class SamplerConfig:
    """Step-size constant, tolerances, iteration caps and sample layout.

    The Langevin step is ``c * dim ** -4.5`` unless ``dtau`` is given.
    """

    c: float = 0.5
    eps1: float = 1e-5
    eps2: float = 1e-5
    max_iter: int = 100_000  # one-stage N
    max_iter1: int = 100_000  # two-stage N1
    max_iter2: int = 100_000  # two-stage N2
    burn_in: int = 1000  # N0
    thin: int = 10  # delta
    n_samples: int = 100  # B
    seed: int = 0
    dtau: float = None
    psi0_scale: float = 1.0
    max_halvings: int = 30

    def __post_init__(self):
        for name in ("c", "eps1", "eps2", "max_iter", "max_iter1", "max_iter2",
                     "n_samples", "thin"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.burn_in < 0:
            raise ValueError("burn_in must be nonnegative")

    def step_size(self, dim):
        if self.dtau is not None:
            return float(self.dtau)
        return self.c * dim ** -4.5

    def n_steps(self):
        """Langevin steps needed for ``n_samples`` kept draws."""
        return self.burn_in + (self.n_samples - 1) * self.thin + 1

    def kept_indices(self):
        # 1-based iterate numbers that are kept
        return [self.burn_in + b * self.thin + 1 for b in range(self.n_samples)]


@dataclass
class GaussianPosterior:
    """Gaussian approximation ``N(mode, cov)`` on the unconstrained scale."""

    mode: np.ndarray
    cov: np.ndarray
    lambda_max: float
    n_iter1: int
    n_iter2: int
    converged_mode: bool
    converged_cov: bool
    grad_evals: int = 0
    hess_evals: int = 0
    failed: bool = False
    message: str = ""
    cov_step: float = None

    @property
    def converged(self):
        return self.converged_mode and self.converged_cov and not self.failed

    def to_dict(self):
        return {
            "mode": [float(x) for x in self.mode],
            "covariance": [[float(x) for x in row] for row in self.cov],
            "lambda_max": float(self.lambda_max),
            "N1": int(self.n_iter1),
            "N2": int(self.n_iter2),
            "converged": bool(self.converged),
        }


@dataclass
class SampleResult:
    samples: np.ndarray  # (B, dim) unconstrained, or constrained for ABC
    failed: bool = False
    fail_step: int = -1
    grad_evals: int = 0
    acceptance_rate: float = float("nan")
    n_simulations: int = 0
    info: dict = field(default_factory=dict)


def _finite(x):
    return bool(np.all(np.isfinite(x)))


def _lambda_max(cov):
    if not _finite(cov):
        return float("nan")
    return float(np.linalg.eigvalsh(0.5 * (cov + cov.T))[-1])


def _psi0(cfg, dim, psi0):
    if psi0 is None:
        return cfg.psi0_scale * np.eye(dim)
    return np.array(psi0, dtype=float)


# Langevin -----------------------------------------------------------------


def ula(logpost, cfg, rng, phi0):
    """Unadjusted Langevin chain from ``phi0``.

    Runs ``burn_in + (B-1)*thin + 1`` steps and keeps iterates
    ``burn_in + b*thin + 1``. A non-finite gradient marks the run failed.
    """
    phi = np.array(phi0, dtype=float)
    dim = phi.size
    dt = cfg.step_size(dim)
    keep = cfg.kept_indices()
    out = np.empty((cfg.n_samples, dim))
    b = 0
    n = cfg.n_steps()
    for k in range(1, n + 1):
        g = logpost.grad(phi)
        if not _finite(g):
            return SampleResult(out[:b], failed=True, fail_step=k, grad_evals=k)
        phi = phi + g * dt + math.sqrt(2.0 * dt) * rng.standard_normal(dim)
        if not _finite(phi):
            return SampleResult(out[:b], failed=True, fail_step=k, grad_evals=k)
        if b < len(keep) and k == keep[b]:
            out[b] = phi
            b += 1
    return SampleResult(out, grad_evals=n)


def _log_q(to, frm, g_frm, dt):
    d = to - frm - g_frm * dt
    return -(d @ d) / (4.0 * dt)


def mala_log_ratio(lp_cur, lp_prop, cur, prop, g_cur, g_prop, dt):
    """Log Metropolis-Hastings ratio for a Langevin proposal ``cur -> prop``."""
    return (lp_prop + _log_q(cur, prop, g_prop, dt)) - (lp_cur + _log_q(prop, cur, g_cur, dt))


def mala(logpost, warm, cfg, rng):
    """Metropolis-adjusted Langevin chain started from a draw of ``warm``."""
    dim = len(warm.mode)
    dt = cfg.step_size(dim)
    phi = warm.mode + cholesky_psd(warm.cov)[0] @ rng.standard_normal(dim)
    lp = logpost(phi)
    g = logpost.grad(phi)
    if not (math.isfinite(lp) and _finite(g)):
        phi = np.array(warm.mode, dtype=float)
        lp = logpost(phi)
        g = logpost.grad(phi)
    keep = cfg.kept_indices()
    out = np.empty((cfg.n_samples, dim))
    b = 0
    acc = 0
    n = cfg.n_steps()
    for k in range(1, n + 1):
        prop = phi + g * dt + math.sqrt(2.0 * dt) * rng.standard_normal(dim)
        lp_p = logpost(prop)
        accepted = False
        if math.isfinite(lp_p):
            g_p = logpost.grad(prop)
            if _finite(g_p):
                log_r = mala_log_ratio(lp, lp_p, phi, prop, g, g_p, dt)
                if math.log(rng.uniform()) < min(0.0, log_r):
                    phi, lp, g = prop, lp_p, g_p
                    accepted = True
        acc += accepted
        if b < len(keep) and k == keep[b]:
            out[b] = phi
            b += 1
    return SampleResult(out, grad_evals=n + 1, acceptance_rate=acc / n)


# Gaussian posterior iterations -------------------------------------------


def _lyapunov_step(psi, H, dt):
    dim = psi.shape[0]
    new = psi + (psi @ H.T + H @ psi + 2.0 * np.eye(dim)) * dt
    return 0.5 * (new + new.T)


def raptor_one_stage(logpost, cfg, theta0, psi0=None):
    """Joint iteration of the mode and covariance recursions.

    Every step evaluates the gradient and the Hessian at the current mode and
    updates both until both increments fall below their tolerances.
    """
    theta = np.array(theta0, dtype=float)
    dim = theta.size
    dt = cfg.step_size(dim)
    dt_cov = dt
    psi_start = _psi0(cfg, dim, psi0)
    psi = psi_start.copy()
    halvings = 0
    ge = he = 0

    def derivs(x):
        nonlocal ge, he
        g = logpost.grad(x)
        ge += 1
        if not _finite(g):
            return None
        H = logpost.hess(x)
        he += 1
        return (g, H) if _finite(H) else None

    def result(k, conv_mode, conv_cov, failed=False, message=""):
        lam = float("nan") if failed else _lambda_max(psi)
        return GaussianPosterior(theta, psi, lam, k, k, conv_mode, conv_cov, ge, he,
                                 failed=failed, message=message, cov_step=dt_cov)

    d = derivs(theta)
    if d is None:
        return result(1, False, False, True, "non-finite derivative at start")
    g, H = d
    for k in range(1, cfg.max_iter + 1):
        step = g * dt
        new = _lyapunov_step(psi, H, dt_cov)
        dpsi = np.linalg.norm(new - psi)
        psi = new
        if not _finite(psi) or np.linalg.norm(psi) > 1e8:
            halvings += 1
            if halvings > cfg.max_halvings:
                return result(k, False, False, True, "covariance diverged")
            dt_cov *= 0.5
            psi = psi_start.copy()
            dpsi = math.inf
        done = np.linalg.norm(step) <= cfg.eps1 and dpsi <= cfg.eps2
        if done or k == cfg.max_iter:
            theta = theta + step
            return result(k, bool(np.linalg.norm(step) <= cfg.eps1), bool(dpsi <= cfg.eps2),
                          message="" if done else "iteration cap reached")
        new_theta, step, d = _backtrack(derivs, theta, step, cfg.max_halvings)
        if new_theta is None:
            return result(k, False, False, True, "non-finite derivative")
        theta = new_theta
        g, H = d
    return result(cfg.max_iter, False, False, message="iteration cap reached")


def _backtrack(f, theta, step, max_halvings):
    # evaluate f at theta + step, halving the step while the value is non-finite
    for _ in range(max_halvings + 1):
        new = theta + step
        val = f(new)
        if val is not None and (isinstance(val, tuple) or _finite(val)):
            return new, step, val
        step = 0.5 * step
    return None, step, None


def mode_iteration(logpost, theta0, dt, eps, max_iter, max_halvings=50):
    """Gradient-ascent recursion on the mode.

    A step that lands where the gradient is non-finite (the log posterior
    returned its failure sentinel) is halved and retried.
    Returns (theta, n_iter, converged, ok).
    """
    theta = np.array(theta0, dtype=float)
    g = logpost.grad(theta)
    if not _finite(g):
        return theta, 1, False, False
    step = g * dt
    for k in range(1, max_iter + 1):
        if np.linalg.norm(step) <= eps:
            return theta + step, k, True, True
        if k == max_iter:
            return theta + step, k, False, True
        new, step, g = _backtrack(logpost.grad, theta, step, max_halvings)
        if new is None:
            return theta, k, False, False
        theta = new
        step = g * dt
    return theta, max_iter, False, True


def covariance_iteration(H, psi0, dt, eps, max_iter, max_halvings=30, patience=50):
    """Lyapunov recursion with fixed ``H``.

    If the increment norm grows for ``patience`` consecutive steps or the
    Frobenius norm exceeds 1e8, the step is halved and the recursion restarts
    from ``psi0``. Returns (psi, n_iter, converged, final_step).
    """
    psi0 = np.array(psi0, dtype=float)
    total = 0
    for _ in range(max_halvings + 1):
        psi = psi0.copy()
        prev = math.inf
        growing = 0
        diverged = False
        for k in range(1, max_iter + 1):
            new = _lyapunov_step(psi, H, dt)
            d = np.linalg.norm(new - psi)
            psi = new
            total += 1
            if d <= eps:
                return psi, total, True, dt
            growing = growing + 1 if d > prev else 0
            prev = d
            if growing >= patience or not _finite(psi) or np.linalg.norm(psi) > 1e8:
                diverged = True
                break
        if not diverged:
            return psi, total, False, dt
        dt *= 0.5
    return psi, total, False, dt


def raptor_two_stage(logpost, cfg, theta0, psi0=None):
    """Mode recursion to convergence, one Hessian, then the covariance recursion."""
    theta0 = np.array(theta0, dtype=float)
    dim = theta0.size
    dt = cfg.step_size(dim)
    n_grad0 = getattr(logpost, "n_grad", 0)
    theta, n1, conv1, ok = mode_iteration(logpost, theta0, dt, cfg.eps1, cfg.max_iter1,
                                          cfg.max_halvings)
    ge = getattr(logpost, "n_grad", n_grad0 + n1) - n_grad0
    psi_start = _psi0(cfg, dim, psi0)
    if not ok:
        return GaussianPosterior(theta, psi_start, float("nan"), n1, 0, False, False, ge, 0,
                                 failed=True, message="non-finite gradient")
    H = logpost.hess(theta)
    if not _finite(H):
        return GaussianPosterior(theta, psi_start, float("nan"), n1, 0, conv1, False, ge, 1,
                                 failed=True, message="non-finite Hessian")
    psi, n2, conv2, dt_cov = covariance_iteration(H, psi_start, dt, cfg.eps2, cfg.max_iter2,
                                                  cfg.max_halvings)
    failed = not _finite(psi)
    return GaussianPosterior(theta, psi, _lambda_max(psi), n1, n2, conv1, conv2, ge, 1,
                             failed=failed, message="" if conv2 else "covariance not converged",
                             cov_step=dt_cov)


def sample_gaussian_posterior(gp, ps, n, rng):
    """``n`` draws from ``N(mode, cov)`` mapped to the constrained scale."""
    L, _ = cholesky_psd(gp.cov)
    dim = len(gp.mode)
    out = np.empty((n, dim))
    for b in range(n):
        out[b] = to_constrained(ps, gp.mode + L @ rng.standard_normal(dim))
    return out


# ABC ----------------------------------------------------------------------


def discrepancy(observed, simulated):
    """Euclidean distance over matched entries; NaN marks unobserved ones."""
    a = np.asarray(observed, dtype=float)
    b = np.asarray(simulated, dtype=float)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    m = ~(np.isnan(a) | np.isnan(b))
    d = a[m] - b[m]
    return float(math.sqrt(d @ d))


def _prior_logpdf(ps, theta_c):
    total = 0.0
    for k, p in enumerate(ps.params):
        lp = p.prior.logpdf(theta_c[k])
        if lp == -math.inf:
            return -math.inf
        total += lp
    return total


def _prior_draw(ps, rng):
    return np.array([p.prior.sample(rng) for p in ps.params])


def abc_rejection(simulate, ps, data, eps, n_samples, rng, window=1_000_000,
                  min_rate=1e-6, proposal=None):
    """Rejection ABC: keep prior draws whose simulated data lie within ``eps``.

    ``simulate(theta_c, rng)`` returns data comparable with ``data`` via
    :func:`discrepancy`.
    """
    out = []
    trials = 0
    in_window = 0
    acc_window = 0
    while len(out) < n_samples:
        theta = _prior_draw(ps, rng) if proposal is None else proposal(rng)
        trials += 1
        in_window += 1
        if math.isinf(eps) and eps > 0:
            out.append(theta)
            acc_window += 1
        else:
            x = simulate(theta, rng)
            if x is not None and discrepancy(data, x) <= eps:
                out.append(theta)
                acc_window += 1
        if in_window >= window:
            if acc_window / in_window < min_rate:
                raise InfeasibleThreshold(
                    f"acceptance {acc_window}/{in_window} below {min_rate} at eps={eps}")
            in_window = acc_window = 0
    res = SampleResult(np.array(out), n_simulations=trials,
                       acceptance_rate=n_samples / trials)
    return res


def _kernel_logpdf_sum(theta, particles, weights, kchol_inv, klogdet):
    # log sum_j w_j N(theta; particle_j, K)
    z = (theta[None, :] - particles) @ kchol_inv.T
    logs = -0.5 * np.sum(z * z, axis=1) - klogdet - 0.5 * theta.size * math.log(2 * math.pi)
    mx = np.max(logs)
    return mx + math.log(np.sum(weights * np.exp(logs - mx)))


def abc_smc(simulate, ps, data, schedule, kernel_cov, n_samples, rng, window=1_000_000,
            min_rate=1e-6):
    """Sequential Monte Carlo ABC through a decreasing threshold schedule.

    The first population comes from the prior filtered at ``schedule[0]``;
    later populations perturb resampled particles with a Gaussian kernel and
    reweight by prior over kernel mixture density, then resample ``n_samples``
    particles and reset weights to uniform.
    """
    schedule = [float(e) for e in schedule]
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("threshold schedule must be strictly decreasing")
    kernel_cov = np.atleast_2d(np.asarray(kernel_cov, dtype=float))
    if kernel_cov.ndim == 2 and kernel_cov.shape[0] == 1 and ps.dim > 1:
        kernel_cov = np.diag(kernel_cov.ravel())
    Lk = np.linalg.cholesky(kernel_cov)
    Lk_inv = np.linalg.inv(Lk)
    klogdet = float(np.sum(np.log(np.diag(Lk))))
    first = abc_rejection(simulate, ps, data, schedule[0], n_samples, rng, window, min_rate)
    particles = first.samples
    weights = np.full(n_samples, 1.0 / n_samples)
    sims = first.n_simulations
    history = [{"eps": schedule[0], "simulations": first.n_simulations, "ess": float(n_samples)}]
    dim = ps.dim
    for p, eps in enumerate(schedule[1:], start=1):
        new = np.empty((n_samples, dim))
        new_w = np.empty(n_samples)
        trials = 0
        in_window = acc_window = 0
        b = 0
        cdf = np.cumsum(weights)
        cdf /= cdf[-1]
        while b < n_samples:
            j = min(int(np.searchsorted(cdf, rng.uniform())), n_samples - 1)
            theta = particles[j] + Lk @ rng.standard_normal(dim)
            trials += 1
            in_window += 1
            lp = _prior_logpdf(ps, theta)
            if lp > -math.inf:
                x = simulate(theta, rng)
                if x is not None and discrepancy(data, x) <= eps:
                    new[b] = theta
                    new_w[b] = lp - _kernel_logpdf_sum(theta, particles, weights, Lk_inv, klogdet)
                    b += 1
                    acc_window += 1
            if in_window >= window:
                if acc_window / in_window < min_rate:
                    raise InfeasibleThreshold(
                        f"acceptance {acc_window}/{in_window} below {min_rate} at eps={eps}")
                in_window = acc_window = 0
        sims += trials
        w = np.exp(new_w - np.max(new_w))
        w /= w.sum()
        ess = 1.0 / np.sum(w * w)
        history.append({"eps": eps, "simulations": trials, "ess": float(ess)})
        if ess < 2.0:
            raise DegeneracyError(f"effective sample size {ess:.3g} < 2 at population {p}")
        # resample by weight, then reset to uniform
        cdf = np.cumsum(w)
        cdf /= cdf[-1]
        idx = np.minimum(np.searchsorted(cdf, rng.uniform(size=n_samples)), n_samples - 1)
        particles = new[idx]
        weights = np.full(n_samples, 1.0 / n_samples)
    return SampleResult(particles, n_simulations=sims, acceptance_rate=n_samples * len(schedule) / sims,
                        info={"populations": history, "weights": weights})
