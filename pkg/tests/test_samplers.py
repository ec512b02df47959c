import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srnbayes import experiments as E
from srnbayes.errors import DegeneracyError, InfeasibleThreshold
from srnbayes.model import (
    Identity, Log, Logit, Parameter, ParameterSpace, Uniform, to_constrained,
)
from srnbayes.numerics import RngStream
from srnbayes.samplers import (
    GaussianPosterior, SamplerConfig, abc_rejection, abc_smc, covariance_iteration, discrepancy,
    mala, mala_log_ratio, mode_iteration, raptor_one_stage, raptor_two_stage,
    sample_gaussian_posterior, ula,
)

from oracles import quadratic_target, random_spd


class ZeroNoise:
    def standard_normal(self, size=None):
        return np.zeros(size)


class Flat:
    n_grad = 0

    def __call__(self, phi):
        return 0.0

    def grad(self, phi):
        return np.zeros(len(phi))


def _box(n, lo=0.0, hi=10.0):
    return ParameterSpace([Parameter(f"p{k}", "rate", k, Identity(), Uniform(lo, hi))
                           for k in range(n)])


# config -------------------------------------------------------------------


def test_config_layout():
    cfg = SamplerConfig(burn_in=1000, thin=10, n_samples=100, c=0.5)
    assert cfg.n_steps() == 1000 + 99 * 10 + 1
    assert cfg.kept_indices()[:2] == [1001, 1011] and cfg.kept_indices()[-1] == cfg.n_steps()
    assert math.isclose(cfg.step_size(2), 0.5 * 2 ** -4.5)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(c=0)
    with pytest.raises(ValueError):
        SamplerConfig(burn_in=-1)


# ULA ----------------------------------------------------------------------


def test_ula_driftless_increments():
    dt = 0.05
    cfg = SamplerConfig(dtau=dt, burn_in=0, thin=1, n_samples=10_001)
    out = ula(Flat(), cfg, RngStream(0), np.zeros(2))
    inc = np.diff(out.samples, axis=0)
    assert np.all(np.abs(inc.var(axis=0) / (2 * dt) - 1) < 0.05)


def test_ula_noise_off_first_step():
    tgt = quadratic_target([0.0, 0.0], np.eye(2))
    cfg = SamplerConfig(dtau=0.1, burn_in=0, thin=1, n_samples=1)
    out = ula(tgt, cfg, ZeroNoise(), np.array([2.0, 0.0]))
    assert np.allclose(out.samples[0], [1.8, 0.0])


def test_ula_gaussian_target_mean():
    mu = np.array([1.0, -2.0])
    tgt = quadratic_target(mu, np.eye(2))
    cfg = SamplerConfig(dtau=0.01, burn_in=1000, thin=400, n_samples=1500)
    out = ula(tgt, cfg, RngStream(1), np.zeros(2))
    se = out.samples.std(axis=0, ddof=1) / math.sqrt(len(out.samples))
    assert np.all(np.abs(out.samples.mean(axis=0) - mu) < 3 * se)


def test_ula_records_failure():
    class Bad(Flat):
        def grad(self, phi):
            return np.full(len(phi), np.nan)

    out = ula(Bad(), SamplerConfig(dtau=0.1), RngStream(0), np.zeros(2))
    assert out.failed and out.fail_step == 1


def test_ula_deterministic():
    tgt = quadratic_target([0.5], np.eye(1))
    cfg = SamplerConfig(dtau=0.1, burn_in=10, thin=2, n_samples=20)
    a = ula(tgt, cfg, RngStream(4), np.zeros(1)).samples
    b = ula(tgt, cfg, RngStream(4), np.zeros(1)).samples
    assert np.array_equal(a, b)


# Gaussian iterations ------------------------------------------------------


def test_one_stage_quadratic():
    tgt = quadratic_target([1.0, -1.0], np.diag([2.0, 4.0]))
    cfg = SamplerConfig(dtau=0.05, eps1=1e-12, eps2=1e-12)
    gp = raptor_one_stage(tgt, cfg, np.zeros(2))
    assert gp.converged
    assert np.allclose(gp.mode, [1.0, -1.0], atol=1e-6)
    assert np.allclose(gp.cov, np.diag([0.5, 0.25]), atol=1e-6)
    assert math.isclose(gp.lambda_max, 0.5, rel_tol=1e-6)


def test_one_stage_starts_at_fixed_point():
    prec = np.diag([2.0, 4.0])
    tgt = quadratic_target([1.0, -1.0], prec)
    gp = raptor_one_stage(tgt, SamplerConfig(dtau=0.05), np.array([1.0, -1.0]),
                          np.linalg.inv(prec))
    assert gp.n_iter1 == 1 and gp.converged
    assert np.array_equal(gp.mode, [1.0, -1.0])


def test_two_stage_quadratic_matches_one_stage():
    tgt = quadratic_target([1.0, -1.0], np.diag([2.0, 4.0]))
    cfg = SamplerConfig(dtau=0.05, eps1=1e-13, eps2=1e-13)
    a = raptor_one_stage(tgt, cfg, np.zeros(2))
    b = raptor_two_stage(tgt, cfg, np.zeros(2))
    assert np.max(np.abs(a.mode - b.mode)) < 1e-8
    assert np.max(np.abs(a.cov - b.cov)) < 1e-8
    assert b.hess_evals == 1 and a.hess_evals == a.n_iter1


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_fixed_point_consistency(n, seed):
    rng = np.random.default_rng(seed)
    prec = random_spd(rng, n, cond=10)
    mu = rng.normal(size=n)
    tgt = quadratic_target(mu, prec)
    dt = 0.5 / np.linalg.eigvalsh(prec).max()
    cfg = SamplerConfig(dtau=dt, eps1=1e-8, eps2=1e-8)
    for gp in (raptor_one_stage(tgt, cfg, np.zeros(n)), raptor_two_stage(tgt, cfg, np.zeros(n))):
        H = -prec
        assert np.linalg.norm(tgt.grad(gp.mode)) <= 10 * cfg.eps1 / dt
        resid = gp.cov @ H.T + H @ gp.cov + 2 * np.eye(n)
        assert np.linalg.norm(resid) <= 10 * cfg.eps2 / dt


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.floats(0.01, 0.9), st.integers(0, 2**31 - 1))
def test_stage_two_identity_target(n, dt, seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    psi, _, conv, _ = covariance_iteration(-np.eye(n), B @ B.T, dt, 1e-10, 100_000)
    assert conv and np.allclose(psi, np.eye(n), atol=1e-8)


def test_stage_two_guard_halves_step():
    H = -np.diag([1.0, 50.0])
    psi, n, conv, dt_used = covariance_iteration(H, np.eye(2), 0.1, 1e-10, 100_000)
    assert conv and dt_used < 0.1
    assert np.allclose(psi, np.diag([1.0, 0.02]), atol=1e-8)


def test_mode_iteration_backtracks_over_sentinel():
    class Walled:
        n_grad = 0

        def grad(self, phi):
            self.n_grad += 1
            if phi[0] > 1.5:
                return np.array([np.nan])
            return np.array([-(phi[0] - 1.0)]) * 2

    # full steps overshoot the mode and land past the wall; halving recovers
    theta, n, conv, ok = mode_iteration(Walled(), np.array([-10.0]), 0.9, 1e-12, 10_000)
    assert ok and conv and abs(theta[0] - 1.0) < 1e-9


def test_two_stage_reports_nonfinite_start():
    class Nan(Flat):
        def grad(self, phi):
            return np.full(len(phi), np.nan)

    gp = raptor_two_stage(Nan(), SamplerConfig(dtau=0.1), np.zeros(2))
    assert gp.failed and not gp.converged


# Gaussian posterior sampling ---------------------------------------------


def test_sample_zero_covariance():
    ps = ParameterSpace([Parameter("a", "rate", 0, Log(), Uniform(0, 5)),
                         Parameter("b", "rate", 1, Logit(0, 25), Uniform(0, 25))])
    gp = GaussianPosterior(np.array([0.1, -0.5]), np.zeros((2, 2)), 0.0, 1, 1, True, True)
    s = sample_gaussian_posterior(gp, ps, 20, RngStream(0))
    assert np.array_equal(s, np.tile(to_constrained(ps, gp.mode), (20, 1)))


def test_sample_moments_and_positivity():
    ps = ParameterSpace([Parameter("a", "rate", 0, Identity(), Uniform(-100, 100)),
                         Parameter("b", "rate", 1, Log(), Uniform(0, 1e9))])
    gp = GaussianPosterior(np.array([0.0, 0.0]), np.diag([2.0, 0.5]), 2.0, 1, 1, True, True)
    s = sample_gaussian_posterior(gp, ps, 10_000, RngStream(1))
    assert abs(s[:, 0].var() / 2.0 - 1) < 0.05
    assert abs(np.log(s[:, 1]).var() / 0.5 - 1) < 0.05
    assert np.all(s[:, 1] > 0)


# MALA ---------------------------------------------------------------------


def test_mala_ratio_identity_proposal():
    x = np.array([0.3, -1.0])
    g = np.array([0.5, 2.0])
    assert mala_log_ratio(-1.2, -1.2, x, x, g, g, 0.1) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.floats(-3, 3), st.floats(-3, 3))
def test_mala_ratio_symmetric_case(x, a, b):
    # flat target with zero gradient: proposal is symmetric, ratio is exactly 1
    cur = np.array(x)
    prop = cur + np.array([a, b])
    z = np.zeros(2)
    assert mala_log_ratio(0.0, 0.0, cur, prop, z, z, 0.2) == 0.0


@pytest.fixture(scope="module")
def mala_run():
    prec = np.array([[2.0, 0.6], [0.6, 1.0]])
    tgt = quadratic_target([1.0, -1.0], prec)
    cfg = SamplerConfig(dtau=0.4, burn_in=500, thin=5, n_samples=10_000)
    warm = raptor_two_stage(tgt, cfg, np.zeros(2))
    return prec, mala(tgt, warm, cfg, RngStream(9))


def test_mala_acceptance_range(mala_run):
    _, out = mala_run
    assert 0.2 < out.acceptance_rate < 0.9


def test_mala_covariance(mala_run):
    prec, out = mala_run
    target = np.linalg.inv(prec)
    emp = np.cov(out.samples.T)
    assert np.all(np.abs(np.diag(emp) / np.diag(target) - 1) < 0.1)
    assert abs(emp[0, 1] - target[0, 1]) < 0.1 * math.sqrt(target[0, 0] * target[1, 1])


# ABC ----------------------------------------------------------------------


def test_discrepancy_examples():
    a = np.array([[1.0, np.nan], [2.0, 3.0]])
    assert discrepancy(a, a) == 0.0
    b = a.copy()
    b[0, 0] += 3
    assert discrepancy(a, b) == 3.0
    b[1, 1] += 4
    assert discrepancy(a, b) == 5.0


def _toy_simulator(theta, rng):
    return np.array([theta[0] + 0.5 * rng.standard_normal()])


def test_abc_infinite_threshold_returns_prior():
    ps = _box(1)
    out = abc_rejection(_toy_simulator, ps, np.array([5.0]), math.inf, 2000, RngStream(0))
    assert out.acceptance_rate == 1.0
    assert abs(out.samples.mean() - 5.0) < 0.2 and abs(out.samples.var() - 100 / 12) < 0.6


def test_abc_zero_threshold_infeasible():
    with pytest.raises(InfeasibleThreshold):
        abc_rejection(_toy_simulator, _box(1), np.array([5.0]), 0.0, 10, RngStream(0),
                      window=2000)


def test_abc_acceptance_decreases_with_threshold():
    cfg = E.load_preset("enzyme", {"H": 4})
    gen = E.DataGenerator(cfg)
    _, data = gen.dataset(RngStream(1))
    y = E.observed_array(data)
    rates = [abc_rejection(gen, cfg.ps, y, eps, 15, RngStream(2)).acceptance_rate
             for eps in (150.0, 138.0, 125.0)]
    assert rates[0] > rates[1] > rates[2]


def test_abc_smc_infinite_single_level():
    out = abc_smc(_toy_simulator, _box(1), np.array([5.0]), [math.inf], np.eye(1) * 0.1, 500,
                  RngStream(3))
    w = out.info["weights"]
    assert np.allclose(w, 1 / 500) and abs(out.samples.mean() - 5.0) < 0.5


def test_abc_smc_exact_simulator_accepts_everything():
    data = np.array([[1.0, 2.0]])
    out = abc_smc(lambda th, rng: data.copy(), _box(2), data, [10.0, 1.0, 0.1],
                  np.eye(2) * 4.0, 50, RngStream(4))
    pops = out.info["populations"]
    assert len(pops) == 3 and pops[0]["simulations"] == 50
    assert np.all((out.samples > 0) & (out.samples < 10))


def test_abc_smc_concentrates_and_weights_normalized():
    out = abc_smc(_toy_simulator, _box(1), np.array([5.0]), [4.0, 2.0, 1.0], np.eye(1) * 0.5,
                  300, RngStream(5))
    w = out.info["weights"]
    assert np.all(w >= 0) and math.isclose(w.sum(), 1.0)
    assert abs(out.samples.mean() - 5.0) < 0.3 and out.samples.std() < 1.2
    assert all(p["ess"] >= 2 for p in out.info["populations"])


def test_abc_smc_degeneracy():
    # a kernel far narrower than the particle spacing makes the importance
    # weights collapse onto a single particle
    data = np.array([[1.0, 2.0]])
    with pytest.raises(DegeneracyError):
        abc_smc(lambda th, rng: data.copy(), _box(2), data, [10.0, 1.0], np.eye(2) * 1e-4, 50,
                RngStream(4))


def test_abc_smc_rejects_nondecreasing_schedule():
    with pytest.raises(ValueError):
        abc_smc(_toy_simulator, _box(1), np.array([5.0]), [1.0, 2.0], np.eye(1), 10, RngStream(0))


def test_abc_deterministic():
    a = abc_smc(_toy_simulator, _box(1), np.array([5.0]), [4.0, 1.0], np.eye(1) * 0.5, 50,
                RngStream(8)).samples
    b = abc_smc(_toy_simulator, _box(1), np.array([5.0]), [4.0, 1.0], np.eye(1) * 0.5, 50,
                RngStream(8)).samples
    assert np.array_equal(a, b)
