import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srnbayes import experiments as E
from srnbayes.lna import (
    LnaMoments, LogPosterior, bayes_update, infer_trajectory, lna_propagate, log_likelihood,
    log_posterior, run_filter,
)
from srnbayes.model import (
    Logit, MassAction, Parameter, ParameterSpace, ReactionNetwork, Uniform,
    log_prior_unconstrained, to_unconstrained,
)
from srnbayes.numerics import RngStream, mvn_logpdf
from srnbayes.samplers import raptor_two_stage
from srnbayes.simulate import ObservationSet, ObservedTrajectory, gillespie, observe, regular_schedule

from networks import (
    ENZ_S0, ENZ_THETA, LV_THETA, enzyme, id_space, immigration_death, lotka, random_linear_case,
)
from oracles import kalman_immigration_death


def test_linear_network_matches_kalman_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        (th1, th2, omega, m0, g0, sig, times, ys), tr = random_linear_case(rng)
        net = immigration_death(omega)
        ll_o, post = kalman_immigration_death(th1, th2, m0, g0, times, ys, sig, omega)
        lp = LogPosterior(net, id_space(), ObservationSet([tr]), ([m0], [[g0]]), [th1, th2])
        assert abs(lp.loglik_constrained([th1, th2]) - ll_o) < 1e-6
        ups, _, diag = run_filter(net, [th1, th2], tr, ([m0], [[g0]]))
        assert abs(sum(diag.loglik_terms) - ll_o) < 1e-6
        for u, (m, p) in zip(ups, post):
            assert abs(u.mean[0] - m) < 1e-6 and abs(u.cov[0, 0] - p) < 1e-6


def test_propagate_same_time_unchanged():
    m = LnaMoments(2.0, np.array([1.0, 2.0, 3.0, 4.0]), np.eye(4))
    out = lna_propagate(enzyme(), ENZ_THETA, m, 2.0)
    assert np.array_equal(out.mean, m.mean) and np.array_equal(out.cov, m.cov)


def test_propagate_zero_rates_constant():
    m = LnaMoments(0.0, ENZ_S0.copy(), np.eye(4))
    out = lna_propagate(enzyme(), [0, 0, 0], m, 10.0)
    assert np.array_equal(out.mean, ENZ_S0) and np.array_equal(out.cov, np.eye(4))


def test_scalar_decay_lyapunov():
    net = ReactionNetwork([[-1]], [MassAction(((0, 1),), 0)])
    th, m0, p0, t = 0.4, 30.0, 2.0, 3.0
    out = lna_propagate(net, [th], LnaMoments(0.0, np.array([m0]), np.array([[p0]])), t)
    # dP = -2 th P + th m(t), m(t) = m0 e^{-th t}
    exact = p0 * math.exp(-2 * th * t) + m0 * (math.exp(-th * t) - math.exp(-2 * th * t))
    assert abs(out.cov[0, 0] - exact) < 1e-6


def test_propagated_covariance_symmetric():
    m = LnaMoments(0.0, ENZ_S0.copy(), np.eye(4))
    out = lna_propagate(enzyme(), ENZ_THETA, m, 40.0)
    assert np.max(np.abs(out.cov - out.cov.T)) <= 1e-10


def test_update_scalar_hand_case():
    m, ll = bayes_update(LnaMoments(0, np.array([1.0]), np.array([[2.0]])), [3.0], [[1.0]],
                         [[1.0]], 1.0)
    assert math.isclose(m.mean[0], 7 / 3) and math.isclose(m.cov[0, 0], 2 / 3)
    assert math.isclose(ll, mvn_logpdf(np.array([3.0]), np.array([1.0]), np.array([[3.0]])))


def test_update_exact_full_observation():
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    m, _ = bayes_update(LnaMoments(0, np.array([1.0, 1.0]), cov), [4.0, -2.0], np.eye(2),
                        np.zeros((2, 2)), 1.0)
    assert np.allclose(m.mean, [4.0, -2.0]) and np.allclose(m.cov, 0, atol=1e-12)


def test_update_uninformative_noise():
    cov = np.array([[2.0, 0.5, 0.1], [0.5, 1.0, 0.2], [0.1, 0.2, 3.0]])
    mean = np.array([1.0, 2.0, 3.0])
    m, _ = bayes_update(LnaMoments(0, mean, cov), [10.0], [[0, 1, 0]], [[1e12]], 1.0)
    assert np.allclose(m.mean, mean, rtol=1e-6) and np.allclose(m.cov, cov, rtol=1e-6)


@st.composite
def update_cases(draw):
    n = draw(st.integers(1, 4))
    k = draw(st.integers(1, n))
    vals = draw(st.lists(st.floats(-3, 3), min_size=n * n, max_size=n * n))
    B = np.array(vals).reshape(n, n)
    cov = B @ B.T + 0.1 * np.eye(n)
    G = np.eye(n)[draw(st.permutations(range(n)))[:k]]
    sig = np.diag(draw(st.lists(st.floats(0.01, 5), min_size=k, max_size=k)))
    y = np.array(draw(st.lists(st.floats(-10, 10), min_size=k, max_size=k)))
    omega = draw(st.sampled_from([1.0, 7.0]))
    return cov, G, sig, y, omega


@settings(max_examples=80, deadline=None)
@given(update_cases())
def test_update_never_increases_covariance(case):
    cov, G, sig, y, omega = case
    m, _ = bayes_update(LnaMoments(0, np.zeros(len(cov)), cov), y, G, sig, omega)
    w = np.linalg.eigvalsh(cov - m.cov)
    assert w.min() >= -1e-9 * max(1.0, np.abs(cov).max())


def _enzyme_data(seed, H=16, n_traj=1):
    sched = regular_schedule(0, 80, H, [3], 4.0)
    rng = RngStream(seed)
    obs = [observe(gillespie(enzyme(), ENZ_THETA, ENZ_S0, 80.0, rng), sched, rng)
           for _ in range(n_traj)]
    return ObservationSet(obs, sched)


def _enzyme_space():
    return ParameterSpace([Parameter("theta3", "rate", 2, Logit(0, 1), Uniform(0, 1))])


def test_single_observation_likelihood():
    sched = regular_schedule(0, 0, 0, [1, 3], [2.0, 3.0])
    tr = observe(gillespie(enzyme(), ENZ_THETA, ENZ_S0, 0.0, RngStream(0)), sched, RngStream(1))
    cov0 = np.diag([1.0, 2.0, 3.0, 4.0])
    lp = LogPosterior(enzyme(), _enzyme_space(), ObservationSet([tr]), (ENZ_S0, cov0), ENZ_THETA)
    G = tr.selection(0)
    expect = mvn_logpdf(tr.y(0), G @ ENZ_S0, G @ cov0 @ G.T + tr.noise_cov(0))
    assert math.isclose(lp.loglik_constrained([0.01]), expect, rel_tol=1e-12)


def test_trajectory_order_invariance():
    data = _enzyme_data(3, n_traj=3)
    rev = ObservationSet(list(reversed(data.trajectories)), data.schedule)
    a = LogPosterior(enzyme(), _enzyme_space(), data, (ENZ_S0, np.eye(4)), ENZ_THETA)
    b = LogPosterior(enzyme(), _enzyme_space(), rev, (ENZ_S0, np.eye(4)), ENZ_THETA)
    assert math.isclose(a.loglik_constrained([0.01]), b.loglik_constrained([0.01]),
                        rel_tol=1e-12)


def test_species_relabeling_invariance():
    data = _enzyme_data(4)
    perm = np.array([2, 0, 3, 1])  # new species i is old species perm[i]
    inv = np.argsort(perm)
    C = enzyme().stoichiometry[perm]
    laws = [MassAction(((int(inv[0]), 1), (int(inv[1]), 1)), 0),
            MassAction(((int(inv[2]), 1),), 1), MassAction(((int(inv[2]), 1),), 2)]
    net_p = ReactionNetwork(C, laws)
    trs = [ObservedTrajectory(t.times, t.mask[:, perm], t.values[:, perm], t.sigma[:, perm])
           for t in data]
    a = LogPosterior(enzyme(), _enzyme_space(), data, (ENZ_S0, np.eye(4)), ENZ_THETA)
    b = LogPosterior(net_p, _enzyme_space(), ObservationSet(trs), (ENZ_S0[perm], np.eye(4)),
                     ENZ_THETA)
    assert math.isclose(a.loglik_constrained([0.01]), b.loglik_constrained([0.01]),
                        rel_tol=1e-10)


def test_posterior_is_likelihood_plus_jacobian():
    data = _enzyme_data(5)
    ps = _enzyme_space()
    init = (ENZ_S0, np.eye(4))
    for phi in ([-4.0], [-5.0], [0.3]):
        lp = log_posterior(enzyme(), ps, phi, data, init, ENZ_THETA)
        ll = log_likelihood(enzyme(), ps, phi, data, init, ENZ_THETA)
        assert math.isclose(lp - ll, ps.params[0].transform.log_jacobian(phi[0]), abs_tol=1e-9)


def test_no_data_gives_prior():
    ps = _enzyme_space()
    lp = LogPosterior(enzyme(), ps, ObservationSet([]), (ENZ_S0, np.eye(4)), ENZ_THETA)
    for phi in ([-3.0], [2.0]):
        assert math.isclose(lp(phi), log_prior_unconstrained(ps, phi))


def test_failure_sentinel_is_minus_inf():
    ps = _enzyme_space()
    lp = LogPosterior(enzyme(), ps, _enzyme_data(6), (ENZ_S0, np.eye(4)), ENZ_THETA)
    assert lp([math.nan]) == -math.inf
    assert np.all(np.isnan(lp.grad([math.nan])))


def test_likelihood_higher_at_truth_than_inflated_rates():
    net = enzyme()
    wins = 0
    for seed in range(100):
        data = _enzyme_data(1000 + seed)
        lp = LogPosterior(net, _enzyme_space(), data, (ENZ_S0, np.eye(4)), ENZ_THETA)
        base = lp.loglik_constrained([ENZ_THETA[2]])
        lp10 = LogPosterior(net, _enzyme_space(), data, (ENZ_S0, np.eye(4)), 10 * ENZ_THETA)
        wins += base > lp10.loglik_constrained([10 * ENZ_THETA[2]])
    assert wins >= 95


@pytest.fixture(scope="module")
def enzyme_fit():
    cfg = E.load_preset("enzyme", {"H": 16})
    _, data = E.DataGenerator(cfg).dataset(RngStream(cfg.seed, 0).spawn(0))
    lp = E.make_logpost(cfg, data)
    gp = raptor_two_stage(lp, cfg.sampler_cfg, to_unconstrained(cfg.ps, [0.02, 10.0]))
    return cfg, data, lp, gp


def test_gradient_vanishes_at_mode(enzyme_fit):
    _, _, lp, gp = enzyme_fit
    assert gp.converged_mode
    assert np.linalg.norm(lp.grad(gp.mode)) < 1e-3


def test_hessian_negative_definite_at_mode(enzyme_fit):
    _, _, lp, gp = enzyme_fit
    assert np.all(np.linalg.eigvalsh(lp.hess(gp.mode)) < 0)


def test_grad_matches_five_point_stencil(enzyme_fit):
    _, _, lp, gp = enzyme_fit
    phi = gp.mode + np.array([0.3, -0.2])
    g = lp.grad(phi)
    five = np.empty(2)
    for k in range(2):
        h = 1e-3 * max(1.0, abs(phi[k]))
        e = np.zeros(2)
        e[k] = h
        five[k] = (-lp(phi + 2 * e) + 8 * lp(phi + e) - 8 * lp(phi - e) + lp(phi - 2 * e)) / (12 * h)
    assert np.all(np.abs(g - five) <= 1e-4 * np.maximum(np.abs(five), 1e-12) + 1e-7)


def test_bands_collapse_on_exact_full_observations():
    # a network without conservation laws keeps the innovation covariance regular
    net = lotka()
    sched = regular_schedule(0, 4, 8, [0, 1], 0.0)
    tr = observe(gillespie(net, LV_THETA, [71, 79], 4.0, RngStream(0)), sched, RngStream(1))
    ps = ParameterSpace([Parameter("theta1", "rate", 0, Logit(0, 5), Uniform(0, 5))])
    lp = LogPosterior(net, ps, ObservationSet([tr]), ([71, 79], np.eye(2)), LV_THETA)
    bands = infer_trajectory(lp, [[0.5]], sched.times, 50, RngStream(2))
    assert np.all(bands.hi95 - bands.lo95 < 1e-6)
    assert np.allclose(bands.mean, tr.values, atol=1e-6)


def test_single_draw_band_is_deterministic():
    data = _enzyme_data(7)
    lp = LogPosterior(enzyme(), _enzyme_space(), data, (ENZ_S0, np.eye(4)), ENZ_THETA)
    grid = np.linspace(0, 80, 33)
    a = infer_trajectory(lp, [[0.01]], grid, 1, RngStream(3))
    b = infer_trajectory(lp, [[0.01]], grid, 1, RngStream(3))
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.lo95, a.mean) and np.array_equal(a.hi95, a.mean)


def test_bands_cover_hidden_species():
    cfg = E.load_preset("enzyme", {"H": 16})
    bands, truth = E.trajectory_bands(cfg, n_draws=500)
    s = truth.at(bands.times)
    inside = (s >= bands.lo95 - 1e-9) & (s <= bands.hi95 + 1e-9)
    assert inside.mean() >= 0.8
