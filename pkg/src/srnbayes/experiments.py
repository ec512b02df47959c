"""Experiment configs, macro-replication runner, metrics and figure data."""

import copy
import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import lna, samplers
from .errors import ConfigError, SrnError
from .model import (
    CombinatorialMassAction, ConservedComplement, Gaussian, Identity, Log, Logit, MassAction,
    MichaelisMenten, Parameter, ParameterSpace, ReactionNetwork, Uniform, sample_prior,
    to_constrained, to_unconstrained,
)
from .numerics import RngStream
from .simulate import (
    ObservationSet, Schedule, euler_maruyama, gillespie, gillespie_at,
    observe,
)

CONFIG_VERSION = 1
CASES = ("enzyme", "lotka", "genenet")
SAMPLERS = ("ula", "one-stage", "two-stage", "mala", "abc-smc", "abc-rejection")


# config parsing -----------------------------------------------------------


def _get(d, key, path, kind=None, default=ConfigError):
    if key not in d:
        if default is ConfigError:
            raise ConfigError(f"{path}.{key}: missing")
        return default
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise ConfigError(f"{path}.{key}: expected {kind}, got {type(v).__name__}")
    return v


def _parse_law(r, path):
    law = _get(r, "law", path, str)
    try:
        if law == "mass_action":
            return MassAction(tuple((int(s), int(m)) for s, m in r["reactants"]), int(r["param"]),
                              float(r.get("prefactor", 1.0)))
        if law == "combinatorial":
            return CombinatorialMassAction(int(r["species"]), int(r["param"]),
                                           int(r.get("order", 2)), float(r.get("prefactor", 0.5)))
        if law == "conserved_complement":
            return ConservedComplement(int(r["species"]), float(r["zeta"]), int(r["param"]))
        if law == "michaelis_menten":
            return MichaelisMenten(int(r["vmax"]), tuple((int(s), int(k)) for s, k in r["factors"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed {law} law ({exc})") from None
    raise ConfigError(f"{path}.law: unknown rate law {law!r}")


def _parse_prior(d, path):
    if "uniform" in d:
        a, b = map(float, d["uniform"])
        if not a < b:
            raise ConfigError(f"{path}.uniform: need low < high")
        return Uniform(a, b)
    if "gaussian" in d:
        m, v = map(float, d["gaussian"])
        if not v > 0:
            raise ConfigError(f"{path}.gaussian: variance must be positive")
        return Gaussian(m, v)
    raise ConfigError(f"{path}: unknown prior")


def _parse_transform(name, prior, path):
    if name == "identity":
        return Identity()
    if name == "log":
        if isinstance(prior, Uniform) and prior.low < 0:
            raise ConfigError(f"{path}: log transform needs positive support")
        return Log()
    if name == "logit":
        if not isinstance(prior, Uniform):
            raise ConfigError(f"{path}: logit transform needs a bounded uniform prior")
        return Logit(prior.low, prior.high)
    raise ConfigError(f"{path}: unknown transform {name!r}")


def _cov(d, n, path):
    if d is None:
        return np.zeros((n, n))
    if "cov" in d:
        c = np.array(d["cov"], dtype=float)
    elif "cov_diag" in d:
        c = np.diag(np.array(d["cov_diag"], dtype=float))
    else:
        return np.zeros((n, n))
    if c.shape != (n, n):
        raise ConfigError(f"{path}: covariance must be {n}x{n}")
    return c


@dataclass
class ExperimentConfig:
    """Parsed experiment; ``raw`` keeps the JSON document."""

    raw: dict
    case: str
    net: ReactionNetwork
    ps: ParameterSpace
    truth_rates: np.ndarray
    truth_params: np.ndarray
    noise_scale: str
    schedule: Schedule
    init_mean: np.ndarray
    init_cov: np.ndarray
    init_round: bool
    init_upper: list
    moments_mean: np.ndarray
    moments_cov: np.ndarray
    likelihood: str
    substeps: int
    sampler: str
    sampler_cfg: samplers.SamplerConfig
    sampler_raw: dict
    replications: int
    seed: int
    intervals: int

    @property
    def abc_schedule(self):
        abc = self.sampler_raw.get("abc", {})
        sch = abc.get("schedules", {})
        if str(self.intervals) in sch:
            return [float(e) for e in sch[str(self.intervals)]]
        if "schedule" in abc:
            return [float(e) for e in abc["schedule"]]
        raise ConfigError(f"sampler.abc: no schedule for {self.intervals} intervals")

    @property
    def abc_kernel_cov(self):
        abc = self.sampler_raw.get("abc", {})
        if "kernel_sd" in abc:
            sd = np.array(abc["kernel_sd"], dtype=float)
        else:
            frac = float(abc.get("kernel_fraction", 0.05))
            sd = np.array([frac * (p.prior.high - p.prior.low) if isinstance(p.prior, Uniform)
                           else frac * math.sqrt(p.prior.var) for p in self.ps])
        if sd.shape != (self.ps.dim,):
            raise ConfigError("sampler.abc.kernel_sd: one entry per parameter required")
        return np.diag(sd ** 2)


def parse_config(doc, overrides=None):
    """Validate a config document and apply ``overrides``.

    Recognised overrides: ``seed``, ``reps``, ``sampler``, ``H``, ``c``.
    """
    doc = copy.deepcopy(doc)
    overrides = overrides or {}
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    version = _get(doc, "version", "config")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config.version: unsupported version {version!r}")
    net_d = _get(doc, "network", "config", dict)
    try:
        C = np.array(_get(net_d, "stoichiometry", "network", list), dtype=float)
    except ValueError:
        raise ConfigError("network.stoichiometry: not a numeric matrix") from None
    reactions = _get(net_d, "reactions", "network", list)
    laws = [_parse_law(r, f"network.reactions[{k}]") for k, r in enumerate(reactions)]
    try:
        net = ReactionNetwork(C, laws, float(net_d.get("omega", 1.0)), net_d.get("species"))
    except ConfigError as exc:
        raise ConfigError(f"network: {exc}") from None
    truth = np.array(_get(_get(doc, "truth", "config", dict), "rates", "truth", list), dtype=float)
    if truth.shape[0] < net.num_params:
        raise ConfigError(f"truth.rates: need {net.num_params} values")
    noise_scale = doc.get("noise_scale", "std")
    if noise_scale not in ("std", "variance"):
        raise ConfigError("config.noise_scale: must be 'std' or 'variance'")

    obs = _get(doc, "observation", "config", dict)
    intervals = int(overrides.get("H") or _get(obs, "intervals", "observation", int))
    if intervals < 1:
        raise ConfigError("observation.intervals: must be >= 1")
    t0 = float(obs.get("t0", 0.0))
    if "dt" in obs:
        t_end = t0 + intervals * float(obs["dt"])
    else:
        t_end = float(_get(obs, "t_end", "observation"))
    observed = np.array(_get(obs, "observed", "observation", list), dtype=np.int64)
    if np.any(observed < 0) or np.any(observed >= net.num_species):
        raise ConfigError("observation.observed: species index out of range")
    noise = np.broadcast_to(np.array(obs.get("noise", [0.0]), dtype=float), observed.shape)
    if np.any(noise < 0):
        raise ConfigError("observation.noise: must be nonnegative")
    sigma = np.sqrt(noise) if noise_scale == "variance" else noise.copy()
    schedule = Schedule(np.linspace(t0, t_end, intervals + 1), observed, sigma)

    params = []
    truth_params = []
    for k, p in enumerate(_get(doc, "parameters", "config", list)):
        path = f"parameters[{k}]"
        prior = _parse_prior(_get(p, "prior", path, dict), path + ".prior")
        tr = _parse_transform(p.get("transform", "identity"), prior, path + ".transform")
        target = _get(p, "target", path, str)
        idx = int(_get(p, "index", path))
        if target == "rate":
            if not 0 <= idx < truth.shape[0]:
                raise ConfigError(f"{path}.index: rate index out of range")
            truth_params.append(truth[idx])
        elif target == "noise":
            if idx not in observed:
                raise ConfigError(f"{path}.index: noise target must be an observed species")
            truth_params.append(float(noise[list(observed).index(idx)]))
        else:
            raise ConfigError(f"{path}.target: must be 'rate' or 'noise'")
        params.append(Parameter(str(p.get("name", f"p{k}")), target, idx, tr, prior))
    ps = ParameterSpace(params)

    n_s = net.num_species
    init_d = _get(doc, "initial_state", "config", dict)
    init_mean = np.array(_get(init_d, "mean", "initial_state", list), dtype=float)
    if init_mean.shape != (n_s,):
        raise ConfigError(f"initial_state.mean: need {n_s} values")
    init_cov = _cov(init_d, n_s, "initial_state")
    mom_d = doc.get("initial_moments", {"mean": init_mean.tolist()})
    moments_mean = np.array(mom_d.get("mean", init_mean), dtype=float)
    moments_cov = _cov(mom_d, n_s, "initial_moments") * net.omega

    lik = doc.get("likelihood", {})
    likelihood = lik.get("kind", "lna")
    if likelihood not in ("lna", "em"):
        raise ConfigError("likelihood.kind: must be 'lna' or 'em'")

    s_d = dict(_get(doc, "sampler", "config", dict))
    kind = overrides.get("sampler") or s_d.get("kind", "two-stage")
    if kind not in SAMPLERS:
        raise ConfigError(f"sampler.kind: unknown sampler {kind!r}")
    if overrides.get("c") is not None:
        s_d["c"] = float(overrides["c"])
    fields = {k: s_d[k] for k in ("c", "eps1", "eps2", "max_iter", "max_iter1", "max_iter2",
                                  "burn_in", "thin", "n_samples", "dtau", "psi0_scale")
              if k in s_d}
    try:
        cfg = samplers.SamplerConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sampler: {exc}") from None
    reps = int(overrides.get("reps") or doc.get("replications", 20))
    if reps < 1:
        raise ConfigError("replications: must be >= 1")
    seed = int(overrides["seed"]) if overrides.get("seed") is not None else int(doc.get("seed", 0))
    # the stored document fully describes the run, overrides included
    doc["replications"] = reps
    doc["seed"] = seed
    doc["observation"]["intervals"] = intervals
    doc["sampler"] = dict(s_d, kind=kind)
    return ExperimentConfig(
        raw=doc, case=str(doc.get("case", "custom")), net=net, ps=ps, truth_rates=truth,
        truth_params=np.array(truth_params), noise_scale=noise_scale, schedule=schedule,
        init_mean=init_mean, init_cov=init_cov, init_round=bool(init_d.get("round", False)),
        init_upper=list(init_d.get("upper", [None] * n_s)),
        moments_mean=moments_mean, moments_cov=moments_cov, likelihood=likelihood,
        substeps=int(lik.get("substeps", 50)), sampler=kind, sampler_cfg=cfg, sampler_raw=s_d,
        replications=reps, seed=seed, intervals=intervals,
    )


def load_config(path, overrides=None):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    return parse_config(doc, overrides)


def preset_document(case):
    if case not in CASES:
        raise ConfigError(f"unknown case {case!r}; choose from {', '.join(CASES)}")
    text = resources.files("srnbayes").joinpath("presets", f"{case}.json").read_text()
    return json.loads(text)


def load_preset(case, overrides=None):
    return parse_config(preset_document(case), overrides)


# data generation ----------------------------------------------------------


class DataGenerator:
    """Draws an initial state, runs Gillespie and applies the observation model.

    Used both for the synthetic truth data and as the ABC simulator, so both
    go through the same process.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self._L = np.linalg.cholesky(cfg.init_cov + 0.0) if np.any(cfg.init_cov) else None

    def initial_state(self, rng):
        cfg = self.cfg
        s0 = cfg.init_mean.copy()
        if self._L is not None:
            s0 = s0 + self._L @ rng.standard_normal(len(s0))
        if cfg.init_round or self._L is not None:
            s0 = np.maximum(np.round(s0 * cfg.net.omega), 0.0) / cfg.net.omega
        for j, u in enumerate(cfg.init_upper):
            if u is not None:
                s0[j] = min(s0[j], float(u))
        return s0

    def split(self, theta_c):
        """Rate vector and per-observed-species noise std for constrained params."""
        cfg = self.cfg
        rates = cfg.truth_rates.copy()
        sigma = cfg.schedule.sigma.copy()
        obs = list(cfg.schedule.observed)
        for k, p in enumerate(cfg.ps):
            if p.target == "rate":
                rates[p.index] = theta_c[k]
            else:
                v = theta_c[k]
                sigma[obs.index(p.index)] = math.sqrt(v) if cfg.noise_scale == "variance" else v
        return rates, sigma

    def trajectory(self, rates, rng):
        s0 = self.initial_state(rng)
        return gillespie(self.cfg.net, rates, s0, self.cfg.schedule.times[-1], rng)

    def dataset(self, rng):
        """Truth trajectory and its observations."""
        tr = self.trajectory(self.cfg.truth_rates, rng)
        obs = observe(tr, self.cfg.schedule, rng)
        return tr, ObservationSet([obs], self.cfg.schedule)

    def __call__(self, theta_c, rng):
        """Simulated observation array (NaN where unobserved), or None."""
        rates, sigma = self.split(theta_c)
        s0 = self.initial_state(rng)
        sched = self.cfg.schedule
        states = gillespie_at(self.cfg.net, rates, s0, sched.times, rng, max_events=10_000_000)
        if states is None:
            return None
        out = np.full(states.shape, np.nan)
        noise = rng.standard_normal((len(sched.times), len(sched.observed)))
        out[:, sched.observed] = states[:, sched.observed] + sigma * noise
        return out


def make_logpost(cfg, data):
    return lna.LogPosterior(
        cfg.net, cfg.ps, data, (cfg.moments_mean, cfg.moments_cov), cfg.truth_rates,
        substeps=cfg.substeps, noise_scale=cfg.noise_scale,
        likelihood="em" if cfg.likelihood == "em" else "lna")


def observed_array(data):
    return np.stack([tr.values for tr in data.trajectories])[0]


# one replication ----------------------------------------------------------


@dataclass
class ReplicationResult:
    replicate_id: int
    samples: np.ndarray  # constrained (B, dim) or empty
    solved: bool
    message: str
    wall_clock: float
    gaussian: dict = None
    n_iter1: int = None
    n_iter2: int = None
    lambda_max: float = None
    acceptance: float = None
    hess_evals: int = None
    grad_evals: int = None


def _prior_start(cfg, rng):
    return to_unconstrained(cfg.ps, sample_prior(cfg.ps, rng))


def ula_budget_steps(dim, n_evals):
    """ULA steps affordable with ``n_evals`` log-posterior evaluations."""
    return max(1, n_evals // (2 * dim))


def run_replication(cfg, r, data=None, logpost_factory=None):
    """Generate data for replication ``r`` (unless given) and run the sampler.

    ``logpost_factory(cfg, data)`` replaces the default target for
    likelihood-based samplers.
    """
    factory = logpost_factory or make_logpost
    stream = RngStream(cfg.seed, r)
    data_rng = stream.spawn(0)
    run_rng = stream.spawn(1)
    gen = DataGenerator(cfg)
    if data is None:
        _, data = gen.dataset(data_rng)
    scfg = cfg.sampler_cfg
    kind = cfg.sampler
    t_start = time.perf_counter()
    res = ReplicationResult(r, np.empty((0, cfg.ps.dim)), False, "", 0.0)
    try:
        if kind in ("abc-smc", "abc-rejection"):
            y = observed_array(data)
            if kind == "abc-smc":
                out = samplers.abc_smc(gen, cfg.ps, y, cfg.abc_schedule, cfg.abc_kernel_cov,
                                       scfg.n_samples, run_rng)
            else:
                out = samplers.abc_rejection(gen, cfg.ps, y, cfg.abc_schedule[-1],
                                             scfg.n_samples, run_rng)
            res.samples = out.samples
            res.solved = True
            res.acceptance = out.acceptance_rate
        else:
            logpost = factory(cfg, data)
            theta0 = _prior_start(cfg, run_rng)
            if kind == "ula":
                ucfg = scfg
                if cfg.sampler_raw.get("ula_budget") == "two-stage":
                    ref_post = factory(cfg, data)
                    samplers.raptor_two_stage(ref_post, scfg, theta0)
                    steps = ula_budget_steps(cfg.ps.dim, ref_post.n_evals)
                    burn = max(0, steps - (scfg.n_samples - 1) * scfg.thin - 1)
                    ucfg = samplers.SamplerConfig(**{**scfg.__dict__, "burn_in": burn})
                out = samplers.ula(logpost, ucfg, run_rng, theta0)
                res.solved = not out.failed
                res.message = f"non-finite gradient at step {out.fail_step}" if out.failed else ""
                if res.solved:
                    res.samples = np.array([to_constrained(cfg.ps, p) for p in out.samples])
                res.grad_evals = out.grad_evals
            else:
                if kind == "one-stage":
                    gp = samplers.raptor_one_stage(logpost, scfg, theta0)
                else:
                    gp = samplers.raptor_two_stage(logpost, scfg, theta0)
                res.gaussian = gp.to_dict()
                res.n_iter1, res.n_iter2 = gp.n_iter1, gp.n_iter2
                res.lambda_max = gp.lambda_max
                res.hess_evals, res.grad_evals = gp.hess_evals, gp.grad_evals
                res.solved = gp.converged
                res.message = gp.message
                if not gp.failed:
                    if kind == "mala":
                        out = samplers.mala(logpost, gp, scfg, run_rng)
                        res.samples = np.array([to_constrained(cfg.ps, p) for p in out.samples])
                        res.acceptance = out.acceptance_rate
                    else:
                        res.samples = samplers.sample_gaussian_posterior(
                            gp, cfg.ps, scfg.n_samples, run_rng)
    except SrnError as exc:
        res.solved = False
        res.message = f"{type(exc).__name__}: {exc}"
    res.wall_clock = time.perf_counter() - t_start
    return res


# metrics ------------------------------------------------------------------


def rmse(samples, truth):
    samples = np.atleast_2d(samples)
    return np.sqrt(np.mean((samples - np.asarray(truth)[None, :]) ** 2, axis=0))


def _mean_ci(x):
    x = np.asarray([v for v in x if v is not None and math.isfinite(v)], dtype=float)
    if len(x) == 0:
        return None, None
    m = float(np.mean(x))
    half = float(1.96 * np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return m, half


def metrics_report(cfg, results):
    """Aggregate replication results (deterministic content only)."""
    solved = [r for r in results if r.solved and len(r.samples)]
    per = {}
    for k, name in enumerate(cfg.ps.names):
        vals = [float(rmse(r.samples, cfg.truth_params)[k]) for r in solved]
        m, h = _mean_ci(vals)
        per[name] = {"rmse_mean": m, "rmse_ci95": h}
    lam_m, lam_h = _mean_ci([r.lambda_max for r in solved])
    n1_m, n1_h = _mean_ci([r.n_iter1 for r in solved])
    n2_m, n2_h = _mean_ci([r.n_iter2 for r in solved])
    acc_m, _ = _mean_ci([r.acceptance for r in solved])
    return {
        "case": cfg.case,
        "sampler": cfg.sampler,
        "intervals": cfg.intervals,
        "replications": len(results),
        "seed": cfg.seed,
        "solved": len(solved),
        "failed": len(results) - len(solved),
        "rmse": per,
        "lambda_max_mean": lam_m,
        "lambda_max_ci95": lam_h,
        "N1_mean": n1_m,
        "N1_ci95": n1_h,
        "N2_mean": n2_m,
        "N2_ci95": n2_h,
        "acceptance_mean": acc_m,
    }


def timing_report(results):
    m, h = _mean_ci([r.wall_clock for r in results])
    return {"wall_clock_mean": m, "wall_clock_ci95": h,
            "per_replication": [r.wall_clock for r in results]}


# running ------------------------------------------------------------------


def _worker(args):
    doc, r = args
    cfg = parse_config(doc)
    return run_replication(cfg, r)


def run_replications(cfg, workers=1, logpost_factory=None, data=None):
    reps = range(cfg.replications)
    if workers <= 1 or logpost_factory is not None or data is not None:
        return [run_replication(cfg, r, data, logpost_factory) for r in reps]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        out = list(ex.map(_worker, [(cfg.raw, r) for r in reps]))
    return sorted(out, key=lambda r: r.replicate_id)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_samples_csv(path, cfg, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate_id", "sample_id", "param", "value"])
        for r in results:
            for b, row in enumerate(r.samples):
                for name, v in zip(cfg.ps.names, row):
                    w.writerow([r.replicate_id, b, name, repr(float(v))])


def write_replications_csv(path, cfg, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate_id", "solved", "N1", "N2", "lambda_max"]
                   + [f"rmse_{n}" for n in cfg.ps.names] + ["message"])
        for r in results:
            rm = (rmse(r.samples, cfg.truth_params) if len(r.samples)
                  else [float("nan")] * cfg.ps.dim)
            w.writerow([r.replicate_id, int(r.solved), r.n_iter1 if r.n_iter1 is not None else "",
                        r.n_iter2 if r.n_iter2 is not None else "",
                        repr(float(r.lambda_max)) if r.lambda_max is not None else ""]
                       + [repr(float(v)) for v in rm] + [r.message])


def run_experiment(cfg, out_dir=None, workers=1, logpost_factory=None, data=None):
    """Run all replications; write artifacts to ``out_dir`` if given.

    With ``data`` every replication reuses that observation set instead of
    generating its own.

    Returns ``(report, results)``. Wall-clock figures go to ``timing.json``,
    separate from the deterministic ``report.json``.
    """
    results = run_replications(cfg, workers, logpost_factory, data)
    report = metrics_report(cfg, results)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "report.json"), report)
        write_json(os.path.join(out_dir, "timing.json"), timing_report(results))
        write_samples_csv(os.path.join(out_dir, "samples.csv"), cfg, results)
        write_replications_csv(os.path.join(out_dir, "replications.csv"), cfg, results)
        gps = [dict(r.gaussian, replicate_id=r.replicate_id) for r in results if r.gaussian]
        if gps:
            write_json(os.path.join(out_dir, "gaussian_posteriors.json"), gps)
        write_json(os.path.join(out_dir, "config.json"), cfg.raw)
    return report, results


def reproduce(case, overrides=None, out_dir=None, workers=1):
    """Run a preset; presets with a sweep run every swept data size unless ``H`` is set."""
    overrides = dict(overrides or {})
    doc = preset_document(case)
    sweep = doc.get("sweep", {}).get("intervals")
    if overrides.get("H") or not sweep:
        cfg = parse_config(doc, overrides)
        report, _ = run_experiment(cfg, out_dir, workers)
        return [report]
    reports = []
    for H in sweep:
        cfg = parse_config(doc, {**overrides, "H": H})
        sub = None if out_dir is None else os.path.join(out_dir, f"H{H}")
        report, _ = run_experiment(cfg, sub, workers)
        reports.append(report)
    if out_dir is not None:
        write_json(os.path.join(out_dir, "summary.json"), reports)
    return reports


# figure data --------------------------------------------------------------


def diffusion_compare(cfg, t_end=30.0, dts=(2.0, 1.0, 0.5, 0.1), n_paths=100, seed=None):
    """Gillespie path versus the mean of Euler-Maruyama paths for several steps.

    Returns ``(rows, deviation)``: long-format rows
    ``(dt, time, source, species, value)`` and the mean absolute deviation of
    the first species per step size.
    """
    seed = cfg.seed if seed is None else seed
    stream = RngStream(seed, 0)
    gen = DataGenerator(cfg)
    s0 = gen.initial_state(stream.spawn(0))
    jump = gillespie(cfg.net, cfg.truth_rates, s0, t_end, stream.spawn(1))
    rows = []
    deviation = {}
    for i, dt in enumerate(dts):
        n = int(round(t_end / dt))
        grid = np.linspace(0.0, n * dt, n + 1)
        em_rng = stream.spawn(100 + i)
        paths = np.empty((n_paths, n + 1, cfg.net.num_species))
        for p in range(n_paths):
            paths[p] = euler_maruyama(cfg.net, cfg.truth_rates, s0, grid, em_rng).states
        mean = paths.mean(axis=0)
        exact = jump.at(grid)
        deviation[dt] = float(np.mean(np.abs(mean[:, 0] - exact[:, 0])))
        for h, t in enumerate(grid):
            for j in range(cfg.net.num_species):
                rows.append((dt, float(t), "gillespie", j, float(exact[h, j])))
                rows.append((dt, float(t), "em_mean", j, float(mean[h, j])))
    return rows, deviation


def trajectory_bands(cfg, n_draws=1000, grid_points=161, replicate=0):
    """Filtered trajectory bands for one replication after a two-stage fit."""
    stream = RngStream(cfg.seed, replicate)
    gen = DataGenerator(cfg)
    truth, data = gen.dataset(stream.spawn(0))
    run_rng = stream.spawn(1)
    logpost = make_logpost(cfg, data)
    gp = samplers.raptor_two_stage(logpost, cfg.sampler_cfg, _prior_start(cfg, run_rng))
    theta = samplers.sample_gaussian_posterior(gp, cfg.ps, cfg.sampler_cfg.n_samples, run_rng)
    times = cfg.schedule.times
    grid = np.unique(np.concatenate([np.linspace(times[0], times[-1], grid_points), times]))
    bands = lna.infer_trajectory(logpost, theta, grid, n_draws, stream.spawn(2))
    return bands, truth


def violin_samples(cfg_by_key, workers=1):
    """Log-scale posterior samples per (sampler, intervals)."""
    rows = []
    for (kind, H), cfg in cfg_by_key:
        results = run_replications(cfg, workers)
        for r in results:
            for b, row in enumerate(r.samples):
                for name, v in zip(cfg.ps.names, row):
                    rows.append((kind, H, r.replicate_id, b, name,
                                 float(np.log(v)) if v > 0 else float("-inf")))
    return rows


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
