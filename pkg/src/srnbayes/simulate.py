"""Gillespie and Euler-Maruyama simulation plus the Gaussian observation process."""

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import IntegrationDiverged
from .model import _clamped_state, _theta

MAX_EVENTS = 50_000_000


@dataclass
class JumpTrajectory:
    """Piecewise-constant path; ``states[i]`` holds from ``times[i]`` on.

    States are concentrations (counts / omega).
    """

    times: np.ndarray
    states: np.ndarray
    t_end: float
    truncated: bool = False

    def at(self, t):
        """State at the last event not after ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < self.times[0]) or np.any(t > self.t_end):
            raise ValueError("time outside trajectory span")
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.states[idx]

    @property
    def num_events(self):
        return len(self.times) - 1


@dataclass
class DiffusionPath:
    """Euler-Maruyama states on a time grid."""

    times: np.ndarray
    states: np.ndarray
    clamp_count: int = 0

    def at(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.abs(self.times[None, :] - t[:, None]).argmin(axis=1)
        tol = 1e-9 * max(1.0, abs(self.times[-1]))
        if np.any(np.abs(self.times[idx] - t) > tol):
            raise ValueError("time not on the simulation grid")
        return self.states[idx]


@dataclass
class Schedule:
    """Observation times, observed species and per-species noise std."""

    times: np.ndarray
    observed: np.ndarray  # species indices
    sigma: np.ndarray  # noise std per observed species

    def to_dict(self):
        return {
            "times": [float(t) for t in self.times],
            "observed": [int(j) for j in self.observed],
            "sigma": [float(s) for s in self.sigma],
        }


def regular_schedule(t0, t1, n_intervals, observed, sigma):
    times = np.linspace(t0, t1, int(n_intervals) + 1)
    observed = np.atleast_1d(np.asarray(observed, dtype=np.int64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), observed.shape).copy()
    return Schedule(times, observed, sigma)


@dataclass
class ObservedTrajectory:
    """One trajectory's observations as dense arrays.

    ``mask[h, j]`` marks species ``j`` observed at ``times[h]``; ``values``
    holds NaN where unobserved and ``sigma`` the noise std (0 if unobserved).
    """

    times: np.ndarray
    mask: np.ndarray
    values: np.ndarray
    sigma: np.ndarray

    def observed_index(self, h):
        return np.flatnonzero(self.mask[h])

    def selection(self, h):
        """0/1 selection matrix for observation ``h``."""
        idx = self.observed_index(h)
        G = np.zeros((len(idx), self.mask.shape[1]))
        G[np.arange(len(idx)), idx] = 1.0
        return G

    def y(self, h):
        return self.values[h, self.mask[h]]

    def noise_cov(self, h):
        return np.diag(self.sigma[h, self.mask[h]] ** 2)


@dataclass
class ObservationSet:
    trajectories: list
    schedule: Schedule = None

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


def gillespie(net, theta, s0, t_end, rng, max_events=MAX_EVENTS):
    """Exact stochastic simulation (direct method) from time 0 to ``t_end``."""
    theta = _theta(net, theta)
    x0 = np.asarray(s0, dtype=float) * net.omega
    if np.any(np.abs(x0 - np.round(x0)) > 1e-9) or np.any(x0 < 0):
        raise ValueError("s0 * omega must be nonnegative integers")
    x0 = np.round(x0)
    times, states, _, truncated = K.gillespie_path(
        *net.packed, theta, x0, float(t_end), rng.seed32(), max_events)
    return JumpTrajectory(times.copy(), states / net.omega, float(t_end), truncated)


def gillespie_at(net, theta, s0, times, rng, max_events=MAX_EVENTS):
    """Gillespie states at ``times`` without storing the full path.

    Returns ``None`` if the event budget is exhausted.
    """
    x0 = np.round(np.asarray(s0, dtype=float) * net.omega)
    out, ok = K.gillespie_at(*net.packed, _theta(net, theta), x0,
                             np.asarray(times, dtype=float), rng.seed32(), max_events)
    return out / net.omega if ok else None


def euler_maruyama(net, theta, s0, times, rng):
    """Clamped Euler-Maruyama path on the grid ``times``.

    Raises :class:`IntegrationDiverged` if a state exceeds 1e12.
    """
    theta = _theta(net, theta)
    times = np.asarray(times, dtype=float)
    s0 = _clamped_state(s0)
    dts = np.diff(times)
    if np.any(dts <= 0):
        raise ValueError("times must be increasing")
    z = rng.standard_normal((len(dts), net.num_species))
    if np.allclose(dts, dts[0], rtol=1e-12, atol=0):
        path, ok, step, n_clamp = K.euler_maruyama(*net.packed, theta, s0, float(dts[0]), z)
    else:
        parts = [s0[None, :]]
        s = s0
        ok = True
        step = 0
        n_clamp = 0
        for h, dt in enumerate(dts):
            seg, ok, _, nc = K.euler_maruyama(*net.packed, theta, s, float(dt), z[h:h + 1])
            n_clamp += nc
            parts.append(seg[1:])
            s = seg[-1]
            if not ok:
                step = h + 1
                break
        path = np.vstack(parts)
    if not ok:
        raise IntegrationDiverged("Euler-Maruyama state left the admissible range",
                                  time=float(times[min(step, len(times) - 1)]))
    return DiffusionPath(times, path, int(n_clamp))


def observe(traj, schedule, rng, noise=True):
    """Sample ``y = G s + eps`` at the schedule times from one trajectory."""
    states = np.atleast_2d(traj.at(schedule.times))
    n_t, n_s = states.shape
    mask = np.zeros((n_t, n_s), dtype=bool)
    mask[:, schedule.observed] = True
    sigma = np.zeros((n_t, n_s))
    sigma[:, schedule.observed] = schedule.sigma
    values = np.full((n_t, n_s), np.nan)
    eps = rng.standard_normal((n_t, len(schedule.observed))) if noise else 0.0
    values[:, schedule.observed] = states[:, schedule.observed] + schedule.sigma * eps
    return ObservedTrajectory(np.asarray(schedule.times, dtype=float), mask, values, sigma)


# serialization ------------------------------------------------------------


def write_trajectories_csv(path, trajectories):
    """Rows ``trajectory_id, time, species, value`` for each path."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "time", "species", "value"])
        for i, tr in enumerate(trajectories):
            for t, s in zip(tr.times, tr.states):
                for j, v in enumerate(s):
                    w.writerow([i, repr(float(t)), j, repr(float(v))])


def write_observations_csv(path, obs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "time", "obs_index", "value"])
        for i, tr in enumerate(obs):
            for h, t in enumerate(tr.times):
                for j in tr.observed_index(h):
                    w.writerow([i, repr(float(t)), int(j), repr(float(tr.values[h, j]))])


def write_observations_json(path, obs):
    """JSON envelope carrying the schedule and every observed value."""
    doc = {
        "version": 1,
        "num_trajectories": len(obs),
        "schedule": obs.schedule.to_dict() if obs.schedule is not None else None,
        "trajectories": [
            {
                "times": [float(t) for t in tr.times],
                "observed": [[int(j) for j in tr.observed_index(h)] for h in range(len(tr.times))],
                "sigma": [[float(tr.sigma[h, j]) for j in tr.observed_index(h)]
                          for h in range(len(tr.times))],
                "values": [[float(tr.values[h, j]) for j in tr.observed_index(h)]
                           for h in range(len(tr.times))],
            }
            for tr in obs
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_observations_json(path, num_species):
    with open(path) as fh:
        doc = json.load(fh)
    trajs = []
    for d in doc["trajectories"]:
        n_t = len(d["times"])
        mask = np.zeros((n_t, num_species), dtype=bool)
        values = np.full((n_t, num_species), np.nan)
        sigma = np.zeros((n_t, num_species))
        for h in range(n_t):
            for j, s, v in zip(d["observed"][h], d["sigma"][h], d["values"][h]):
                mask[h, j] = True
                sigma[h, j] = s
                values[h, j] = v
        trajs.append(ObservedTrajectory(np.array(d["times"], dtype=float), mask, values, sigma))
    sched = None
    if doc.get("schedule"):
        s = doc["schedule"]
        sched = Schedule(np.array(s["times"]), np.array(s["observed"], dtype=np.int64),
                         np.array(s["sigma"], dtype=float))
    return ObservationSet(trajs, sched)
