"""Small reaction networks shared by the tests."""

import numpy as np

from srnbayes.model import (
    CombinatorialMassAction, ConservedComplement, Logit, MassAction, MichaelisMenten, Parameter,
    ParameterSpace, ReactionNetwork, Uniform,
)
from srnbayes.simulate import ObservedTrajectory

from oracles import immigration_death_moments

ENZ_THETA = np.array([0.001, 0.005, 0.01])
ENZ_S0 = np.array([50.0, 40.0, 60.0, 10.0])
LV_THETA = np.array([0.5, 0.0025, 0.3])
GENE_THETA = np.array([0.1, 0.7, 0.35, 0.2, 0.1, 0.9, 0.3, 0.1])


def enzyme(omega=1.0):
    C = [[-1, 1, 1], [-1, 1, 0], [1, -1, -1], [0, 0, 1]]
    laws = [MassAction(((0, 1), (1, 1)), 0), MassAction(((2, 1),), 1), MassAction(((2, 1),), 2)]
    return ReactionNetwork(C, laws, omega=omega)


def lotka(omega=1.0):
    laws = [MassAction(((0, 1),), 0), MassAction(((0, 1), (1, 1)), 1), MassAction(((1, 1),), 2)]
    return ReactionNetwork([[1, -1, 0], [0, 1, -1]], laws, omega=omega)


def genenet():
    C = [[-1, 1, 0, 0, 0, 0, 0, 0], [0, 0, 1, 0, 0, 0, -1, 0],
         [0, 0, 0, 1, -2, 2, 0, -1], [-1, 1, 0, 0, 1, -1, 0, 0]]
    laws = [MassAction(((0, 1), (3, 1)), 0), ConservedComplement(0, 10.0, 1),
            MassAction(((0, 1),), 2), MassAction(((1, 1),), 3),
            CombinatorialMassAction(2, 4, 2, 0.5), MassAction(((3, 1),), 5),
            MassAction(((1, 1),), 6), MassAction(((2, 1),), 7)]
    return ReactionNetwork(C, laws)


def michaelis():
    # S -> P at vmax * S / (km + S); vmax is param 0, km param 1
    return ReactionNetwork([[-1], [1]], [MichaelisMenten(0, ((0, 1),))])


def immigration_death(omega=1.0):
    # 0 -> X at theta1, X -> 0 at theta2 * x
    return ReactionNetwork([[1, -1]], [MassAction((), 0), MassAction(((0, 1),), 1)], omega=omega)


def random_linear_case(rng):
    th2 = rng.uniform(0.1, 1.0)
    th1 = th2 * rng.uniform(10, 40)
    omega = float(rng.choice([1.0, 10.0]))
    m0, g0 = rng.uniform(10, 40), rng.uniform(0, 5)
    sig = rng.uniform(0.5, 3)
    n = int(rng.integers(3, 11))
    times = np.cumsum(np.r_[0, rng.uniform(0.2, 2, n)])
    ys = np.array([immigration_death_moments(th1, th2, m0, g0, t)[0] for t in times])
    ys = ys + rng.normal(size=n + 1) * np.sqrt(ys / omega + sig ** 2)
    tr = ObservedTrajectory(times, np.ones((n + 1, 1), bool), ys[:, None],
                            np.full((n + 1, 1), sig))
    return (th1, th2, omega, m0, g0, sig, times, ys), tr


def id_space():
    return ParameterSpace([Parameter("a", "rate", 0, Logit(0, 100), Uniform(0, 100)),
                           Parameter("b", "rate", 1, Logit(0, 5), Uniform(0, 5))])
