"""Reaction networks, rate laws, parameter transforms and priors."""

from dataclasses import dataclass, field
import math

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DomainError, StateDomainError

TOL_STATE = 1e-9


@dataclass(frozen=True)
class MassAction:
    """``prefactor * theta[param] * prod_j s_j ** m_j``."""

    reactants: tuple  # ((species, multiplicity), ...)
    param: int
    prefactor: float = 1.0


@dataclass(frozen=True)
class CombinatorialMassAction:
    """``prefactor * theta[param] * s (s - 1/omega) ... (s - (order-1)/omega)``.

    With ``order=2`` and ``prefactor=0.5`` this is the usual dimerization rate.
    """

    species: int
    param: int
    order: int = 2
    prefactor: float = 0.5


@dataclass(frozen=True)
class ConservedComplement:
    """``theta[param] * (zeta - s_species)`` for a conserved total ``zeta``."""

    species: int
    zeta: float
    param: int


@dataclass(frozen=True)
class MichaelisMenten:
    """``theta[vmax] * prod_j s_j / (theta[km_j] + s_j)``."""

    vmax: int
    factors: tuple  # ((species, km_param), ...)


RATE_LAWS = (MassAction, CombinatorialMassAction, ConservedComplement, MichaelisMenten)


def _law_params(law):
    if isinstance(law, MichaelisMenten):
        return [law.vmax] + [km for _, km in law.factors]
    return [law.param]


def _law_species(law):
    if isinstance(law, MassAction):
        return [s for s, _ in law.reactants]
    if isinstance(law, MichaelisMenten):
        return [s for s, _ in law.factors]
    return [law.species]


class ReactionNetwork:
    """Stoichiometry plus one rate law per reaction.

    Parameters
    ----------
    stoichiometry : array_like, shape (n_species, n_reactions)
    rate_laws : sequence of rate-law objects, one per reaction
    omega : float
        System size; propensities are ``omega * v``.
    species_names : sequence of str, optional
    """

    def __init__(self, stoichiometry, rate_laws, omega=1.0, species_names=None):
        C = np.array(stoichiometry, dtype=float)
        if C.ndim != 2:
            raise ConfigError("stoichiometry must be a matrix")
        if not np.all(C == np.round(C)):
            raise ConfigError("stoichiometry must be integer valued")
        n_s, n_r = C.shape
        rate_laws = tuple(rate_laws)
        if len(rate_laws) != n_r:
            raise ConfigError(f"expected {n_r} rate laws, got {len(rate_laws)}")
        if not omega > 0:
            raise ConfigError("omega must be positive")
        n_p = 0
        for law in rate_laws:
            if not isinstance(law, RATE_LAWS):
                raise ConfigError(f"unknown rate law {law!r}")
            for s in _law_species(law):
                if not 0 <= s < n_s:
                    raise ConfigError(f"species index {s} out of range")
            for p in _law_params(law):
                if p < 0:
                    raise ConfigError("negative parameter index")
                n_p = max(n_p, p + 1)
        if species_names is None:
            species_names = [f"s{i + 1}" for i in range(n_s)]
        if len(species_names) != n_s:
            raise ConfigError("species_names length mismatch")
        self.stoichiometry = C
        self.rate_laws = rate_laws
        self.omega = float(omega)
        self.species_names = tuple(species_names)
        self.num_species = n_s
        self.num_reactions = n_r
        self.num_params = n_p
        self.packed = self._pack()

    def _pack(self):
        n_r = self.num_reactions
        kind = np.zeros(n_r, dtype=np.int64)
        pidx = np.zeros(n_r, dtype=np.int64)
        coef = np.zeros(n_r)
        fptr = np.zeros(n_r + 1, dtype=np.int64)
        fsp, fval = [], []
        for k, law in enumerate(self.rate_laws):
            if isinstance(law, MassAction):
                kind[k], pidx[k], coef[k] = 0, law.param, law.prefactor
                for s, m in law.reactants:
                    fsp.append(s)
                    fval.append(int(m))
            elif isinstance(law, CombinatorialMassAction):
                kind[k], pidx[k], coef[k] = 1, law.param, law.prefactor
                fsp.append(law.species)
                fval.append(int(law.order))
            elif isinstance(law, ConservedComplement):
                kind[k], pidx[k], coef[k] = 2, law.param, law.zeta
                fsp.append(law.species)
                fval.append(0)
            else:
                kind[k], pidx[k], coef[k] = 3, law.vmax, 1.0
                for s, km in law.factors:
                    fsp.append(s)
                    fval.append(int(km))
            fptr[k + 1] = len(fsp)
        return (
            np.ascontiguousarray(self.stoichiometry),
            kind,
            pidx,
            coef,
            fptr,
            np.array(fsp, dtype=np.int64),
            np.array(fval, dtype=np.int64),
            self.omega,
        )

    def __repr__(self):
        return (f"ReactionNetwork(species={list(self.species_names)}, "
                f"reactions={self.num_reactions}, omega={self.omega})")


def _clamped_state(s):
    s = np.asarray(s, dtype=float)
    if np.any(s < -TOL_STATE) or not np.all(np.isfinite(s)):
        raise StateDomainError(f"state {s} is negative beyond tolerance")
    return np.maximum(s, 0.0)


def _theta(net, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape[0] < net.num_params:
        raise ValueError(f"need {net.num_params} rate parameters, got {theta.shape[0]}")
    return theta


def eval_rates(net, s, theta):
    """Reaction rates ``v(s; theta)``; tiny negative states are clamped to 0."""
    s = _clamped_state(s)
    return K.rates(*net.packed, s, _theta(net, theta))


def drift(net, s, theta):
    """``C v(s; theta)``."""
    return net.stoichiometry @ eval_rates(net, s, theta)


def diffusion_matrix(net, s, theta):
    """Covariance rate ``C diag(v) C^T / omega``."""
    v = eval_rates(net, s, theta)
    C = net.stoichiometry
    return (C * v) @ C.T / net.omega


def rate_state_jacobian(net, s, theta):
    """Analytic Jacobian of ``C v(s; theta)`` with respect to ``s``."""
    s = _clamped_state(s)
    return net.stoichiometry @ K.rates_jacobian(*net.packed, s, _theta(net, theta))


# parameters ---------------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def logpdf(self, x):
        if self.low < x < self.high:
            return -math.log(self.high - self.low)
        return -math.inf

    def sample(self, rng):
        return float(rng.uniform(self.low, self.high))

    def contains(self, x):
        return self.low < x < self.high


@dataclass(frozen=True)
class Gaussian:
    mean: float
    var: float

    def logpdf(self, x):
        return -0.5 * (math.log(2 * math.pi * self.var) + (x - self.mean) ** 2 / self.var)

    def sample(self, rng):
        return float(self.mean + math.sqrt(self.var) * rng.standard_normal())

    def contains(self, x):
        return math.isfinite(x)


@dataclass(frozen=True)
class Identity:
    def forward(self, x):
        return float(x)

    def backward(self, u):
        return float(u)

    def log_jacobian(self, u):
        return 0.0

    def contains(self, x):
        return math.isfinite(x)


@dataclass(frozen=True)
class Log:
    def forward(self, x):
        if not x > 0:
            raise DomainError(f"log transform needs x > 0, got {x}")
        return math.log(x)

    def backward(self, u):
        return math.exp(u) if u < 709.0 else math.inf

    def log_jacobian(self, u):
        return float(u)

    def contains(self, x):
        return x > 0 and math.isfinite(x)


@dataclass(frozen=True)
class Logit:
    low: float
    high: float

    def forward(self, x):
        if not self.low < x < self.high:
            raise DomainError(f"logit({self.low}, {self.high}) needs x inside, got {x}")
        p = (x - self.low) / (self.high - self.low)
        return math.log(p) - math.log1p(-p)

    def backward(self, u):
        if u >= 0:
            p = 1.0 / (1.0 + math.exp(-u))
        else:
            e = math.exp(u)
            p = e / (1.0 + e)
        return self.low + (self.high - self.low) * p

    def log_jacobian(self, u):
        # log(width * p * (1 - p)) written to stay finite for large |u|
        a = abs(u)
        return math.log(self.high - self.low) - a - 2.0 * math.log1p(math.exp(-a))

    def contains(self, x):
        return self.low < x < self.high


@dataclass(frozen=True)
class Parameter:
    """One inferred quantity.

    ``target`` is ``"rate"`` (index into the rate-parameter vector) or
    ``"noise"`` (index of the observed species whose noise level it sets).
    """

    name: str
    target: str
    index: int
    transform: object
    prior: object


@dataclass
class ParameterSpace:
    """Inferred parameters with their transforms and priors."""

    params: list = field(default_factory=list)

    @property
    def dim(self):
        return len(self.params)

    @property
    def names(self):
        return [p.name for p in self.params]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)


def to_unconstrained(ps, theta):
    theta = np.asarray(theta, dtype=float)
    out = np.empty(ps.dim)
    for k, p in enumerate(ps.params):
        if not p.prior.contains(theta[k]):
            raise DomainError(f"{p.name}={theta[k]} outside prior support")
        out[k] = p.transform.forward(theta[k])
    return out


def to_constrained(ps, phi):
    phi = np.asarray(phi, dtype=float)
    return np.array([p.transform.backward(phi[k]) for k, p in enumerate(ps.params)])


def log_prior_unconstrained(ps, phi):
    """Log prior density of ``phi`` including the change-of-variables term."""
    phi = np.asarray(phi, dtype=float)
    total = 0.0
    for k, p in enumerate(ps.params):
        if not math.isfinite(phi[k]):
            return -math.inf
        x = p.transform.backward(phi[k])
        lp = p.prior.logpdf(x)
        if lp == -math.inf:
            return -math.inf
        total += lp + p.transform.log_jacobian(phi[k])
    return total


def sample_prior(ps, rng):
    """Draw constrained parameters from the prior."""
    return np.array([p.prior.sample(rng) for p in ps.params])
