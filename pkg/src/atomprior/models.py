"""Model zoo: prediction maps, Jacobians and Fisher metrics.

Every model maps log-parameters ``theta`` (shape ``(d,)`` or ``(n, d)``) to
mean observables ``y`` (shape ``(m,)`` or ``(n, m)``) observed with Gaussian
noise of width ``sigma``.  Rates are ``k = exp(theta)`` throughout.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import _ode

KINDS = ("exp_decay", "hypercone", "michaelis_menten", "ping_pong", "linear")


class ModelError(ValueError):
    """Base class for failures while evaluating a model."""


class DomainError(ModelError):
    """A parameter point lies outside the region where the model is defined."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class IntegrationError(ModelError):
    """The kinetics ODE solver failed; carries the offending parameters."""

    def __init__(self, message, theta):
        super().__init__(message)
        self.theta = np.asarray(theta)


@dataclass(frozen=True)
class Domain:
    """Closed box in theta, optionally restricted to the ordered wedge.

    With ``ordered=True`` points satisfy ``theta[0] >= theta[1] >= ...``;
    this requires every coordinate to share the same interval.
    """

    lower: tuple
    upper: tuple
    ordered: bool = False

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or not lo:
            raise ValueError("domain bounds must be non-empty and of equal length")
        if any(not (a < b) for a, b in zip(lo, hi)):
            raise ValueError("every domain interval must satisfy lower < upper")
        if self.ordered and (len(set(lo)) > 1 or len(set(hi)) > 1):
            raise ValueError("an ordered domain needs identical bounds on every coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, d, lower, upper, ordered=False):
        return cls((lower,) * d, (upper,) * d, ordered)

    @property
    def d(self):
        return len(self.lower)

    @property
    def lo(self):
        return np.array(self.lower)

    @property
    def hi(self):
        return np.array(self.upper)

    def contains(self, theta, tol=0.0):
        theta = np.asarray(theta, dtype=float)
        ok = np.all((theta >= self.lo - tol) & (theta <= self.hi + tol), axis=-1)
        ok &= np.all(np.isfinite(theta), axis=-1)
        if self.ordered and self.d > 1:
            ok &= np.all(np.diff(theta, axis=-1) <= tol, axis=-1)
        return ok

    def sample(self, rng, n):
        """Uniform draws from the domain, shape ``(n, d)``."""
        theta = self.lo + (self.hi - self.lo) * rng.random((n, self.d))
        if self.ordered:
            theta = -np.sort(-theta, axis=-1)
        return theta

    def from_unit(self, s):
        """Map the unit cube onto the domain.

        For the ordered wedge the map is nested, ``theta_mu - lo =
        (hi - lo) * prod_{nu <= mu} s_nu``, so the faces ``s_mu = 1`` are the
        coincident-rate edges and ``s_mu = 0`` sends the tail to ``lo``.
        """
        s = np.asarray(s, dtype=float)
        if not self.ordered:
            return self.lo + (self.hi - self.lo) * s
        return self.lo + (self.hi - self.lo) * np.cumprod(s, axis=-1)

    def to_unit(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not self.ordered:
            return (theta - self.lo) / (self.hi - self.lo)
        frac = (theta - self.lo) / (self.hi - self.lo)
        prev = np.concatenate([np.ones_like(frac[..., :1]), frac[..., :-1]], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(prev > 0, frac / np.where(prev > 0, prev, 1.0), 0.0)
        return np.clip(s, 0.0, 1.0)

    def unit_vjp(self, s, g):
        """Pull a theta-gradient ``g`` back to the unit cube at ``s``."""
        s = np.asarray(s, dtype=float)
        g = np.asarray(g, dtype=float)
        scale = self.hi - self.lo
        if not self.ordered:
            return g * scale
        # d theta_mu / d s_nu = scale * prod_{kappa <= mu, kappa != nu} s_kappa
        d = s.shape[-1]
        out = np.zeros_like(g)
        for nu in range(d):
            others = s.copy()
            others[..., nu] = 1.0
            partial = np.cumprod(others, axis=-1)
            out[..., nu] = np.sum(g[..., nu:] * partial[..., nu:], axis=-1)
        return out * scale[0]

    def to_dict(self):
        return {"lower": list(self.lower), "upper": list(self.upper), "ordered": self.ordered}


@dataclass(frozen=True)
class ExpDecayPayload:
    """``y_t = sum_mu a_mu exp(-exp(theta_mu) t)``."""

    amplitudes: tuple
    times: tuple

    def __post_init__(self):
        a = tuple(float(v) for v in self.amplitudes)
        t = tuple(float(v) for v in self.times)
        if any(v < 0 for v in a):
            raise ValueError("amplitudes must be non-negative")
        if not t or any(v <= 0 for v in t) or any(b <= a_ for a_, b in zip(t, t[1:])):
            raise ValueError("times must be positive and strictly increasing")
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "times", t)


@dataclass(frozen=True)
class HyperconePayload:
    """Square cone ``y = (theta_1, r theta_2, ..., r theta_d)``, ``r = theta_1 / L``."""

    length: float
    d: int

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("hypercone length must be positive")
        if self.d < 1:
            raise ValueError("hypercone needs d >= 1")


@dataclass(frozen=True)
class LinearPayload:
    """Affine map ``y = A theta + b``; mostly a reference model for tests."""

    matrix: tuple
    offset: tuple

    def __post_init__(self):
        A = np.array(self.matrix, dtype=float, ndmin=2)
        b = np.array(self.offset, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ValueError("offset must have one entry per matrix row")
        object.__setattr__(self, "matrix", tuple(map(tuple, A.tolist())))
        object.__setattr__(self, "offset", tuple(b.tolist()))

    @property
    def A(self):
        return np.array(self.matrix)

    @property
    def b(self):
        return np.array(self.offset)


@dataclass(frozen=True)
class Mechanism:
    species: tuple
    rate_names: tuple
    # (reactants, products, rate index)
    reactions: tuple
    conserved: Mapping[str, Mapping[str, float]]

    def arrays(self):
        idx = {s: i for i, s in enumerate(self.species)}
        n_rxn = len(self.reactions)
        reactants = -np.ones((n_rxn, 2), dtype=np.int64)
        stoich = np.zeros((len(self.species), n_rxn))
        rate_index = np.zeros(n_rxn, dtype=np.int64)
        for r, (ins, outs, k) in enumerate(self.reactions):
            for j, s in enumerate(ins):
                reactants[r, j] = idx[s]
                stoich[idx[s], r] -= 1.0
            for s in outs:
                stoich[idx[s], r] += 1.0
            rate_index[r] = k
        return reactants, stoich, rate_index


MECHANISMS = {
    # E + S <-> ES -> E + P
    "michaelis_menten": Mechanism(
        species=("E", "S", "ES", "P"),
        rate_names=("kf", "kr", "kp"),
        reactions=(
            (("E", "S"), ("ES",), 0),
            (("ES",), ("E", "S"), 1),
            (("ES",), ("E", "P"), 2),
        ),
        conserved={"E0": {"E": 1, "ES": 1}, "S0": {"S": 1, "ES": 1, "P": 1}},
    ),
    # E + A -> EA <-> E*P -> E* + P ;  E* + B -> E*B <-> EQ -> E + Q
    "ping_pong": Mechanism(
        species=("E", "A", "EA", "EsP", "Es", "P", "B", "EsB", "EQ", "Q"),
        rate_names=("k1", "k2", "k3", "k4", "k5", "k6", "k7", "k8"),
        reactions=(
            (("E", "A"), ("EA",), 0),
            (("EA",), ("EsP",), 1),
            (("EsP",), ("EA",), 2),
            (("EsP",), ("Es", "P"), 3),
            (("Es", "B"), ("EsB",), 4),
            (("EsB",), ("EQ",), 5),
            (("EQ",), ("EsB",), 6),
            (("EQ",), ("E", "Q"), 7),
        ),
        conserved={
            "enzyme": {"E": 1, "EA": 1, "EsP": 1, "Es": 1, "EsB": 1, "EQ": 1},
            "A_moiety": {"A": 1, "EA": 1, "EsP": 1, "P": 1},
            "B_moiety": {"B": 1, "EsB": 1, "EQ": 1, "Q": 1},
        },
    ),
}

DEFAULT_INITIAL = {
    "michaelis_menten": {"E": 0.25, "S": 1.0, "ES": 0.0, "P": 0.0},
    "ping_pong": {
        "A": 1.0, "B": 1.0, "E": 0.5, "Es": 0.5,
        "EA": 0.1, "EsP": 0.1, "EsB": 0.1, "EQ": 0.1, "P": 0.0, "Q": 0.0,
    },
}
DEFAULT_OBSERVED = {"michaelis_menten": "P", "ping_pong": "Q"}
DEFAULT_TIMES = {
    "michaelis_menten": tuple(float(t) for t in range(1, 6)),
    "ping_pong": tuple(float(t) for t in range(1, 11)),
}


@dataclass(frozen=True)
class KineticsPayload:
    mechanism: str
    initial_concentrations: tuple  # sorted (species, value) pairs
    times: tuple
    observed_species: str
    rtol: float = 1e-8
    atol: float = 1e-10
    max_steps: int = 200_000

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        mech = MECHANISMS[self.mechanism]
        init = dict(self.initial_concentrations)
        unknown = set(init) - set(mech.species)
        if unknown:
            raise ValueError(f"unknown species in initial_concentrations: {sorted(unknown)}")
        if any(v < 0 for v in init.values()):
            raise ValueError("initial concentrations must be non-negative")
        if self.observed_species not in mech.species:
            raise ValueError(f"unknown observed species {self.observed_species!r}")
        t = tuple(float(v) for v in self.times)
        if not t or any(v <= 0 for v in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("times must be positive and strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "initial_concentrations", tuple(sorted(init.items())))
        totals = self.conserved_totals
        if any(v <= 0 for v in totals.values()):
            raise ValueError(f"conserved totals must be positive, got {totals}")

    @property
    def spec(self):
        return MECHANISMS[self.mechanism]

    @property
    def initial_vector(self):
        init = dict(self.initial_concentrations)
        return np.array([float(init.get(s, 0.0)) for s in self.spec.species])

    @property
    def conserved_totals(self):
        init = dict(self.initial_concentrations)
        return {
            name: float(sum(c * init.get(s, 0.0) for s, c in combo.items()))
            for name, combo in self.spec.conserved.items()
        }


@dataclass(frozen=True)
class ModelSpec:
    """A prediction map with Gaussian noise ``sigma`` on a parameter domain."""

    kind: str
    sigma: float
    domain: Domain
    payload: object = field(repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError("sigma must be positive and finite")
        if self.domain.d != self.d:
            raise ValueError(f"domain has {self.domain.d} coordinates but model has d={self.d}")

    @property
    def d(self):
        p = self.payload
        if self.kind == "exp_decay":
            return len(p.amplitudes)
        if self.kind == "hypercone":
            return p.d
        if self.kind == "linear":
            return len(p.matrix[0])
        return len(p.spec.rate_names)

    @property
    def m(self):
        if self.kind == "hypercone":
            return self.payload.d
        if self.kind == "linear":
            return len(self.payload.matrix)
        return len(self.payload.times)

    def predict(self, theta):
        return predict(self, theta)

    def jacobian(self, theta):
        return jacobian(self, theta)

    def fisher(self, theta):
        return fisher_metric(self, theta)

    def to_dict(self):
        return model_to_dict(self)

    def digest(self):
        """Stable hash of the model document, used to tag serialized priors."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# constructors

def exp_decay(d, times, sigma=0.1, amplitudes=None, bounds=(-6.0, 6.0), ordered=True):
    """Sum-of-exponentials model; amplitudes default to ``1/d`` each."""
    if amplitudes is None:
        amplitudes = (1.0 / d,) * d
    if len(amplitudes) != d:
        raise ValueError("need one amplitude per rate")
    payload = ExpDecayPayload(tuple(amplitudes), tuple(times))
    return ModelSpec("exp_decay", sigma, Domain.box(d, *bounds, ordered=ordered and d > 1), payload)


def hypercone(d, length=50.0, sigma=1.0):
    domain = Domain((0.0,) + (0.0,) * (d - 1), (float(length),) + (1.0,) * (d - 1))
    return ModelSpec("hypercone", sigma, domain, HyperconePayload(float(length), int(d)))


def kinetics(mechanism, sigma=0.1, times=None, initial_concentrations=None,
             observed_species=None, bounds=(-5.0, 5.0), rtol=1e-8, atol=1e-10):
    """Mass-action enzyme model observed through a single species."""
    init = dict(DEFAULT_INITIAL[mechanism])
    if initial_concentrations is not None:
        init = dict(initial_concentrations)
    payload = KineticsPayload(
        mechanism,
        tuple(sorted(init.items())),
        tuple(times if times is not None else DEFAULT_TIMES[mechanism]),
        observed_species or DEFAULT_OBSERVED[mechanism],
        rtol,
        atol,
    )
    d = len(MECHANISMS[mechanism].rate_names)
    return ModelSpec(mechanism, sigma, Domain.box(d, *bounds), payload)


def linear(matrix, offset=None, sigma=1.0, bounds=(-50.0, 50.0)):
    """Affine model ``y = A theta + b`` on a box; ``linear(np.eye(d))`` is the identity."""
    A = np.array(matrix, dtype=float, ndmin=2)
    b = np.zeros(A.shape[0]) if offset is None else offset
    return ModelSpec("linear", sigma, Domain.box(A.shape[1], *bounds), LinearPayload(A, b))


def fig1_model():
    """Two decay rates, amplitudes 0.8/0.2, observed at t = 1, 3."""
    return exp_decay(2, (1.0, 3.0), sigma=0.1, amplitudes=(0.8, 0.2))


def apply_repetitions(model, M):
    """``M`` independent repetitions are equivalent to noise ``sigma / sqrt(M)``."""
    if int(M) != M or M < 1:
        raise ValueError("M must be a positive integer")
    return dataclasses.replace(model, sigma=model.sigma / math.sqrt(M))


def with_dimension(model, d):
    """Same exp-decay observations with ``d`` rates (amplitudes ``1/d``)."""
    if model.kind != "exp_decay":
        raise ValueError("dimension sweeps are defined for exp_decay models")
    lo, hi = model.domain.lower[0], model.domain.upper[0]
    return exp_decay(d, model.payload.times, model.sigma, bounds=(lo, hi),
                     ordered=model.domain.ordered or model.d == 1)


# ----------------------------------------------------------------------------
# evaluation

def _as_batch(theta, d):
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    if theta.shape[-1] != d:
        raise ValueError(f"expected {d} parameters, got {theta.shape[-1]}")
    return theta, single


def _rates(theta):
    if not np.all(np.isfinite(theta)):
        bad = np.argwhere(~np.isfinite(theta))[0]
        raise DomainError(f"non-finite parameter at coordinate {bad[-1]}", int(bad[-1]))
    with np.errstate(over="ignore"):
        k = np.exp(theta)
    if not np.all(np.isfinite(k)):
        bad = np.argwhere(~np.isfinite(k))[0]
        raise DomainError(f"exp(theta) overflows at coordinate {bad[-1]}", int(bad[-1]))
    return k


def predict_exp_decay(payload, theta):
    a = np.array(payload.amplitudes)
    t = np.array(payload.times)
    theta, single = _as_batch(theta, len(a))
    k = _rates(theta)
    y = np.exp(-k[:, None, :] * t[None, :, None]) @ a
    return y[0] if single else y


def _jacobian_exp_decay(payload, theta):
    a = np.array(payload.amplitudes)
    t = np.array(payload.times)
    theta, single = _as_batch(theta, len(a))
    k = _rates(theta)
    kt = k[:, None, :] * t[None, :, None]
    J = -a * kt * np.exp(-kt)
    return J[0] if single else J


def _check_cone(payload, theta):
    L = payload.length
    lo = np.zeros(payload.d)
    hi = np.ones(payload.d)
    hi[0] = L
    tol = 1e-12 * max(1.0, L)
    outside = (theta < lo - tol) | (theta > hi + tol) | ~np.isfinite(theta)
    if np.any(outside):
        bad = int(np.argwhere(outside)[0][-1])
        raise DomainError(f"hypercone coordinate {bad} outside its range", bad)


def predict_hypercone(payload, theta):
    theta, single = _as_batch(theta, payload.d)
    _check_cone(payload, theta)
    r = theta[:, :1] / payload.length
    y = np.concatenate([theta[:, :1], r * theta[:, 1:]], axis=1)
    return y[0] if single else y


def _jacobian_hypercone(payload, theta):
    theta, single = _as_batch(theta, payload.d)
    _check_cone(payload, theta)
    n, d = theta.shape
    L = payload.length
    J = np.zeros((n, d, d))
    J[:, 0, 0] = 1.0
    idx = np.arange(1, d)
    J[:, idx, 0] = theta[:, 1:] / L
    J[:, idx, idx] = theta[:, :1] / L
    return J[0] if single else J


def predict_linear(payload, theta):
    theta, single = _as_batch(theta, len(payload.matrix[0]))
    y = theta @ payload.A.T + payload.b
    return y[0] if single else y


def _jacobian_linear(payload, theta):
    theta, single = _as_batch(theta, len(payload.matrix[0]))
    J = np.broadcast_to(payload.A, (theta.shape[0],) + payload.A.shape).copy()
    return J[0] if single else J


def _solve_kinetics(payload, theta, tangents):
    mech = payload.spec
    reactants, stoich, rate_index = _mechanism_arrays(payload.mechanism)
    d = len(mech.rate_names)
    theta, single = _as_batch(theta, d)
    k = _rates(theta)
    u0_real = payload.initial_vector
    t_out = np.array(payload.times)
    observed = mech.species.index(payload.observed_species)
    nd = 1 + (d if tangents else 0)
    n = theta.shape[0]
    values = np.empty((n, len(t_out), nd))
    for i in range(n):
        rates = np.zeros((len(rate_index), nd))
        rates[:, 0] = k[i, rate_index]
        if tangents:
            # d k_r / d theta_mu = k_r for mu = rate_index[r]
            rates[np.arange(len(rate_index)), 1 + rate_index] = k[i, rate_index]
        u0 = np.zeros((len(u0_real), nd))
        u0[:, 0] = u0_real
        res, _, status = _ode.integrate(
            u0, rates, reactants, stoich, t_out, observed,
            payload.rtol, payload.atol, payload.max_steps,
        )
        if status != 0:
            reason = "step budget exhausted" if status == 1 else "step size collapsed"
            raise IntegrationError(f"kinetics integration failed ({reason})", theta[i])
        values[i] = res
    return values, single


_ARRAYS_CACHE = {}


def _mechanism_arrays(name):
    if name not in _ARRAYS_CACHE:
        _ARRAYS_CACHE[name] = MECHANISMS[name].arrays()
    return _ARRAYS_CACHE[name]


def predict_kinetics(payload, theta):
    values, single = _solve_kinetics(payload, theta, tangents=False)
    y = values[..., 0]
    return y[0] if single else y


def _jacobian_kinetics(payload, theta):
    values, single = _solve_kinetics(payload, theta, tangents=True)
    J = values[..., 1:]
    return J[0] if single else J


def kinetics_trajectory(model, theta):
    """Full species concentrations at the output times, ``(m, n_species)``."""
    p = model.payload
    reactants, stoich, rate_index = _mechanism_arrays(p.mechanism)
    k = _rates(np.asarray(theta, dtype=float))
    rates = k[rate_index][:, None].copy()
    u0 = p.initial_vector[:, None].copy()
    _, states, status = _ode.integrate(
        u0, rates, reactants, stoich, np.array(p.times), 0, p.rtol, p.atol, p.max_steps
    )
    if status != 0:
        raise IntegrationError("kinetics integration failed", theta)
    return states[..., 0]


def reference_kinetics(model, theta, t_end, h=1e-4):
    """Fixed-step RK4 solution of all species at ``t_end`` (test oracle)."""
    p = model.payload
    reactants, stoich, rate_index = _mechanism_arrays(p.mechanism)
    k = np.exp(np.asarray(theta, dtype=float))
    return _ode.rk4_fixed(p.initial_vector, k[rate_index], reactants, stoich, float(t_end), h)


def predict(model, theta):
    if model.kind == "exp_decay":
        return predict_exp_decay(model.payload, theta)
    if model.kind == "hypercone":
        return predict_hypercone(model.payload, theta)
    if model.kind == "linear":
        return predict_linear(model.payload, theta)
    return predict_kinetics(model.payload, theta)


def jacobian(model, theta):
    """``dy_t / dtheta_mu`` with shape ``(m, d)`` (or ``(n, m, d)``)."""
    if model.kind == "exp_decay":
        return _jacobian_exp_decay(model.payload, theta)
    if model.kind == "hypercone":
        return _jacobian_hypercone(model.payload, theta)
    if model.kind == "linear":
        return _jacobian_linear(model.payload, theta)
    return _jacobian_kinetics(model.payload, theta)


def predict_and_jacobian(model, theta):
    """``(y, J)`` together; kinetics models need only one tangent solve."""
    if model.kind in ("michaelis_menten", "ping_pong"):
        values, single = _solve_kinetics(model.payload, theta, tangents=True)
        y, J = values[..., 0], values[..., 1:]
        return (y[0], J[0]) if single else (y, J)
    return predict(model, theta), jacobian(model, theta)


def fisher_metric(model, theta):
    """Gaussian-noise Fisher metric ``J^T J / sigma^2``."""
    J = jacobian(model, theta)
    g = np.swapaxes(J, -1, -2) @ J / model.sigma**2
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def fisher_edge_lengths(model, n=257):
    """Fisher length of each coordinate line through the domain centre.

    Used only as a rough count of distinguishable values per coordinate.
    """
    centre = model.domain.from_unit(np.full(model.d, 0.5))
    lengths = []
    for mu in range(model.d):
        grid = np.linspace(model.domain.lower[mu], model.domain.upper[mu], n)
        pts = np.repeat(centre[None, :], n, axis=0)
        pts[:, mu] = grid
        y = predict(model, pts)
        lengths.append(np.sum(np.linalg.norm(np.diff(y, axis=0), axis=1)) / model.sigma)
    return np.array(lengths)


# ----------------------------------------------------------------------------
# documents

def model_to_dict(model):
    p = model.payload
    doc = {"kind": model.kind, "d": model.d, "m": model.m, "sigma": model.sigma,
           "domain": model.domain.to_dict()}
    if model.kind == "exp_decay":
        doc.update(times=list(p.times), amplitudes=list(p.amplitudes))
    elif model.kind == "hypercone":
        doc.update(length=p.length)
    elif model.kind == "linear":
        doc.update(matrix=[list(r) for r in p.matrix], offset=list(p.offset))
    else:
        doc.update(times=list(p.times), initial_concentrations=dict(p.initial_concentrations),
                   observed_species=p.observed_species, rtol=p.rtol, atol=p.atol)
    return doc


def model_from_dict(doc):
    """Build a :class:`ModelSpec` from a validated model document."""
    kind = doc["kind"]
    d = int(doc["d"])
    sigma = float(doc["sigma"])
    dom = doc.get("domain")
    if kind == "exp_decay":
        amplitudes = doc.get("amplitudes") or [1.0 / d] * d
        model = exp_decay(d, doc["times"], sigma, amplitudes)
        if dom is not None:
            model = dataclasses.replace(model, domain=_domain_from(dom, d, ordered=True))
    elif kind == "hypercone":
        model = hypercone(d, doc.get("length", 50.0), sigma)
    elif kind == "linear":
        model = linear(doc["matrix"], doc.get("offset"), sigma)
        if dom is not None:
            model = dataclasses.replace(model, domain=_domain_from(dom, d))
    else:
        model = kinetics(kind, sigma, doc.get("times"), doc.get("initial_concentrations"),
                         doc.get("observed_species"), rtol=doc.get("rtol", 1e-8),
                         atol=doc.get("atol", 1e-10))
        if model.d != d:
            raise ValueError(f"{kind} has d={model.d}, document says d={d}")
        if dom is not None:
            model = dataclasses.replace(model, domain=_domain_from(dom, d))
    if "m" in doc and int(doc["m"]) != model.m:
        raise ValueError(f"document says m={doc['m']} but the model has m={model.m}")
    return model


def _domain_from(dom, d, ordered=False):
    lo, hi = dom["lower"], dom["upper"]
    lo = [lo] * d if np.isscalar(lo) else list(lo)
    hi = [hi] * d if np.isscalar(hi) else list(hi)
    if len(lo) != d or len(hi) != d:
        raise ValueError("domain bounds must have one entry per parameter")
    return Domain(tuple(lo), tuple(hi), bool(dom.get("ordered", ordered)) and d > 1)
