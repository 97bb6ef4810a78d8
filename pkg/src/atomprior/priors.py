"""Prior families: atomic (discrete), Jeffreys and log-normal.

Continuous priors are kept unnormalized.  Nothing downstream (ensemble
sampling, the alpha ladder) needs their normalizing constant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .models import Domain, ModelError, ModelSpec, jacobian, predict, predict_and_jacobian

# singular values below this fraction of the largest count as zero
RANK_TOL = 1e-12
# exp underflows in double precision below this exponent
UNDERFLOW_EXPONENT = 745.0


class AtomicPrior:
    """``K`` weighted point masses ``(theta_a, lambda_a)``.

    Weights are normalized on construction and both arrays are read-only, so
    an instance is an immutable value.
    """

    __slots__ = ("_atoms", "_weights")

    def __init__(self, atoms, weights=None):
        atoms = np.array(atoms, dtype=float, ndmin=2)
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ValueError("atoms must be a non-empty (K, d) array")
        if weights is None:
            weights = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
        weights = np.array(weights, dtype=float).reshape(-1)
        if weights.shape[0] != atoms.shape[0]:
            raise ValueError("need exactly one weight per atom")
        if not np.all(np.isfinite(atoms)) or not np.all(np.isfinite(weights)):
            raise ValueError("atoms and weights must be finite")
        if np.any(weights < 0):
            raise ValueError("weights must be non-negative")
        total = weights.sum()
        if total <= 0:
            raise ValueError("weights must not all be zero")
        weights = weights / total
        atoms.setflags(write=False)
        weights.setflags(write=False)
        self._atoms = atoms
        self._weights = weights

    @property
    def atoms(self):
        return self._atoms

    @property
    def weights(self):
        return self._weights

    @property
    def K(self):
        return self._atoms.shape[0]

    @property
    def d(self):
        return self._atoms.shape[1]

    def __len__(self):
        return self.K

    def __repr__(self):
        return f"AtomicPrior(K={self.K}, d={self.d})"

    def __eq__(self, other):
        if not isinstance(other, AtomicPrior):
            return NotImplemented
        return (np.array_equal(self.atoms, other.atoms)
                and np.array_equal(self.weights, other.weights))

    def with_atoms(self, extra, extra_weights=None):
        """A new prior with more atoms appended (default weight zero)."""
        extra = np.array(extra, dtype=float, ndmin=2)
        if extra_weights is None:
            extra_weights = np.zeros(extra.shape[0])
        return AtomicPrior(np.vstack([self.atoms, extra]),
                           np.concatenate([self.weights, extra_weights]))

    def predictions(self, model):
        return predict(model, self.atoms)

    def check_domain(self, domain: Domain, tol=1e-9):
        if not np.all(domain.contains(self.atoms, tol=tol)):
            raise ValueError("prior atoms lie outside the model domain")

    def to_dict(self, model=None):
        doc = {"atoms": self.atoms.tolist(), "weights": self.weights.tolist()}
        doc["model_hash"] = model.digest() if model is not None else None
        return doc

    def to_json(self, model=None):
        return json.dumps(self.to_dict(model), indent=1)

    @classmethod
    def from_dict(cls, doc, model=None):
        if model is not None and doc.get("model_hash") not in (None, model.digest()):
            raise ValueError("prior file was produced for a different model")
        return cls(doc["atoms"], doc["weights"])

    @classmethod
    def from_json(cls, text, model=None):
        return cls.from_dict(json.loads(text), model)


@dataclass(frozen=True)
class LogDensity:
    """Unnormalized log-density over a domain.

    ``fn`` maps a batch ``(n, d)`` to ``(n,)``; points outside the domain
    evaluate to ``-inf`` without calling ``fn``.  ``joint``, when given,
    returns ``(log_density, predictions)`` for points inside the domain so
    that samplers can reuse model evaluations the density already needed.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    domain: Domain
    name: str = "custom"
    params: dict = field(default_factory=dict)
    joint: Callable | None = field(default=None, repr=False, compare=False)

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        theta = np.atleast_2d(theta)
        out = np.full(theta.shape[0], -np.inf)
        inside = self.domain.contains(theta)
        if np.any(inside):
            out[inside] = self.fn(theta[inside])
        return out[0] if single else out

    @property
    def d(self):
        return self.domain.d


def _log_volume(J, sigma):
    """``sum log s_i`` of ``J / sigma``; ``-inf`` when rank-deficient."""
    s = np.linalg.svd(np.asarray(J) / sigma, compute_uv=False)
    top = s[..., :1]
    with np.errstate(divide="ignore"):
        out = np.sum(np.log(s), axis=-1)
    deficient = np.any(s <= RANK_TOL * top, axis=-1) | (top[..., 0] <= 0)
    return np.where(deficient, -np.inf, out)


def jeffreys_logdensity(model: ModelSpec, theta):
    """``log sqrt(det g)`` from the singular values of ``J / sigma``.

    Returns ``-inf`` where ``J`` loses column rank (relative cutoff
    :data:`RANK_TOL`).
    """
    return _log_volume(jacobian(model, theta), model.sigma)


def _jeffreys_joint(model, theta):
    """Jeffreys log-density and predictions; failed model evaluations give ``-inf``."""
    try:
        y, J = predict_and_jacobian(model, theta)
        return _log_volume(J, model.sigma), y
    except ModelError:
        logp = np.full(theta.shape[0], -np.inf)
        y = np.full((theta.shape[0], model.m), np.nan)
        for i, th in enumerate(theta):
            try:
                yi, Ji = predict_and_jacobian(model, th)
            except ModelError:
                continue
            logp[i], y[i] = _log_volume(Ji, model.sigma), yi
        return logp, y


def vandermonde_jeffreys(d, phi):
    """Closed-form ``log |det J|`` for ``d = m``, times ``1..m``, amplitudes ``1/d``.

    In the coordinates ``phi_mu = exp(-k_mu)`` the Jacobian
    ``t phi^(t-1) / d`` is a scaled Vandermonde matrix, so the density is
    ``prod_{mu<nu} |phi_mu - phi_nu| * prod_t (t/d)`` and never needs an
    ill-conditioned determinant.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != d:
        raise ValueError(f"expected {d} coordinates")
    iu = np.triu_indices(d, 1)
    gaps = np.abs(phi[..., iu[0]] - phi[..., iu[1]])
    with np.errstate(divide="ignore"):
        logvdm = np.sum(np.log(gaps), axis=-1)
    const = sum(math.log(t / d) for t in range(1, d + 1))
    return logvdm + const


def exp_decay_phi(theta):
    """``phi = exp(-exp(theta))`` and ``log |d phi / d theta|`` per coordinate."""
    theta = np.asarray(theta, dtype=float)
    k = np.exp(theta)
    return np.exp(-k), theta - k


def vandermonde_applies(model):
    """True for square exp-decay models with equal amplitudes and equally spaced times."""
    if model.kind != "exp_decay" or model.m != model.d:
        return False
    t = np.asarray(model.payload.times, dtype=float)
    spaced = t.size < 2 or np.allclose(np.diff(t), t[1] - t[0], rtol=1e-12, atol=0)
    return bool(spaced and np.allclose(model.payload.amplitudes, 1.0 / model.d))


def jeffreys_logdensity_vandermonde(model, theta):
    """Exact Jeffreys log-density of a square exp-decay model in theta-coordinates.

    Valid for ``d = m``, equal amplitudes and equally spaced times
    ``t_i = t_0 + i h``.  With ``psi = exp(-k h)`` the Jacobian in ``k`` is
    ``-(t_i / d) exp(-k t_0) psi^i``, so

    ``|det J| = prod_i (t_i / d) * prod_mu exp(-k_mu t_0) * prod_{mu<nu} |psi_mu - psi_nu|``.

    Times ``1..m`` reduce this to :func:`vandermonde_jeffreys`.  Gaps are
    formed with ``expm1`` so that nearly equal slow rates keep full
    relative precision.
    """
    if not vandermonde_applies(model):
        raise ValueError("the Vandermonde form needs d = m, equally spaced times and amplitudes 1/d")
    d = model.d
    t = np.asarray(model.payload.times, dtype=float)
    h = t[1] - t[0] if d > 1 else 1.0
    theta = np.asarray(theta, dtype=float)
    k = np.exp(theta)
    iu = np.triu_indices(d, 1)
    a, b = iu
    # k_a - k_b = k_b expm1(theta_a - theta_b); psi_a - psi_b = psi_b expm1(-(k_a - k_b) h)
    dk = k[..., b] * np.expm1(theta[..., a] - theta[..., b])
    with np.errstate(divide="ignore"):
        gaps = -k[..., b] * h + np.log(np.abs(np.expm1(-dk * h)))
    const = float(np.sum(np.log(t / d)))
    return (np.sum(gaps, axis=-1) + const - t[0] * np.sum(k, axis=-1) + np.sum(theta, axis=-1)
            - d * math.log(model.sigma))


def lognormal_logdensity(theta, mean=0.0, width=1.0):
    """``-sum (theta - mean)^2 / (2 width^2)``, unnormalized."""
    if not width > 0:
        raise ValueError("width must be positive")
    theta = np.asarray(theta, dtype=float)
    return -np.sum((theta - mean) ** 2, axis=-1) / (2.0 * width**2)


def jeffreys_prior(model, method="auto"):
    """Jeffreys prior on the model domain as a :class:`LogDensity`.

    ``method`` is ``"svd"``, ``"vandermonde"`` or ``"auto"``, which takes the
    exact closed form whenever :func:`vandermonde_applies`.
    """
    if method not in ("auto", "svd", "vandermonde"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        method = "vandermonde" if vandermonde_applies(model) else "svd"
    if method == "vandermonde":
        fn = lambda th: jeffreys_logdensity_vandermonde(model, th)  # noqa: E731
        return LogDensity(fn, model.domain, "jeffreys", {"method": method})
    joint = lambda th: _jeffreys_joint(model, th)  # noqa: E731
    return LogDensity(lambda th: joint(th)[0], model.domain, "jeffreys", {"method": method},
                      joint)


def lognormal_prior(model, mean=0.0, width=1.0):
    return LogDensity(lambda th: lognormal_logdensity(th, mean, width), model.domain,
                      "lognormal", {"mean": mean, "width": width})


def uniform_prior(domain):
    return LogDensity(lambda th: np.zeros(th.shape[0]), domain, "uniform")


def atomic_as_density(prior: AtomicPrior, domain, width):
    """Smooth an atomic prior into a mixture of narrow Gaussians in theta."""
    atoms = prior.atoms
    logw = np.log(prior.weights)

    def fn(th):
        d2 = np.sum((th[:, None, :] - atoms[None, :, :]) ** 2, axis=-1)
        return logsumexp(logw - d2 / (2 * width**2), axis=1)

    return LogDensity(fn, domain, "atomic_smoothed", {"width": width})


def gaussian_loglike_matrix(x, y, sigma):
    """``log p(x_i | y_j)`` for every pair, shape ``(n_x, n_y)``."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    m = x.shape[-1]
    d2 = (np.sum(x**2, 1)[:, None] + np.sum(y**2, 1)[None, :] - 2 * x @ y.T)
    d2 = np.maximum(d2, 0.0)
    return -d2 / (2 * sigma**2) - 0.5 * m * math.log(2 * math.pi * sigma**2)


def prior_predictive_logdensity(prior: AtomicPrior, model, x, return_underflow=False):
    """``log sum_a lambda_a p(x | theta_a)`` with max-shift stabilization.

    Terms more than :data:`UNDERFLOW_EXPONENT` below the largest contribute
    exactly zero; with ``return_underflow=True`` their count is returned too.
    The result is always finite because the largest term is kept exactly.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    y = prior.predictions(model)
    diff = np.atleast_2d(x)[:, None, :] - y[None, :, :]
    m = y.shape[-1]
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    expo = logw[None, :] - np.sum(diff**2, -1) / (2 * model.sigma**2)
    top = np.max(expo, axis=1, keepdims=True)
    shifted = expo - top
    # zero-weight atoms are not counted as underflow
    clamped = (shifted < -UNDERFLOW_EXPONENT) & np.isfinite(shifted)
    terms = np.where(clamped, 0.0, np.exp(np.maximum(shifted, -UNDERFLOW_EXPONENT)))
    terms = np.where(np.isfinite(shifted), terms, 0.0)
    out = top[:, 0] + np.log(terms.sum(axis=1)) - 0.5 * m * math.log(2 * math.pi * model.sigma**2)
    out = out[0] if single else out
    if return_underflow:
        return out, int(clamped.sum())
    return out
