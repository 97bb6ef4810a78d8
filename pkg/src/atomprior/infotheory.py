"""Mutual information, bias pressure and worst-case bias for atomic priors.

All quantities are in nats.  :func:`to_bits` is the single conversion point
used by reporting code.

Monte Carlo estimators draw standard-normal noise ``eps`` of shape
``(n, m)`` from ``numpy.random.default_rng(seed)`` and reuse the same draws
for every atom and every audited point.  With shared noise the identity
``sum_a lambda_a b(theta_a) = 0`` holds sample by sample, and differences of
bias pressure between nearby points are smooth in ``theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.stats import qmc

from .models import jacobian, predict
from .priors import AtomicPrior

LOG2 = math.log(2.0)
DEFAULT_SAMPLES = 4096
DEFAULT_CANDIDATES = 4096
# target element count of one (chunk, n, K) work array
_CHUNK_ELEMENTS = 4_000_000


def to_bits(nats):
    """Convert nats to bits."""
    return np.asarray(nats) / LOG2 if np.ndim(nats) else float(nats) / LOG2


@dataclass(frozen=True)
class MIEstimate:
    value: float
    stderr: float
    n_samples: int
    seed: int

    @property
    def bits(self):
        return to_bits(self.value)


@dataclass(frozen=True)
class BiasValue:
    """Bias pressure at ``theta`` with an interval ``[lower, upper]`` (nats)."""

    theta: np.ndarray
    value: float
    lower: float
    upper: float
    stderr: float = 0.0

    def __post_init__(self):
        if not (self.lower <= self.upper):
            raise ValueError("lower must not exceed upper")


@dataclass
class ScoreReport:
    mi_nats: float
    mi_stderr: float
    B_lower: float
    B_upper: float
    argmax_theta: list
    seed: int
    n: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        doc = {
            "mi_nats": self.mi_nats,
            "mi_stderr": self.mi_stderr,
            "B_lower": self.B_lower,
            "B_upper": self.B_upper,
            "argmax_theta": [float(v) for v in self.argmax_theta],
            "seed": self.seed,
            "n": self.n,
        }
        doc.update(self.extra)
        return doc


def standard_noise(seed, n, m):
    return np.random.default_rng(seed).standard_normal((n, m))


def gaussian_loglike(model, theta, x):
    """``log p(x | theta)`` for isotropic Gaussian noise."""
    y = predict(model, theta)
    x = np.asarray(x, dtype=float)
    r2 = np.sum((x - y) ** 2, axis=-1)
    return -r2 / (2 * model.sigma**2) - 0.5 * model.m * math.log(2 * math.pi * model.sigma**2)


def conditional_entropy(model):
    """``S(X | theta) = (m/2)(1 + log 2 pi sigma^2)``, independent of theta."""
    return 0.5 * model.m * (1.0 + math.log(2 * math.pi * model.sigma**2))


def _support(prior):
    keep = prior.weights > 0
    return prior.atoms[keep], prior.weights[keep]


def _neg_log_ratio(Yq, Y, logw, eps, sigma):
    """``-log [p(x) / p(x | y_q)]`` at ``x = y_q + sigma eps`` for every query and draw.

    Returns an ``(n_query, n)`` array.  Only differences ``y_q - y_b``
    enter, so the Gaussian normalizer cancels.
    """
    Eq = eps @ Yq.T / sigma  # (n, Q)
    Eb = eps @ Y.T / sigma  # (n, K)
    n, K = Eb.shape
    Q = Yq.shape[0]
    d2 = (np.sum(Yq**2, 1)[:, None] + np.sum(Y**2, 1)[None, :] - 2 * Yq @ Y.T)
    base = logw[None, :] - np.maximum(d2, 0.0) / (2 * sigma**2)  # (Q, K)
    out = np.empty((Q, n))
    chunk = max(1, _CHUNK_ELEMENTS // max(1, n * K))
    for start in range(0, Q, chunk):
        sl = slice(start, min(Q, start + chunk))
        expo = base[sl, None, :] - Eq.T[sl, :, None] + Eb[None, :, :]
        out[sl] = -logsumexp(expo, axis=-1)
    return out


def mi_monte_carlo(prior: AtomicPrior, model, n=DEFAULT_SAMPLES, seed=0):
    """Monte Carlo mutual information of an atomic prior.

    For each noise draw ``j`` the per-draw estimate is
    ``sum_a lambda_a log[p(x_aj | theta_a) / p(x_aj)]``; the reported value
    is their mean and the standard error comes from their spread.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    atoms, w = _support(prior)
    if atoms.shape[0] == 1:
        return MIEstimate(0.0, 0.0, n, seed)
    Y = predict(model, atoms)
    eps = standard_noise(seed, n, model.m)
    per = _neg_log_ratio(Y, Y, np.log(w), eps, model.sigma)  # (K, n)
    draws = w @ per
    stderr = float(np.std(draws, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MIEstimate(float(draws.mean()), stderr, n, seed)


def kl_to_predictive(theta, prior, model, n=DEFAULT_SAMPLES, seed=0, return_draws=False):
    """``D_KL[p(x | theta) || p(x)]`` for a batch of points, shape ``(n_theta,)``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    atoms, w = _support(prior)
    eps = standard_noise(seed, n, model.m)
    per = _neg_log_ratio(predict(model, theta), predict(model, atoms), np.log(w), eps,
                         model.sigma)
    if return_draws:
        return per.mean(axis=1), per
    return per.mean(axis=1)


def bias_pressure_batch(theta, prior, model, n=DEFAULT_SAMPLES, seed=0):
    """Bias pressure at many points with shared noise.

    Returns ``(values, stderr)``.  The MI subtracted is estimated from the
    same draws, so its noise is correlated with the KL term and the stderr
    accounts for both.
    """
    kl, per = kl_to_predictive(theta, prior, model, n, seed, return_draws=True)
    atoms, w = _support(prior)
    if atoms.shape[0] == 1:
        mi_draws = np.zeros(n)
    else:
        mi_draws = w @ _neg_log_ratio(predict(model, atoms), predict(model, atoms),
                                      np.log(w), standard_noise(seed, n, model.m), model.sigma)
    diff = per - mi_draws[None, :]
    values = diff.mean(axis=1)
    stderr = diff.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(values))
    return values, stderr


def bias_pressure_mc(theta, prior, model, n=DEFAULT_SAMPLES, seed=0):
    """Bias pressure ``b(theta) = D_KL[p(x|theta) || p(x)] - I(X; theta)``."""
    theta = np.asarray(theta, dtype=float)
    v, se = bias_pressure_batch(theta[None, :], prior, model, n, seed)
    return BiasValue(theta, float(v[0]), float(v[0] - 3 * se[0]), float(v[0] + 3 * se[0]),
                     float(se[0]))


def _kl_and_grad(y, J, Y, logw, eps, sigma):
    """KL term and its y-gradient at one point, draws held fixed."""
    x = y[None, :] + sigma * eps  # (n, m)
    d2 = np.sum((x[:, None, :] - Y[None, :, :]) ** 2, axis=-1)
    expo = logw[None, :] - d2 / (2 * sigma**2)
    lse = logsumexp(expo, axis=1)
    resp = np.exp(expo - lse[:, None])
    # d/dx of -log p(x) is sum_b resp_b (x - y_b) / sigma^2
    gx = (x - resp @ Y) / sigma**2
    m = y.shape[0]
    log_norm = 0.5 * m * math.log(2 * math.pi * sigma**2)
    # KL = -E[log p(x)] - S(X|theta), with log p(x) = lse - log_norm
    value = float(np.mean(log_norm - lse)) - 0.5 * m * (1 + math.log(2 * math.pi * sigma**2))
    return value, J.T @ gx.mean(axis=0)


def unit_edge_points(d, per_edge=17, max_points=1024, rng=None):
    """Points on the 1-skeleton of the unit cube (every edge, evenly spaced).

    Over budget, the edges through the all-zeros and all-ones corners are
    kept whole and the remaining budget is a random subset of the rest.
    """
    t = np.linspace(0.0, 1.0, per_edge)
    corners = np.array(np.meshgrid(*([[0.0, 1.0]] * max(d - 1, 0)), indexing="ij"))
    corners = corners.reshape(max(d - 1, 0), -1).T if d > 1 else np.zeros((1, 0))
    pts, primary = [], []
    for free in range(d):
        for c in corners:
            block = np.empty((per_edge, d))
            block[:, free] = t
            block[:, [i for i in range(d) if i != free]] = c
            pts.append(block)
            primary.append(np.all(c == c[:1]) if c.size else True)
    if len(pts) * per_edge <= max_points:
        return np.unique(np.vstack(pts), axis=0)
    keep = np.unique(np.vstack([p for p, k in zip(pts, primary) if k]), axis=0)
    rng = rng if rng is not None else np.random.default_rng(0)
    if keep.shape[0] >= max_points:
        return keep[np.sort(rng.choice(keep.shape[0], max_points, replace=False))]
    rest = np.unique(np.vstack([p for p, k in zip(pts, primary) if not k]), axis=0)
    rest = rest[~(rest[:, None, :] == keep[None, :, :]).all(-1).any(-1)]
    n_rest = min(rest.shape[0], max_points - keep.shape[0])
    extra = rest[np.sort(rng.choice(rest.shape[0], n_rest, replace=False))]
    return np.vstack([keep, extra])


def candidate_points(model, prior=None, n=DEFAULT_CANDIDATES, seed=0):
    """Audit candidates: scrambled Sobol points, cube edges and prior atoms.

    Edge sweeps take up to a quarter of the budget; the rest is Sobol.  For
    ordered domains the unit-cube edges map onto coincident-rate and
    saturated-rate edges of the model manifold, where bias concentrates.
    """
    d = model.d
    rng = np.random.default_rng(seed)
    edges = unit_edge_points(d, max_points=max(1, n // 4), rng=rng)
    n_sobol = max(1, n - edges.shape[0])
    sobol = qmc.Sobol(d, scramble=True, seed=rng).random(2 ** int(math.ceil(math.log2(n_sobol))))
    unit = np.vstack([edges, sobol[:n_sobol]])
    pts = model.domain.from_unit(unit)
    if prior is not None:
        pts = np.vstack([prior.atoms, pts])
    return pts


def worst_case_bias(prior, model, candidates=None, n=DEFAULT_SAMPLES, seed=0,
                    screen_n=256, n_refine=4, refine=True):
    """Largest bias pressure over a candidate set, then locally maximized.

    Candidates are screened with ``screen_n`` draws, the best ``n_refine``
    are re-scored with ``n`` draws, and the winner is polished by L-BFGS-B
    on the unit cube with the draws held fixed.
    """
    if candidates is None:
        candidates = candidate_points(model, prior, seed=seed)
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] == 0:
        raise ValueError("candidate set is empty")
    screen, _ = bias_pressure_batch(candidates, prior, model, min(n, screen_n), seed)
    order = np.argsort(-screen, kind="stable")[: max(1, n_refine)]
    vals, ses = bias_pressure_batch(candidates[order], prior, model, n, seed)
    best = int(np.argmax(vals))
    theta = candidates[order[best]]
    value, se = float(vals[best]), float(ses[best])
    if refine:
        polished = _refine_bias(theta, prior, model, n, seed)
        if polished is not None:
            v2, s2 = bias_pressure_batch(polished[None, :], prior, model, n, seed)
            if v2[0] > value:
                theta, value, se = polished, float(v2[0]), float(s2[0])
    return BiasValue(theta, value, value - 3 * se, value + 3 * se, se)


def _refine_bias(theta0, prior, model, n, seed):
    atoms, w = _support(prior)
    Y = predict(model, atoms)
    logw = np.log(w)
    eps = standard_noise(seed, n, model.m)
    dom = model.domain

    def negative(s):
        theta = dom.from_unit(s)
        try:
            y = predict(model, theta)
            J = jacobian(model, theta)
        except ValueError:
            return np.inf, np.zeros_like(s)
        value, g = _kl_and_grad(y, J, Y, logw, eps, model.sigma)
        return -value, -dom.unit_vjp(s, g)

    s0 = np.clip(dom.to_unit(theta0), 0.0, 1.0)
    try:
        res = minimize(negative, s0, jac=True, method="L-BFGS-B",
                       bounds=[(0.0, 1.0)] * model.d, options={"maxiter": 100})
    except (ValueError, FloatingPointError):
        return None
    if not np.all(np.isfinite(res.x)):
        return None
    return dom.from_unit(res.x)


def effective_dimension(points):
    """Slope of MI (nats) against ``log(1/sigma)``.

    ``points`` is a sequence of ``(sigma, mi)`` where ``mi`` is a float or
    an :class:`MIEstimate`.  Needs at least three points spanning a factor
    of four in sigma.
    """
    sig = np.array([float(p[0]) for p in points])
    mi = np.array([p[1].value if isinstance(p[1], MIEstimate) else float(p[1]) for p in points])
    if sig.size < 3:
        raise ValueError("need at least three (sigma, MI) points")
    if np.any(sig <= 0) or sig.max() / sig.min() < 4.0 - 1e-12:
        raise ValueError("sigma values must be positive and span at least a factor of 4")
    slope, _ = np.polyfit(np.log(1.0 / sig), mi, 1)
    return float(slope)


def kde_entropy_y(Y, lam, sigma):
    """KDE entropy surrogate in prediction space with exact gradients.

    ``S = -sum_a lam_a log sum_b lam_b exp(-|y_a - y_b|^2 / (2 s^2))`` with
    kernel width ``s = sqrt(2) sigma``.  The additive constant is dropped.
    ``lam`` is treated as free (not renormalized) when differentiating.

    Returns ``(S, dS/dY, dS/dlam)``.
    """
    Y = np.asarray(Y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    d2 = np.sum(Y**2, 1)[:, None] + np.sum(Y**2, 1)[None, :] - 2 * Y @ Y.T
    d2 = np.maximum(d2, 0.0)
    np.fill_diagonal(d2, 0.0)
    Kmat = np.exp(-d2 / (4 * sigma**2))
    Q = Kmat @ lam
    value = -float(lam @ np.log(Q))
    inv = 1.0 / Q
    # W_cb = lam_b K_cb (1/Q_c + 1/Q_b); dS/dy_c = lam_c/(2 sigma^2) sum_b W_cb (y_c - y_b)
    W = Kmat * lam[None, :] * (inv[:, None] + inv[None, :])
    dY = (lam / (2 * sigma**2))[:, None] * (W.sum(1)[:, None] * Y - W @ Y)
    dlam = -np.log(Q) - Kmat.T @ (lam * inv)
    return value, dY, dlam


def entropy_kde(prior, model, atoms=None, weights=None):
    """KDE entropy surrogate of the prior predictive and its gradients.

    Returns ``(value, grad_atoms, grad_weights)`` where ``grad_atoms`` has
    the shape of the atom array.  Pass ``atoms``/``weights`` to evaluate at a
    configuration without building an :class:`AtomicPrior` (weights are then
    used as given).
    """
    atoms = prior.atoms if atoms is None else np.atleast_2d(atoms)
    weights = prior.weights if weights is None else np.asarray(weights, dtype=float)
    Y = predict(model, atoms)
    J = jacobian(model, atoms)
    value, dY, dlam = kde_entropy_y(Y, weights, model.sigma)
    return value, np.einsum("kmd,km->kd", J, dY), dlam
