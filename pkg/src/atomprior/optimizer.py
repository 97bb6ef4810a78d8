"""Synthesis of maximum-mutual-information atomic priors.

Pipeline used by :func:`fit_optimal_prior`:

1. best-candidate initialization in prediction space,
2. joint L-BFGS ascent of the KDE entropy surrogate over atom positions
   and weight logits,
3. support refinement (prune, merge) with Blahut-Arimoto weights,
4. augmentation rounds: while the worst-case bias is too large, add the
   worst-case point as a new atom and re-weight by Blahut-Arimoto.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit, logsumexp, softmax

from . import infotheory as it
from .models import fisher_edge_lengths, predict
from .priors import AtomicPrior

log = logging.getLogger(__name__)

# sigmoid arguments are confined to this range; expit(12) = 1 - 6e-6
U_BOUND = 12.0


@dataclass(frozen=True)
class OptimizerConfig:
    K_init: int | None = None
    oversample: int = 32
    max_iters: int = 2000
    grad_tol: float = 1e-5
    prune_weight: float = 1e-3
    merge_radius: float = 0.25
    seed: int = 0
    ba_tol: float = 2e-3
    ba_max_iters: int = 3000
    n_mc: int = 1024
    augment_rounds: int = 4
    augment_threshold_bits: float = 0.15

    def __post_init__(self):
        if self.K_init is not None and self.K_init < 2:
            raise ValueError("K_init must be at least 2")
        if not 0 <= self.prune_weight < 0.1:
            raise ValueError("prune_weight must lie in [0, 0.1)")
        if self.merge_radius < 0:
            raise ValueError("merge_radius must be non-negative")
        if self.oversample < 1 or self.max_iters < 1:
            raise ValueError("oversample and max_iters must be positive")


@dataclass
class FitResult:
    prior: AtomicPrior
    converged: bool
    iterations: int
    grad_norm: float
    history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


@dataclass
class BAResult:
    weights: np.ndarray
    capacity: float
    converged: bool
    iterations: int
    divergences: np.ndarray

    def __iter__(self):
        # unpack as (weights, capacity)
        return iter((self.weights, self.capacity))


def default_K(model):
    """Four times the product of clamped Fisher edge lengths, clamped to [8, 256]."""
    lengths = np.clip(fisher_edge_lengths(model), 1.0, 256.0)
    return int(np.clip(4 * np.prod(lengths), 8, 256))


def best_candidate_init(model, K, oversample=32, seed=0):
    """Mitchell's best-candidate points, spread out in prediction space.

    Each new point is the candidate, among ``oversample`` uniform draws, with
    the largest distance ``|y - y_i| / sigma`` to its nearest chosen point.
    Ties go to the lower candidate index.
    """
    if K < 1 or oversample < 1:
        raise ValueError("K and oversample must be positive")
    rng = np.random.default_rng(seed)
    chosen = model.domain.sample(rng, 1)
    ys = predict(model, chosen) / model.sigma
    for _ in range(K - 1):
        cand = model.domain.sample(rng, oversample)
        yc = predict(model, cand) / model.sigma
        dist = np.min(np.linalg.norm(yc[:, None, :] - ys[None, :, :], axis=-1), axis=1)
        pick = int(np.argmax(dist))
        chosen = np.vstack([chosen, cand[pick]])
        ys = np.vstack([ys, yc[pick]])
    return chosen


def _pack(model, atoms, weights):
    s = np.clip(model.domain.to_unit(atoms), 1e-12, 1 - 1e-12)
    u = np.clip(logit(s), -U_BOUND, U_BOUND)
    z = np.log(np.maximum(weights, 1e-300))
    return np.concatenate([u.ravel(), z - z.max()])


def _unpack(model, v, K):
    d = model.d
    u = v[: K * d].reshape(K, d)
    s = expit(u)
    return model.domain.from_unit(s), softmax(v[K * d:]), s


def maximize_kde_mi(model, init, config=OptimizerConfig(), weights=None, refine=True):
    """Maximize the KDE surrogate jointly over atoms and weights with L-BFGS.

    Atoms live on the domain through ``theta = from_unit(sigmoid(u))``;
    weights are ``softmax(z)``.  Returns a :class:`FitResult`; the prior is
    passed through :func:`refine_support` unless ``refine=False``.
    """
    init = np.atleast_2d(np.asarray(init, dtype=float))
    if not np.all(model.domain.contains(init, tol=1e-9)):
        raise ValueError("initial atoms must lie inside the domain")
    K, d = init.shape
    if weights is None:
        weights = np.full(K, 1.0 / K)
    v0 = _pack(model, init, np.asarray(weights, dtype=float))
    warnings = []
    cache = {}

    def objective(v):
        theta, lam, s = _unpack(model, v, K)
        try:
            value, g_theta, g_lam = it.entropy_kde(None, model, theta, lam)
        except ValueError as exc:
            warnings.append(f"objective failed: {exc}")
            return np.inf, np.zeros_like(v)
        if not np.isfinite(value):
            warnings.append("non-finite objective rejected")
            return np.inf, np.zeros_like(v)
        g_s = model.domain.unit_vjp(s, g_theta)
        g_u = g_s * s * (1 - s)
        g_z = lam * (g_lam - lam @ g_lam)
        grad = np.concatenate([g_u.ravel(), g_z])
        cache["v"], cache["f"], cache["g"] = v.copy(), value, grad
        return -value, -grad

    history = [objective(v0)[0] * -1]

    def callback(vk):
        if "v" in cache and np.array_equal(cache["v"], vk):
            history.append(cache["f"])
        else:
            history.append(-objective(vk)[0])

    bounds = [(-U_BOUND, U_BOUND)] * (K * d) + [(None, None)] * K
    res = minimize(objective, v0, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
                   options={"maxiter": config.max_iters, "gtol": config.grad_tol,
                            "ftol": 1e-15, "maxcor": 20})
    _, grad = objective(res.x)
    # bounded coordinates pressing outward are stationary
    proj = _projected(res.x, -grad, bounds)
    grad_norm = float(np.max(np.abs(proj))) if proj.size else 0.0
    theta, lam, _ = _unpack(model, res.x, K)
    converged = grad_norm < config.grad_tol
    prior = AtomicPrior(theta, lam)
    if refine:
        prior = refine_support(prior, model, config)
    return FitResult(prior, converged, int(res.nit), grad_norm, history, warnings)


def _projected(x, g, bounds):
    out = g.copy()
    for i, (lo, hi) in enumerate(bounds):
        if lo is not None and x[i] <= lo and g[i] > 0:
            out[i] = 0.0
        if hi is not None and x[i] >= hi and g[i] < 0:
            out[i] = 0.0
    return out


def _log_kernel_rows(Yq, Y, eps, sigma):
    """``log p(x_qj | y_b) - log p(x_qj | y_q)`` without weights, shape ``(Q, n, K)``."""
    d2 = np.maximum(np.sum(Yq**2, 1)[:, None] + np.sum(Y**2, 1)[None, :] - 2 * Yq @ Y.T, 0.0)
    Eq = eps @ Yq.T / sigma
    Eb = eps @ Y.T / sigma
    return -d2[:, None, :] / (2 * sigma**2) - Eq.T[:, :, None] + Eb[None, :, :]


# columns below this weight change the log-sum-exp by less than round-off
NEGLIGIBLE_WEIGHT = 1e-20


def _divergences(A_chunks, logw):
    """``D_a`` for every atom from precomputed kernel blocks."""
    live = logw > math.log(NEGLIGIBLE_WEIGHT)
    cols = np.flatnonzero(live) if not live.all() else slice(None)
    out = []
    for block in A_chunks:
        out.append(-np.mean(logsumexp(block[..., cols] + logw[cols][None, None, :], axis=-1), axis=1))
    return np.concatenate(out)


def blahut_arimoto_weights(model, atoms, tol=1e-3, n_mc=1024, seed=0, max_iters=5000,
                           weights=None):
    """Capacity-achieving weights on a fixed support by Blahut-Arimoto.

    ``D_a = D_KL[p(x|theta_a) || p(x)]`` is estimated with shared noise
    draws, so the iteration is deterministic.  Stops when the capacity
    bracket ``[I, max_a D_a]`` is narrower than ``tol``.  Atoms leaving the
    support lose weight only geometrically, so a few may still carry small
    weight with ``D_a < I``.  Returns a :class:`BAResult`, which unpacks as
    ``(weights, capacity)``.
    """
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    K = atoms.shape[0]
    if K == 1:
        return BAResult(np.ones(1), 0.0, True, 0, np.zeros(1))
    Y = predict(model, atoms)
    eps = it.standard_noise(seed, n_mc, model.m)
    chunk = max(1, 20_000_000 // (n_mc * K))
    A = [_log_kernel_rows(Y[i:i + chunk], Y, eps, model.sigma) for i in range(0, K, chunk)]
    lam = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, float) / np.sum(weights)
    converged = False
    best = (-np.inf, lam, None)
    for iteration in range(1, max_iters + 1):
        with np.errstate(divide="ignore"):
            logw = np.log(lam)
        D = _divergences(A, logw)
        I = float(lam @ D)
        if I > best[0]:
            best = (I, lam.copy(), D)
        # capacity lies in [I, max D]
        if np.max(D) - I < tol:
            converged = True
            break
        logits = logw + D
        lam = np.exp(logits - logsumexp(logits))
    if not converged:
        I, lam, D = best
        log.warning("Blahut-Arimoto stopped after %d iterations without meeting tol", max_iters)
    return BAResult(lam, I, converged, iteration, D)


def blahut_arimoto_discrete(channel, tol=1e-10, max_iters=100_000):
    """Capacity (nats) of a discrete memoryless channel ``channel[a, x] = p(x | a)``."""
    P = np.asarray(channel, dtype=float)
    if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0):
        raise ValueError("channel rows must be probability vectors")
    K = P.shape[0]
    lam = np.full(K, 1.0 / K)
    with np.errstate(divide="ignore", invalid="ignore"):
        logP = np.where(P > 0, np.log(P), -np.inf)
    for iteration in range(1, max_iters + 1):
        px = lam @ P
        with np.errstate(divide="ignore", invalid="ignore"):
            D = np.sum(np.where(P > 0, P * (logP - np.log(px)[None, :]), 0.0), axis=1)
        I = float(lam @ D)
        if np.max(D) - I < tol:
            return BAResult(lam, I, True, iteration, D)
        lam = lam * np.exp(D - D.max())
        lam /= lam.sum()
    return BAResult(lam, I, False, max_iters, D)


def merge_close_atoms(prior, model, radius):
    """Merge atoms closer than ``radius`` (in units of sigma) in prediction space.

    Greedy by descending weight; a merged atom sits at the weight-averaged
    position of its group.
    """
    atoms, w = prior.atoms, prior.weights
    if radius <= 0 or len(w) == 1:
        return prior
    Y = predict(model, atoms) / model.sigma
    order = np.argsort(-w, kind="stable")
    taken = np.zeros(len(w), dtype=bool)
    new_atoms, new_w = [], []
    for a in order:
        if taken[a]:
            continue
        group = [b for b in order if not taken[b] and np.linalg.norm(Y[a] - Y[b]) < radius]
        taken[group] = True
        gw = w[group]
        centre = (gw @ atoms[group]) / gw.sum() if gw.sum() > 0 else atoms[a]
        if not model.domain.contains(centre, tol=1e-9):
            centre = atoms[a]
        new_atoms.append(centre)
        new_w.append(gw.sum())
    return AtomicPrior(np.array(new_atoms), np.array(new_w))


def refine_support(prior, model, config=OptimizerConfig()):
    """Prune light atoms, merge near-duplicates, then re-weight by Blahut-Arimoto."""
    keep = prior.weights >= config.prune_weight
    if not np.any(keep):
        raise ValueError("every atom fell below prune_weight")
    pruned = AtomicPrior(prior.atoms[keep], prior.weights[keep])
    merged = merge_close_atoms(pruned, model, config.merge_radius)
    ba = blahut_arimoto_weights(model, merged.atoms, config.ba_tol, config.n_mc, config.seed,
                                config.ba_max_iters, weights=merged.weights)
    keep = ba.weights > 1e-9
    return AtomicPrior(merged.atoms[keep], ba.weights[keep])


def fit_optimal_prior(model, config=OptimizerConfig(), init=None):
    """Full synthesis pipeline; see the module docstring.

    Augmentation stops once the worst-case bias found on the audit
    candidates is below ``augment_threshold_bits``.
    """
    K = config.K_init or default_K(model)
    if init is None:
        init = best_candidate_init(model, K, config.oversample, config.seed)
    result = maximize_kde_mi(model, init, config)
    prior = result.prior
    cand = it.candidate_points(model, seed=config.seed)
    for round_ in range(config.augment_rounds):
        worst = it.worst_case_bias(prior, model, np.vstack([prior.atoms, cand]),
                                   n=config.n_mc, seed=config.seed + 1)
        if it.to_bits(worst.value) < config.augment_threshold_bits:
            break
        log.info("augmentation round %d: B = %.3f bits", round_, it.to_bits(worst.value))
        grown = prior.with_atoms(worst.theta, [1.0 / (prior.K + 1)])
        prior = refine_support(grown, model, config)
    return replace(result, prior=prior)
