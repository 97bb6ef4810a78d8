"""Ensemble sampling, alpha-ladder evidence bounds and posterior deviation.

The sampler alternates affine-invariant stretch and differential-evolution
moves on two half-ensembles updated in turn.  Bounded domains are sampled in
logit coordinates so that walkers never meet a wall.  Evidence and bias pressure of continuous priors come
from a ladder of tempered distributions ``p(theta) p(x|theta)^alpha``
bridging the prior (``alpha = 0``) to the posterior (``alpha = 1``).  The
forward product of ratios and the backward one bracket ``log p(x)``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import log_expit, logsumexp

from . import infotheory as it
from .models import ModelError, jacobian, predict
from .priors import AtomicPrior, LogDensity

log = logging.getLogger(__name__)

MAX_BURN_IN = 5000
MIN_ESS = 10.0


# ----------------------------------------------------------------------------
# ensemble sampler

@dataclass
class EnsembleResult:
    """Post-burn-in chain of an ensemble run.

    ``chain`` has shape ``(steps, W, d)`` and ``log_density`` ``(steps, W)``.
    """

    chain: np.ndarray
    log_density: np.ndarray
    acceptance: float
    stagnated: bool
    burn_in: int
    extra: dict = field(default_factory=dict)

    @property
    def samples(self):
        return self.chain.reshape(-1, self.chain.shape[-1])

    @property
    def last(self):
        return self.chain[-1], self.log_density[-1]

    def to_csv(self, path):
        steps, W, d = self.chain.shape
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["walker_id", "step", *[f"theta_{i + 1}" for i in range(d)],
                             "log_density"])
            for s in range(steps):
                for w in range(W):
                    writer.writerow([w, self.burn_in + s, *(repr(float(v)) for v in self.chain[s, w]),
                                     repr(float(self.log_density[s, w]))])


def default_walkers(d):
    return max(2 * d + 2, 32)


def _initial_walkers(logdensity, domain, W, rng, max_tries=200):
    walkers = np.empty((0, domain.d))
    lp = np.empty(0)
    for _ in range(max_tries):
        cand = domain.sample(rng, 4 * W)
        lc = logdensity(cand)
        ok = np.isfinite(lc)
        walkers = np.vstack([walkers, cand[ok]])
        lp = np.concatenate([lp, lc[ok]])
        if walkers.shape[0] >= W:
            return walkers[:W], lp[:W]
    raise ValueError("log-density is not finite anywhere the sampler looked")


def _stretch_sweep(walkers, lp, logdensity, rng, a):
    """One sweep of stretch moves; updates in place, returns accepted count."""
    W, d = walkers.shape
    half = W // 2
    accepted = 0
    for first, second in ((slice(0, half), slice(half, W)), (slice(half, W), slice(0, half))):
        active = walkers[first]
        partners = walkers[second]
        n = active.shape[0]
        z = ((a - 1.0) * rng.random(n) + 1.0) ** 2 / a
        pick = rng.integers(0, partners.shape[0], n)
        proposal = partners[pick] + z[:, None] * (active - partners[pick])
        lp_new = logdensity(proposal)
        log_accept = (d - 1) * np.log(z) + lp_new - lp[first]
        accept = np.log(rng.random(n)) < log_accept
        accept &= np.isfinite(lp_new)
        idx = np.arange(W)[first][accept]
        walkers[idx] = proposal[accept]
        lp[idx] = lp_new[accept]
        accepted += int(accept.sum())
    return accepted


def _de_sweep(walkers, lp, logdensity, rng, a=None):
    """One sweep of differential-evolution moves ``x + gamma (x_i - x_j)``.

    The pair is drawn from the other half-ensemble, so the proposal is
    symmetric.  ``gamma`` is the usual ``2.38 / sqrt(2d)`` with 10% jitter.
    """
    W, d = walkers.shape
    half = W // 2
    gamma0 = 2.38 / math.sqrt(2 * d)
    accepted = 0
    for first, second in ((slice(0, half), slice(half, W)), (slice(half, W), slice(0, half))):
        active = walkers[first]
        partners = walkers[second]
        n, n_p = active.shape[0], partners.shape[0]
        i = rng.integers(0, n_p, n)
        j = (i + rng.integers(1, n_p, n)) % n_p
        gamma = gamma0 * (1.0 + 0.1 * rng.standard_normal(n))
        proposal = active + gamma[:, None] * (partners[i] - partners[j])
        lp_new = logdensity(proposal)
        accept = (np.log(rng.random(n)) < lp_new - lp[first]) & np.isfinite(lp_new)
        idx = np.arange(W)[first][accept]
        walkers[idx] = proposal[accept]
        lp[idx] = lp_new[accept]
        accepted += int(accept.sum())
    return accepted


MOVES = {
    "stretch": (_stretch_sweep,),
    "de": (_de_sweep,),
    "mix": (_stretch_sweep, _de_sweep),
}

# walkers are kept this far inside the open cube when mapped to logits
UNIT_EPS = 1e-12


class LogitTarget:
    """A density on a bounded domain seen in ``z = logit(to_unit(theta))``.

    The value includes the log-Jacobian of ``theta(z)``, so draws of ``z``
    map back to draws of the original density.
    """

    def __init__(self, logdensity, domain):
        self.logdensity = logdensity
        self.domain = domain
        self.log_width = np.log(domain.hi - domain.lo)
        d = domain.d
        # nested wedge map: d theta_mu / d s_mu = width * prod_{nu < mu} s_nu
        self.s_power = np.arange(d - 1, -1, -1.0) if domain.ordered else np.zeros(d)

    def theta(self, z):
        return self.domain.from_unit(np.exp(log_expit(z)))

    def z(self, theta):
        s = np.clip(self.domain.to_unit(theta), UNIT_EPS, 1.0 - UNIT_EPS)
        return np.log(s) - np.log1p(-s)

    def log_jacobian(self, z):
        ls, l1s = log_expit(z), log_expit(-z)
        return np.sum(self.log_width + ls + l1s + self.s_power * ls, axis=-1)

    def __call__(self, z):
        z = np.atleast_2d(z)
        lp = self.logdensity(self.theta(z))
        return np.where(np.isfinite(lp), lp + self.log_jacobian(z), -np.inf)


def integrated_time(series, c=5.0):
    """Integrated autocorrelation time with an automatic window.

    ``series`` is ``(T,)`` or ``(T, W)``; for several walkers the
    autocorrelation function is averaged across them before windowing.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    x = x - x.mean(axis=0)
    if n < 4 or not np.any(x):
        return 1.0
    f = np.fft.rfft(x, n=2 * n, axis=0)
    acf = np.fft.irfft(f * np.conj(f), axis=0)[:n]
    var = acf[0]
    acf = acf[:, var > 0] / var[var > 0]
    if acf.size == 0:
        return 1.0
    acf = acf.mean(axis=1)
    taus = 2.0 * np.cumsum(acf) - 1.0
    window = np.arange(n) < c * taus
    m = int(np.argmin(window)) if not np.all(window) else n - 1
    return float(max(1.0, taus[m]))


def ensemble_sample(logdensity, W=None, steps=1000, burn_in=None, seed=0, init=None,
                    a=2.0, thin=1, domain=None, n_draws=None, moves="mix", transform="logit"):
    """Affine-invariant ensemble sampling of an unnormalized log-density.

    Parameters
    ----------
    logdensity : callable
        Batch log-density ``(n, d) -> (n,)``; ``-inf`` marks excluded points.
        A :class:`LogDensity` carries its own domain.
    W : int, optional
        Walker count, default ``max(2d + 2, 32)``; must be even and ``>= 2d``.
    steps : int
        Recorded sweeps after burn-in.
    burn_in : int, optional
        Discarded sweeps.  By default a pilot run estimates the
        autocorrelation time ``tau``, doubling from 200 sweeps until it
        spans ``50 tau`` (at most 5000); burn-in is the pilot length.
    init : array, optional
        Starting walkers ``(W, d)``; otherwise uniform draws from the domain
        with finite density.
    a : float
        Stretch scale.
    moves : {"mix", "stretch", "de"}
        Sweep types; ``"mix"`` alternates stretch and differential-evolution
        sweeps.  Differential evolution keeps mixing in higher dimension,
        where the stretch move alone slows down sharply.
    transform : {"logit", None}
        With a domain, ``"logit"`` samples in unbounded logit coordinates
        (see :class:`LogitTarget`).  ``None`` samples ``theta`` directly and
        rejects proposals outside the domain.
    thin : int
        Keep every ``thin``-th sweep.
    n_draws : int, optional
        Return about this many nearly independent draws instead: ``thin``
        becomes the ceiling of the autocorrelation time measured on the
        burn-in (a pilot of at least 1000 sweeps), and ``steps`` is set to
        deliver ``n_draws`` after thinning.

    Returns
    -------
    EnsembleResult
    """
    domain = domain if domain is not None else getattr(logdensity, "domain", None)
    if moves not in MOVES:
        raise ValueError(f"moves must be one of {sorted(MOVES)}")
    sweeps = MOVES[moves]
    rng = np.random.default_rng(seed)
    reparam = None
    if transform == "logit" and domain is not None:
        reparam = LogitTarget(logdensity, domain)
    elif transform not in ("logit", None):
        raise ValueError("transform must be 'logit' or None")
    if init is not None and reparam is not None:
        init = reparam.z(np.array(init, dtype=float, ndmin=2))
    elif init is None and reparam is not None:
        W = default_walkers(domain.d) if W is None else W
        theta0, _ = _initial_walkers(logdensity, domain, W, rng)
        init = reparam.z(theta0)
    target = reparam if reparam is not None else logdensity
    if init is not None:
        walkers = np.array(init, dtype=float, ndmin=2)
        d = walkers.shape[1]
        W = walkers.shape[0] if W is None else W
        if walkers.shape[0] != W:
            raise ValueError("init must have one row per walker")
        lp = target(walkers)
        if not np.any(np.isfinite(lp)):
            raise ValueError("no initial walker has finite log-density")
        bad = ~np.isfinite(lp)
        if np.any(bad):
            good = np.flatnonzero(~bad)
            walkers[bad] = walkers[rng.choice(good, bad.sum())]
            lp[bad] = target(walkers[bad])
    else:
        if domain is None:
            raise ValueError("need init or a domain to place walkers")
        d = domain.d
        W = default_walkers(d) if W is None else W
        walkers, lp = _initial_walkers(logdensity, domain, W, rng)
    if W < 2 * d or W % 2:
        raise ValueError(f"W must be even and at least 2d = {2 * d}")

    sweep_count = 0

    def sweep():
        nonlocal sweep_count
        move = sweeps[sweep_count % len(sweeps)]
        sweep_count += 1
        return move(walkers, lp, target, rng, a)

    done = 0
    tau = None
    if burn_in is None or n_draws is not None:
        # the pilot doubles until it spans 50 autocorrelation times
        pilot = max(1000 if n_draws is not None else 200, burn_in or 0)
        trace = []
        while True:
            while len(trace) < pilot:
                sweep()
                trace.append(walkers.copy())
            tail = np.array(trace[pilot // 2:])
            tau = max(integrated_time(tail[:, :, j]) for j in range(d))
            if pilot >= 50 * tau or pilot >= MAX_BURN_IN:
                break
            pilot = min(MAX_BURN_IN, 2 * pilot)
        done = pilot
        if burn_in is None:
            burn_in = int(min(MAX_BURN_IN, max(pilot, 10 * tau)))
    for _ in range(max(0, burn_in - done)):
        sweep()
    if n_draws is not None:
        thin = max(1, math.ceil(tau))
        steps = thin * math.ceil(n_draws / W)

    kept = max(1, steps // thin)
    chain = np.empty((kept, W, d))
    lps = np.empty((kept, W))
    acc_trace = np.empty(steps)
    k = 0
    for s in range(steps):
        acc_trace[s] = sweep() / W
        if (s + 1) % thin == 0 and k < kept:
            chain[k] = walkers
            lps[k] = lp
            k += 1
    window = min(100, steps)
    stagnated = bool(np.mean(acc_trace[-window:]) < 0.01)
    if stagnated:
        log.warning("ensemble stagnated: acceptance below 1%% over the last %d sweeps", window)
    chain, lps = chain[:k], lps[:k]
    if reparam is not None:
        lps = lps - reparam.log_jacobian(chain)
        chain = reparam.theta(chain)
    return EnsembleResult(chain, lps, float(acc_trace.mean()), stagnated, burn_in,
                          {"thin": thin, "tau_burn_in": tau, "moves": moves,
                           "transform": transform if reparam is not None else None})


# ----------------------------------------------------------------------------
# likelihood helpers

def safe_predict(model, theta):
    """Predictions with failed evaluations marked, returns ``(y, ok)``."""
    theta = np.atleast_2d(theta)
    try:
        return predict(model, theta), np.ones(theta.shape[0], dtype=bool)
    except ModelError:
        y = np.zeros((theta.shape[0], model.m))
        ok = np.zeros(theta.shape[0], dtype=bool)
        for i, th in enumerate(theta):
            try:
                y[i] = predict(model, th)
                ok[i] = True
            except ModelError:
                pass
        return y, ok


def loglike_from_predictions(model, x, y):
    """Gaussian log-likelihood rows for data ``x`` (``(m,)`` or ``(n_x, m)``)."""
    x = np.asarray(x, dtype=float)
    norm = 0.5 * model.m * math.log(2 * math.pi * model.sigma**2)
    if x.ndim == 1:
        return -np.sum((y - x) ** 2, axis=-1) / (2 * model.sigma**2) - norm
    d2 = np.sum(x**2, 1)[:, None] + np.sum(y**2, 1)[None, :] - 2 * x @ y.T
    return -np.maximum(d2, 0.0) / (2 * model.sigma**2) - norm


class TemperedTarget:
    """``log p(theta) + alpha log p(x | theta)``.

    A prior with a ``joint`` path (Jeffreys) shares its model evaluation
    with the likelihood, so each point costs one solve.
    """

    def __init__(self, prior, model, x, alpha):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.prior = prior
        self.model = model
        self.x = np.asarray(x, dtype=float)
        self.alpha = float(alpha)
        self.domain = prior.domain

    def __call__(self, theta):
        theta = np.atleast_2d(theta)
        joint = getattr(self.prior, "joint", None)
        if self.alpha == 0 or joint is None:
            out = self.prior(theta)
            live = np.isfinite(out)
            if self.alpha > 0 and np.any(live):
                y, ok = safe_predict(self.model, theta[live])
                ll = np.where(ok, loglike_from_predictions(self.model, self.x, y), -np.inf)
                out[live] = out[live] + self.alpha * ll
            return out
        out = np.full(theta.shape[0], -np.inf)
        inside = self.domain.contains(theta)
        if np.any(inside):
            lp, y = joint(theta[inside])
            ok = np.isfinite(lp)
            ll = loglike_from_predictions(self.model, self.x, np.nan_to_num(y))
            out[inside] = np.where(ok, lp + self.alpha * ll, -np.inf)
        return out


def sample_tempered(prior, model, x, alpha, W=None, steps=1000, burn_in=None, seed=0,
                    init=None, thin=1):
    """Ensemble draws from ``p(theta) p(x|theta)^alpha``."""
    target = TemperedTarget(prior, model, x, alpha)
    return ensemble_sample(target, W, steps, burn_in, seed, init, thin=thin)


# ----------------------------------------------------------------------------
# alpha ladder

@dataclass(frozen=True)
class BennettSchedule:
    """Ladder ``0 = alpha_0 < ... < alpha_n = 1`` with per-rung sample budget."""

    alphas: tuple
    samples_per_rung: int = 400
    burn_in: int = 200
    walkers: int | None = None
    anchor_x0: tuple | None = None

    def __post_init__(self):
        a = tuple(float(v) for v in self.alphas)
        if len(a) < 2 or a[0] != 0.0 or a[-1] != 1.0 or any(y <= x for x, y in zip(a, a[1:])):
            raise ValueError("alphas must increase strictly from 0 to 1")
        if self.samples_per_rung < 1:
            raise ValueError("samples_per_rung must be positive")
        object.__setattr__(self, "alphas", a)

    @property
    def n(self):
        return len(self.alphas) - 1

    @classmethod
    def geometric(cls, n=30, alpha_min=1e-4, **kw):
        """``alpha_0 = 0`` followed by ``n`` geometrically spaced values ending at 1."""
        if n < 1:
            raise ValueError("need at least one rung")
        if n == 1:
            return cls((0.0, 1.0), **kw)
        return cls((0.0, *np.geomspace(alpha_min, 1.0, n)), **kw)

    @classmethod
    def from_sigmas(cls, sigmas, sigma, **kw):
        """Ladder equivalent to a sequence of larger noise levels.

        Tempering a Gaussian likelihood by ``alpha`` is the same as widening
        its noise to ``sigma / sqrt(alpha)``.
        """
        larger = sorted({float(s) for s in sigmas if s > sigma}, reverse=True)
        return cls((0.0, *[(sigma / s) ** 2 for s in larger], 1.0), **kw)

    def with_anchor(self, x0):
        return BennettSchedule(self.alphas, self.samples_per_rung, self.burn_in, self.walkers,
                               tuple(float(v) for v in x0))


@dataclass
class LadderRun:
    """Samples from every rung at one anchor ``x0``, with their predictions.

    ``thetas[i]`` has shape ``(T, W, d)``; ``predictions[i]`` is flattened
    to ``(T * W, m)`` with NaN rows where the model could not be evaluated.
    """

    alphas: np.ndarray
    x0: np.ndarray
    thetas: list
    predictions: list
    acceptance: list

    def loglike(self, model, x):
        out = []
        for y in self.predictions:
            ll = loglike_from_predictions(model, x, np.nan_to_num(y))
            bad = np.isnan(y[:, 0])
            out.append(np.where(bad, -np.inf, ll) if np.ndim(ll) == 1
                       else np.where(bad[None, :], -np.inf, ll))
        return out


def run_ladder(prior, model, x0, schedule, seed=0):
    """Sample each rung in turn, warm-starting from the previous rung's walkers.

    Seeds for the rungs derive from ``numpy.random.SeedSequence(seed)``.
    """
    x0 = np.asarray(x0, dtype=float)
    seeds = np.random.SeedSequence(seed).spawn(schedule.n + 1)
    thetas, preds, accs = [], [], []
    init = None
    W = schedule.walkers or default_walkers(prior.d)
    for i, alpha in enumerate(schedule.alphas):
        # the first rung is burned in from scratch; later rungs move little
        burn = schedule.burn_in * (3 if i == 0 else 1)
        steps = max(2, math.ceil(schedule.samples_per_rung / W))
        res = sample_tempered(prior, model, x0, alpha, W, steps, burn,
                              np.random.default_rng(seeds[i]).integers(2**63), init)
        init = res.chain[-1]
        y, ok = safe_predict(model, res.samples)
        y[~ok] = np.nan
        thetas.append(res.chain)
        preds.append(y)
        accs.append(res.acceptance)
    return LadderRun(np.array(schedule.alphas), x0, thetas, preds, accs)


def _batch_se(values, fn, n_batches=10):
    """Batch-means standard error of ``fn`` applied to contiguous blocks."""
    n = len(values)
    if n < 2 * n_batches:
        return 0.0
    blocks = np.array_split(values, n_batches)
    est = np.array([fn(b) for b in blocks])
    return float(np.std(est, ddof=1) / math.sqrt(n_batches))


def _ess(logw):
    w = np.exp(logw - np.max(logw))
    return float(w.sum() ** 2 / np.sum(w**2))


def _log_ratio(num, den, T):
    """``log(sum e^num / sum e^den)`` over ``T`` sweeps, with a delta-method SE.

    Both arguments are flattened ``(T * W,)`` arrays.  The standard error
    treats walkers as parallel chains whose autocorrelation time is taken
    from the walker-averaged autocorrelation function.
    """
    cn, cd = np.max(num), np.max(den)
    A = np.exp(num - cn).reshape(T, -1)
    B = np.exp(den - cd).reshape(T, -1)
    est = math.log(A.sum()) - math.log(B.sum()) + cn - cd
    if T < 4:
        return est, 0.0
    z = A / A.mean() - B / B.mean()
    if np.allclose(z, 0.0):
        return est, 0.0
    tau = integrated_time(z)
    return est, float(np.std(z, ddof=1) * math.sqrt(tau / z.size))


@dataclass
class BennettResult:
    lower: float
    upper: float
    forward: float
    backward: float
    per_rung_ess: list
    alphas: list
    warnings: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.lower, self.upper))

    def to_dict(self):
        return {"alphas": list(self.alphas), "per_rung_ess": list(self.per_rung_ess),
                "lower": self.lower, "upper": self.upper,
                "forward": self.forward, "backward": self.backward}


def ladder_log_evidence(run, model, x, reweight=True):
    """Forward and backward estimates of ``log p(x)`` from a ladder run.

    When ``x`` differs from the run's anchor, rung samples are reweighted by
    ``(p(x|theta) / p(x0|theta))^alpha_i``.  Returns
    ``(forward, backward, se_forward, se_backward, ess)`` where ``ess``
    lists the importance effective sample size of every ratio.
    """
    lx = run.loglike(model, x)
    l0 = run.loglike(model, run.x0) if reweight else lx
    a = run.alphas
    fwd = bwd = 0.0
    var_f = var_b = 0.0
    ess_all = []
    for i in range(len(a)):
        T = run.thetas[i].shape[0]
        with np.errstate(invalid="ignore"):
            logw = a[i] * (lx[i] - l0[i]) if a[i] > 0 else np.zeros_like(lx[i])
        logw = np.where(np.isfinite(lx[i]), logw, -np.inf)
        if i < len(a) - 1:
            num = logw + (a[i + 1] - a[i]) * lx[i]
            est, se = _log_ratio(num, logw, T)
            fwd += est
            var_f += se**2
            ess_all.append(min(_ess(num), _ess(logw)))
        if i > 0:
            num = logw - (a[i] - a[i - 1]) * np.where(np.isfinite(lx[i]), lx[i], 0.0)
            num = np.where(np.isfinite(lx[i]), num, -np.inf)
            est, se = _log_ratio(num, logw, T)
            bwd -= est
            var_b += se**2
            ess_all.append(_ess(num))
    return fwd, bwd, math.sqrt(var_f), math.sqrt(var_b), ess_all


def _bracket(f, b, se_f, se_b, ess, warnings, what):
    lo = min(f - 3 * se_f, b - 3 * se_b)
    hi = max(f + 3 * se_f, b + 3 * se_b)
    if min(ess) < MIN_ESS:
        gap = abs(f - b) + 3 * (se_f + se_b)
        lo, hi = lo - gap, hi + gap
        msg = f"{what}: effective sample size {min(ess):.1f} below {MIN_ESS:g}; bounds widened"
        warnings.append(msg)
        log.warning(msg)
    return lo, hi


def bennett_log_evidence(prior, model, x, schedule=None, seed=0, run=None):
    """Bracket ``log p(x)`` between the forward and backward ladder estimates.

    Each estimate carries a batch-means standard error; the interval is the
    union of ``estimate +- 3 se`` for both.
    """
    schedule = schedule or BennettSchedule.geometric()
    x = np.asarray(x, dtype=float)
    if run is None:
        run = run_ladder(prior, model, x, schedule, seed)
    f, b, se_f, se_b, ess = ladder_log_evidence(run, model, x, reweight=False)
    warnings = []
    lo, hi = _bracket(f, b, se_f, se_b, ess, warnings, "evidence")
    return BennettResult(lo, hi, f, b, _per_rung(ess, len(run.alphas)), list(run.alphas), warnings)


def _per_rung(ess, n_alpha):
    # forward entries for rungs 0..n-1 interleaved with backward entries for 1..n
    out = [np.inf] * n_alpha
    k = 0
    for i in range(n_alpha):
        if i < n_alpha - 1:
            out[i] = min(out[i], ess[k])
            k += 1
        if i > 0:
            out[i] = min(out[i], ess[k])
            k += 1
    return [float(v) for v in out]


def kl_bennett(phi, prior, model, schedule=None, n_x=64, seed=0, run=None):
    """Bracket ``D_KL[p(x|phi) || p(x)]`` with one ladder at ``x0 = y(phi)``.

    Draws ``x_k = y(phi) + sigma eps_k`` reuse the ladder through importance
    weights.  The estimate averages ``log p(x_k|phi) - log p(x_k)``, which
    fluctuates far less across draws than ``log p(x_k)`` alone.

    Returns ``(lower, upper, forward, backward, min_ess, warnings)``.
    """
    schedule = schedule or BennettSchedule.geometric()
    phi = np.asarray(phi, dtype=float)
    y0 = predict(model, phi)
    if run is None:
        run = run_ladder(prior, model, y0, schedule, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    eps = rng.standard_normal((n_x, model.m))
    xs = y0 + model.sigma * eps
    l_phi = -0.5 * np.sum(eps**2, axis=1) - 0.5 * model.m * math.log(2 * math.pi * model.sigma**2)
    fs, bs, ses, ess_x = [], [], [], []
    for x in xs:
        f, b, se_f, se_b, ess = ladder_log_evidence(run, model, x)
        fs.append(f)
        bs.append(b)
        ses.append(max(se_f, se_b))
        ess_x.append(min(ess))
    ess_min = float(min(ess_x))
    # forward underestimates log p(x) in expectation, so it bounds D from above
    df = l_phi - np.array(fs)
    db = l_phi - np.array(bs)
    D_f, D_b = float(df.mean()), float(db.mean())
    se_x = max(df.std(ddof=1), db.std(ddof=1)) / math.sqrt(n_x) if n_x > 1 else 0.0
    # ladder errors are correlated across draws; the mean of the per-draw
    # errors bounds the error of their average whatever the correlation
    se = math.sqrt(se_x**2 + np.mean(ses) ** 2)
    warnings = []
    # a few tail draws with poor overlap move the average by O(1/n_x) only
    ess_typ = float(np.quantile(ess_x, 0.1))
    lo, hi = _bracket(D_b, D_f, se, se, [ess_typ], warnings, "bias pressure")
    return lo, hi, D_f, D_b, ess_min, warnings


def mi_continuous_bennett(prior, model, n_theta=16, schedule_template=None, seed=0, n_x=32,
                          prior_samples=None):
    """Bracket ``I(X; Theta) = E_theta D_KL[p(x|theta) || p(x)]`` for a continuous prior.

    ``n_theta`` prior draws each get their own ladder; the interval is the
    mean of the per-draw brackets widened by 3 standard errors of their
    spread.  Returns a :class:`BennettResult` in nats.
    """
    schedule = schedule_template or BennettSchedule.geometric()
    ss = np.random.SeedSequence(seed)
    s_draw, s_ladders = ss.spawn(2)
    if prior_samples is None:
        res = ensemble_sample(prior, seed=int(np.random.default_rng(s_draw).integers(2**63)),
                              n_draws=4 * n_theta)
        prior_samples = res.samples
    rng = np.random.default_rng(s_draw)
    pick = prior_samples[rng.choice(len(prior_samples), n_theta, replace=len(prior_samples) < n_theta)]
    lows, highs, fs, bs, warnings, ess = [], [], [], [], [], []
    for th, sub in zip(pick, s_ladders.spawn(n_theta)):
        lo, hi, f, b, e, w = kl_bennett(th, prior, model, schedule, n_x,
                                        int(np.random.default_rng(sub).integers(2**63)))
        lows.append(lo)
        highs.append(hi)
        fs.append(f)
        bs.append(b)
        ess.append(e)
        warnings.extend(w)
    spread = max(np.std(fs, ddof=1), np.std(bs, ddof=1)) / math.sqrt(n_theta) if n_theta > 1 else 0.0
    lo = float(np.mean(lows) - 3 * spread)
    hi = float(np.mean(highs) + 3 * spread)
    # mutual information is non-negative
    return BennettResult(max(lo, 0.0), hi, float(np.mean(fs)), float(np.mean(bs)),
                         ess, list(schedule.alphas), warnings)


def mi_continuous_mixture(prior_samples, model, n_eval=None, seed=0):
    """Bracket the MI of a continuous prior from a sample of it.

    With ``x_j`` drawn around the prediction of draw ``j``, the mixture of
    all draws (including ``j``) over-weights the true component and biases
    the estimate low, while leaving ``j`` out biases it high (Jensen).  The
    interval spans both, widened by three standard errors.  Returns a
    :class:`BennettResult` whose forward/backward fields hold the two
    estimates.
    """
    th = np.atleast_2d(prior_samples)
    Y, ok = safe_predict(model, th)
    Y = Y[ok]
    N = Y.shape[0]
    if N < 2:
        raise ValueError("need at least two prior draws")
    rng = np.random.default_rng(seed)
    idx = np.arange(N) if n_eval is None or n_eval >= N else np.sort(rng.choice(N, n_eval, replace=False))
    eps = rng.standard_normal((idx.size, model.m))
    x = Y[idx] + model.sigma * eps
    ll = loglike_from_predictions(model, x, Y)  # (n_eval, N)
    l_own = ll[np.arange(idx.size), idx]
    with_self = l_own - (logsumexp(ll, axis=1) - math.log(N))
    ll[np.arange(idx.size), idx] = -np.inf
    without = l_own - (logsumexp(ll, axis=1) - math.log(N - 1))
    lo_est, hi_est = float(with_self.mean()), float(without.mean())
    se = max(with_self.std(ddof=1), without.std(ddof=1)) / math.sqrt(idx.size)
    return BennettResult(max(0.0, lo_est - 3 * se), hi_est + 3 * se, lo_est, hi_est,
                         [float(N)], [], [])


def bias_pressure_bennett(phi, prior, model, schedule=None, n_x=64, seed=0, mi=None):
    """Bias pressure of a continuous prior at ``phi`` with ladder bounds.

    ``mi`` is an interval ``(lower, upper)`` for the prior's mutual
    information (nats) or a :class:`BennettResult`; it is computed by
    :func:`mi_continuous_bennett` when omitted.
    """
    if mi is None:
        mi = mi_continuous_bennett(prior, model, seed=seed + 1)
    mi_lo, mi_hi = tuple(mi)
    lo, hi, f, b, ess, warnings = kl_bennett(phi, prior, model, schedule, n_x, seed)
    for w in warnings:
        log.warning(w)
    centre = 0.5 * (f + b) - 0.5 * (mi_lo + mi_hi)
    return it.BiasValue(np.asarray(phi, float), centre, lo - mi_hi, hi - mi_lo,
                        0.5 * ((hi - lo) + (mi_hi - mi_lo)) / 6)


# ----------------------------------------------------------------------------
# continuous-prior audit

@dataclass
class ContinuousAudit:
    worst: it.BiasValue
    mi: tuple
    screened: np.ndarray
    screen_values: np.ndarray
    refined: list


def naive_bias_screen(candidates, prior_samples, model, n=256, seed=0):
    """Bias pressure treating prior draws as an equal-weight atomic prior.

    Cheap and biased in the far tails, where few prior draws sit near a
    candidate; used only to rank candidates for the ladder estimator.
    """
    atoms = AtomicPrior(prior_samples)
    values, _ = it.bias_pressure_batch(candidates, atoms, model, n, seed)
    return values


def audit_continuous(prior, model, candidates=None, n_prior=2000, top=4, schedule=None,
                     n_x=64, seed=0, mi=None):
    """Worst-case bias of a continuous prior: naive screen, then ladder bounds.

    ``n_prior`` thinned prior draws serve both the candidate screen and, unless
    ``mi`` is given, the mixture bracket on the prior's mutual information.
    """
    ss = np.random.SeedSequence(seed)
    s_prior, s_mi, s_top = ss.spawn(3)
    W = default_walkers(prior.d)
    res = ensemble_sample(prior, W, seed=int(np.random.default_rng(s_prior).integers(2**63)),
                          n_draws=n_prior)
    draws = res.samples
    if candidates is None:
        candidates = it.candidate_points(model, seed=seed)
    candidates = np.atleast_2d(candidates)
    # zero-density points such as coincident rates stay in: b is continuous
    # and the maximum often sits on the boundary of the support
    inside = prior.domain.contains(candidates, tol=1e-9)
    candidates = candidates[inside] if np.any(inside) else candidates
    y, ok = safe_predict(model, candidates)
    candidates = candidates[ok]
    screen = naive_bias_screen(candidates, draws, model, seed=seed)
    if mi is None:
        mi = mi_continuous_mixture(draws, model, seed=int(np.random.default_rng(s_mi).integers(2**63)))
    order = np.argsort(-screen, kind="stable")[:top]
    refined = []
    for k, sub in zip(order, s_top.spawn(len(order))):
        refined.append(bias_pressure_bennett(candidates[k], prior, model, schedule, n_x,
                                             int(np.random.default_rng(sub).integers(2**62)), mi))
    worst = max(refined, key=lambda b: b.value)
    return ContinuousAudit(worst, tuple(mi), candidates, screen, refined)


# ----------------------------------------------------------------------------
# maximum likelihood and posterior deviation

def max_likelihood_point(model, x, starts):
    """Best least-squares fit of ``y(theta)`` to ``x`` over several starts.

    Each start is refined by a trust-region Gauss-Newton solve in unit-cube
    coordinates (box bounds handled natively).  Ties keep the first start.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    if starts.shape[0] == 0:
        raise ValueError("need at least one start")
    x = np.asarray(x, dtype=float)
    dom = model.domain
    sig = model.sigma

    def resid(s):
        return (predict(model, dom.from_unit(s)) - x) / sig

    def jac(s):
        J = jacobian(model, dom.from_unit(s)) / sig
        return np.array([dom.unit_vjp(s, row) for row in J])

    best, best_cost = None, np.inf
    for th in starts:
        s0 = np.clip(dom.to_unit(th), 0.0, 1.0)
        try:
            res = least_squares(resid, s0, jac=jac, bounds=(0.0, 1.0), method="trf",
                                xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=500)
        except (ModelError, ValueError, FloatingPointError):
            continue
        if res.cost < best_cost:
            best, best_cost = dom.from_unit(res.x), res.cost
    if best is None:
        raise RuntimeError("every maximum-likelihood start failed")
    return best


@dataclass
class Deviation:
    value: float
    stderr: float
    theta_hat: np.ndarray
    y_hat: np.ndarray
    y_mean: np.ndarray


def posterior_deviation(x, prior, model, seed=0, steps=2000, burn_in=None, W=None, n_starts=8):
    """``|y(theta_hat) - E[y | x]| / sigma`` for an atomic or continuous prior."""
    x = np.asarray(x, dtype=float)
    if isinstance(prior, AtomicPrior):
        y = predict(model, prior.atoms)
        logw = np.log(prior.weights) + loglike_from_predictions(model, x, y)
        post = np.exp(logw - logsumexp(logw))
        y_mean = post @ y
        starts = prior.atoms[np.argsort(-logw, kind="stable")[:n_starts]]
        se = 0.0
    else:
        res = sample_tempered(prior, model, x, 1.0, W, steps, burn_in, seed)
        th = res.samples
        y, ok = safe_predict(model, th)
        y = y[ok]
        y_mean = y.mean(axis=0)
        ll = loglike_from_predictions(model, x, y)
        starts = th[ok][np.argsort(-ll, kind="stable")[:n_starts]]
        se = None
    theta_hat = max_likelihood_point(model, x, starts)
    y_hat = predict(model, theta_hat)
    value = float(np.linalg.norm(y_hat - y_mean) / model.sigma)
    if se is None:
        # batch means over the per-sweep ensemble average
        steps_kept, Wk = res.chain.shape[:2]
        per_step = y.reshape(steps_kept, Wk, -1).mean(axis=1) if ok.all() else y[None]
        direction = (y_hat - y_mean) / max(np.linalg.norm(y_hat - y_mean), 1e-300)
        proj = per_step @ direction / model.sigma
        se = _batch_se(proj, np.mean, n_batches=min(20, max(2, len(proj) // 5)))
    return Deviation(value, float(se), theta_hat, y_hat, y_mean)
