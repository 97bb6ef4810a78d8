"""Independent reference computations used by the test suite.

Nothing here calls the estimators under test; quadrature, closed forms and
extended precision only.
"""

import math

import mpmath
import numpy as np
from scipy import integrate
from scipy.special import logsumexp


def gauss_hermite(order):
    """Nodes and weights for E[f(z)], z ~ N(0, 1)."""
    z, w = np.polynomial.hermite_e.hermegauss(order)
    return z, w / w.sum()


def grid_mixture_kl(y_query, Yg, logw, sigma, order=16):
    """D_KL[N(y_q, s^2 I) || sum_g w_g N(y_g, s^2 I)] by tensor Gauss-Hermite (m = 2)."""
    z, wz = gauss_hermite(order)
    Z = np.array(np.meshgrid(z, z, indexing="ij")).reshape(2, -1).T
    WZ = np.outer(wz, wz).ravel()
    S = 1 + math.log(2 * math.pi * sigma**2)
    g2 = np.sum(Yg**2, axis=1)
    out = []
    for yq in np.atleast_2d(y_query):
        x = yq + sigma * Z
        log_px = np.empty(len(x))
        for i in range(0, len(x), 16):
            xb = x[i:i + 16]
            d2 = np.sum(xb**2, 1)[:, None] + g2[None, :] - 2 * xb @ Yg.T
            log_px[i:i + 16] = logsumexp(logw[None, :] - d2 / (2 * sigma**2), axis=1)
        log_px -= math.log(2 * math.pi * sigma**2)
        out.append(-S - WZ @ log_px)
    return np.array(out)


def log_gauss_mixture_mp(x, Y, w, sigma, dps=50):
    """log sum_a w_a N(x; y_a, sigma^2 I) in extended precision."""
    with mpmath.workdps(dps):
        m = len(x)
        tot = mpmath.mpf(0)
        for ya, wa in zip(Y, w):
            r2 = sum((mpmath.mpf(float(a)) - mpmath.mpf(float(b))) ** 2 for a, b in zip(x, ya))
            tot += mpmath.mpf(float(wa)) * mpmath.e ** (-r2 / (2 * mpmath.mpf(sigma) ** 2))
        norm = (2 * mpmath.pi * mpmath.mpf(sigma) ** 2) ** (mpmath.mpf(m) / 2)
        return float(mpmath.log(tot / norm))


def det_mp(M, dps=60):
    with mpmath.workdps(dps):
        return mpmath.det(mpmath.matrix(M.tolist()))


def exp_decay_jacobian_mp(phi, dps=60):
    """J[t, mu] = t phi_mu^(t-1) / d in the phi-coordinates, extended precision."""
    d = len(phi)
    with mpmath.workdps(dps):
        return mpmath.matrix([[mpmath.mpf(t) * mpmath.mpf(float(p)) ** (t - 1) / d for p in phi]
                              for t in range(1, d + 1)])


def binary_mi_quadrature(delta, sigma=1.0):
    """MI (nats) of two equiprobable means delta apart in 1-D Gaussian noise."""
    def integrand(x):
        p0 = math.exp(-x**2 / (2 * sigma**2))
        p1 = math.exp(-(x - delta) ** 2 / (2 * sigma**2))
        px = 0.5 * (p0 + p1)
        val = 0.0
        for p in (p0, p1):
            if p > 0:
                val += 0.5 * p * math.log(p / px)
        return val / math.sqrt(2 * math.pi * sigma**2)
    return integrate.quad(integrand, -12 * sigma, delta + 12 * sigma, limit=200)[0]


def bsc_capacity_bits(p):
    h = -sum(q * math.log2(q) for q in (p, 1 - p) if q > 0)
    return 1.0 - h


def hypercone_posterior_oracle(d, L, x, sigma=1.0, n=4001):
    """Exact posterior-mean prediction of the square hypercone under its Jeffreys prior.

    The Jeffreys density is proportional to theta_1^(d-1) (|det J| = r^(d-1)).
    Given theta_1 the transverse coordinates are independent with truncated
    Gaussian likelihoods, so every posterior moment needed reduces to nested
    1-D quadratures.  Returns ``(E[y], marginal grid, marginal density)``.
    """
    x = np.asarray(x, dtype=float)
    th = np.linspace(0.0, L, n)[1:]
    r = th / L
    u = np.linspace(0.0, 1.0, 801)
    log_marg = (d - 1) * np.log(th) - (x[0] - th) ** 2 / (2 * sigma**2)
    Ey_perp = np.zeros((th.size, d - 1))
    for j in range(d - 1):
        # integrand over u = theta_mu in [0, 1] at each theta_1
        e = -(x[j + 1] - r[:, None] * u[None, :]) ** 2 / (2 * sigma**2)
        c = e.max(axis=1, keepdims=True)
        f = np.exp(e - c)
        Z = integrate.trapezoid(f, u, axis=1)
        M1 = integrate.trapezoid(f * u[None, :], u, axis=1)
        log_marg += np.log(Z) + c[:, 0]
        Ey_perp[:, j] = r * M1 / Z
    w = np.exp(log_marg - log_marg.max())
    w /= integrate.trapezoid(w, th)
    Ey = np.empty(d)
    Ey[0] = integrate.trapezoid(w * th, th)
    Ey[1:] = integrate.trapezoid(w[:, None] * Ey_perp, th, axis=0)
    return Ey, th, w


def hypercone_ml(d, L, x):
    """Euclidean projection of x onto the cone (grid over theta_1, exact inner solve)."""
    x = np.asarray(x, dtype=float)
    th = np.linspace(0.0, L, 200001)
    r = th / L
    # each transverse coordinate minimizes (x_mu - r u)^2 over u in [0, 1]
    best_u = np.clip(np.divide(x[None, 1:], r[:, None], out=np.zeros((th.size, d - 1)),
                               where=r[:, None] > 0), 0.0, 1.0)
    cost = (x[0] - th) ** 2 + np.sum((x[None, 1:] - r[:, None] * best_u) ** 2, axis=1)
    i = int(np.argmin(cost))
    y = np.concatenate([[th[i]], r[i] * best_u[i]])
    return y


def hypercone_jeffreys_bias_1d(d, L, theta1, sigma=1.0, n=20001, order=60):
    """Bias pressure (nats) of the theta_1 marginal, relevant direction only."""
    th = np.linspace(1e-12, L, n)
    dth = th[1] - th[0]
    logp = (d - 1) * np.log(th / L) + math.log(d / L)
    z, wz = gauss_hermite(order)
    S = 0.5 * (1 + math.log(2 * math.pi * sigma**2))

    def D(t0):
        xs = t0 + sigma * z
        a = logp[None, :] - (xs[:, None] - th[None, :]) ** 2 / (2 * sigma**2)
        lp = logsumexp(a, axis=1) + math.log(dth) - 0.5 * math.log(2 * math.pi * sigma**2)
        return -S - wz @ lp

    rng = np.random.default_rng(0)
    draws = L * rng.random(400) ** (1.0 / d)
    I = float(np.mean([D(t) for t in draws]))
    return D(theta1) - I, I


def conjugate_log_evidence(x, prior_width, sigma):
    """log N(x; 0, (w^2 + s^2) I) for y = theta, theta ~ N(0, w^2 I)."""
    x = np.asarray(x, dtype=float)
    v = prior_width**2 + sigma**2
    return float(-np.sum(x**2) / (2 * v) - 0.5 * x.size * math.log(2 * math.pi * v))
