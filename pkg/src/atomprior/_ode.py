"""Mass-action kinetics integrated with dual-number sensitivities.

The state is an ``(n_species, 1 + d)`` array: column 0 holds concentrations
and columns ``1..d`` hold their derivatives with respect to the log-rates.
Each entry pair is a forward-mode dual number, and every Runge-Kutta stage
is evaluated in dual arithmetic, so the returned tangents are the exact
derivatives of the discrete solution (step sizes are chosen from the real
parts only).
"""

import numpy as np
from numba import njit

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1 / 5, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3 / 40, 9 / 40, 0.0, 0.0, 0.0, 0.0],
        [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0, 0.0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0, 0.0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0.0],
        [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    ]
)
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array(
    [
        71 / 57600,
        0.0,
        -71 / 16695,
        71 / 1920,
        -17253 / 339200,
        22 / 525,
        -1 / 40,
    ]
)


@njit(cache=True)
def _dual_mul(a, b, out):
    # (a0 + a'ε)(b0 + b'ε) = a0 b0 + (a0 b' + a' b0)ε
    out[0] = a[0] * b[0]
    for i in range(1, a.shape[0]):
        out[i] = a[0] * b[i] + a[i] * b[0]


@njit(cache=True)
def _rhs(u, rates, reactants, stoich, out, flux, tmp):
    """Dual-valued mass-action right-hand side.

    ``rates`` is an ``(n_rxn, 1 + d)`` dual array; ``reactants`` lists up to
    two species per reaction (``-1`` pads); ``stoich`` is ``(n_species, n_rxn)``.
    """
    n_rxn = reactants.shape[0]
    out[:, :] = 0.0
    for r in range(n_rxn):
        flux[:] = rates[r]
        for j in range(reactants.shape[1]):
            s = reactants[r, j]
            if s >= 0:
                _dual_mul(flux, u[s], tmp)
                flux[:] = tmp
        for s in range(stoich.shape[0]):
            c = stoich[s, r]
            if c != 0.0:
                out[s] += c * flux


@njit(cache=True)
def integrate(u0, rates, reactants, stoich, t_out, observed, rtol, atol, max_steps):
    """Integrate from t=0 and record the observed species at ``t_out``.

    Returns ``(values, states, status)``: ``values`` is ``(len(t_out), 1 + d)``
    for the observed species, ``states`` the full dual state at every output
    time, and ``status`` is 0 on success, 1 when the step budget is exhausted,
    2 when the step size collapses or the state turns non-finite.
    """
    n_s, nd = u0.shape
    n_out = t_out.shape[0]
    result = np.zeros((n_out, nd))
    states = np.zeros((n_out, n_s, nd))
    k = np.zeros((7, n_s, nd))
    u = u0.copy()
    stage = np.empty((n_s, nd))
    u_new = np.empty((n_s, nd))
    err = np.empty(n_s)
    flux = np.empty(nd)
    tmp = np.empty(nd)

    t = 0.0
    t_end = t_out[n_out - 1]
    # initial step, Hairer-Norsett-Wanner heuristic
    _rhs(u, rates, reactants, stoich, k[0], flux, tmp)
    d0 = 0.0
    d1 = 0.0
    for s in range(n_s):
        sc = atol + rtol * abs(u[s, 0])
        d0 += (u[s, 0] / sc) ** 2
        d1 += (k[0, s, 0] / sc) ** 2
    d0 = np.sqrt(d0 / n_s)
    d1 = np.sqrt(d1 / n_s)
    h = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h = min(h, t_end if t_end > 0 else 1.0)

    i_out = 0
    while i_out < n_out and t_out[i_out] <= 0.0:
        result[i_out] = u[observed]
        states[i_out] = u
        i_out += 1

    steps = 0
    while i_out < n_out:
        if steps >= max_steps:
            return result, states, 1
        target = t_out[i_out]
        hit = False
        h_free = h
        if t + h >= target:
            h = target - t
            hit = True
        for i in range(1, 7):
            stage[:, :] = u
            for j in range(i):
                a = _A[i, j]
                if a != 0.0:
                    stage += (h * a) * k[j]
            _rhs(stage, rates, reactants, stoich, k[i], flux, tmp)
        u_new[:, :] = u
        for i in range(6):
            b = _B[i]
            if b != 0.0:
                u_new += (h * b) * k[i]
        # error estimate on the real parts only
        acc = 0.0
        for s in range(n_s):
            e = 0.0
            for i in range(7):
                e += _E[i] * k[i, s, 0]
            e *= h
            sc = atol + rtol * max(abs(u[s, 0]), abs(u_new[s, 0]))
            err[s] = e / sc
            acc += err[s] * err[s]
        enorm = np.sqrt(acc / n_s)
        if not np.isfinite(enorm):
            if h < 1e-14:
                return result, states, 2
            h *= 0.1
            steps += 1
            continue
        steps += 1
        if enorm <= 1.0:
            t = target if hit else t + h
            u[:, :] = u_new
            k[0] = k[6]
            if hit:
                result[i_out] = u[observed]
                states[i_out] = u
                i_out += 1
            fac = 0.9 * enorm ** -0.2 if enorm > 0 else 5.0
            h_next = h * min(5.0, max(0.2, fac))
            h = max(h_next, h_free) if hit else h_next
        else:
            h *= max(0.2, 0.9 * enorm ** -0.2)
        if h < 1e-14 * max(1.0, t_end):
            return result, states, 2
    return result, states, 0


@njit(cache=True)
def rk4_fixed(u0, rates, reactants, stoich, t_end, h):
    """Plain fixed-step RK4 on real values; an independent reference."""
    n_s = u0.shape[0]
    u = u0.copy()
    n = int(round(t_end / h))
    h = t_end / n
    k1 = np.empty(n_s)
    k2 = np.empty(n_s)
    k3 = np.empty(n_s)
    k4 = np.empty(n_s)
    for _ in range(n):
        _rhs_real(u, rates, reactants, stoich, k1)
        _rhs_real(u + 0.5 * h * k1, rates, reactants, stoich, k2)
        _rhs_real(u + 0.5 * h * k2, rates, reactants, stoich, k3)
        _rhs_real(u + h * k3, rates, reactants, stoich, k4)
        u = u + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


@njit(cache=True)
def _rhs_real(u, rates, reactants, stoich, out):
    out[:] = 0.0
    for r in range(reactants.shape[0]):
        f = rates[r]
        for j in range(reactants.shape[1]):
            s = reactants[r, j]
            if s >= 0:
                f *= u[s]
        for s in range(stoich.shape[0]):
            out[s] += stoich[s, r] * f
