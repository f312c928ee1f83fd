"""Independent reference implementations used only by the tests.

Each oracle recomputes a quantity through a different algorithm than the
package uses, so agreement is evidence of correctness rather than of
copy-paste: Gauss-Seidel vs Newton for AC power flow, dense inverse-based
formulas vs Cholesky for the GP posterior, bisection vs a rational
approximation for the normal quantile.
"""

from __future__ import annotations

import math

import numpy as np

from gpccopf.grid import BusKind, GridCase, build_ybus


def gauss_seidel_pf(case: GridCase, inp, tol: float = 1e-10,
                    max_iter: int = 50000):
    """AC power flow by Gauss-Seidel sweeps on the complex voltages.

    PV buses update Q from the current iterate, then rescale the voltage
    back to the setpoint magnitude.  Returns (v_mag, v_ang, converged).
    """
    Y = build_ybus(case)
    n = case.n_bus
    slack = case.slack_bus
    V = np.ones(n, dtype=complex)
    for b in case.buses:
        if b.kind is not BusKind.PQ:
            V[b.id] = inp.v_setpoints[b.id]
    S_spec = inp.p_injection + 1j * inp.q_injection

    for _ in range(max_iter):
        V_old = V.copy()
        for i in range(n):
            if i == slack:
                continue
            if case.buses[i].kind is BusKind.PV:
                q_i = -np.imag(np.conj(V[i]) * (Y[i] @ V))
                s_i = inp.p_injection[i] - 1j * q_i
            else:
                s_i = np.conj(S_spec[i])
            off = Y[i] @ V - Y[i, i] * V[i]
            V[i] = (s_i / np.conj(V[i]) - off) / Y[i, i]
            if case.buses[i].kind is BusKind.PV:
                V[i] *= inp.v_setpoints[i] / abs(V[i])
        if np.max(np.abs(V - V_old)) < tol:
            return np.abs(V), np.angle(V), True
    return np.abs(V), np.angle(V), False


def two_bus_closed_form(r: float, x: float, p_load: float, q_load: float,
                        v1: float = 1.0):
    """Exact receiving-end voltage of a 2-bus feeder by solving the quartic.

    With V1 fixed and constant-power load (p, q) at bus 2 through impedance
    z = r + jx, |V2| satisfies  v2^4 + (2(p r + q x) - v1^2) v2^2
    + (p^2 + q^2) |z|^2 = 0; the physical root is the larger one.
    """
    z2 = r * r + x * x
    b = 2.0 * (p_load * r + q_load * x) - v1 * v1
    c = (p_load ** 2 + q_load ** 2) * z2
    disc = b * b - 4.0 * c
    if disc < 0:
        raise ValueError("no real power-flow solution")
    v2sq = (-b + math.sqrt(disc)) / 2.0
    # the injection balance V2 conj(V2 - V1) = -(p + jq) conj(z) gives the
    # complex voltage directly once |V2|^2 is known (V1 taken real)
    V2 = (v2sq + complex(p_load, q_load) * complex(r, -x)) / v1
    return abs(V2), math.atan2(V2.imag, V2.real)


def dense_gp_posterior(X, y, xs, signal_var, lengthscales, noise_var):
    """GP posterior mean/variance by explicit matrix inversion."""
    X = np.asarray(X, float)
    xs = np.asarray(xs, float)

    def k(a, b):
        d = (a[:, None, :] - b[None, :, :]) / lengthscales
        return signal_var * np.exp(-0.5 * np.sum(d * d, axis=-1))

    K = k(X, X) + noise_var * np.eye(len(X))
    Kinv = np.linalg.inv(K)
    ks = k(xs[None, :], X)[0]
    mean = ks @ Kinv @ y
    var = signal_var - ks @ Kinv @ ks
    return float(mean), float(var)


def dense_nlml(X, y, signal_var, lengthscales, noise_var):
    """Negative log marginal likelihood by dense slogdet/inverse."""
    X = np.asarray(X, float)
    d = (X[:, None, :] - X[None, :, :]) / lengthscales
    K = signal_var * np.exp(-0.5 * np.sum(d * d, axis=-1)) \
        + noise_var * np.eye(len(X))
    sign, logdet = np.linalg.slogdet(K)
    assert sign > 0
    return 0.5 * (y @ np.linalg.solve(K, y) + logdet
                  + len(X) * math.log(2.0 * math.pi))


def bisect_quantile(p: float, lo: float = -40.0, hi: float = 40.0,
                    iters: int = 200) -> float:
    """Standard normal quantile by bisection on the erf-based CDF."""
    def cdf(z):
        return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fd_grad(f, x, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g
