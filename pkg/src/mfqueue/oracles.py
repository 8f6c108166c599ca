"""Independent reference computations used by the tests and the comparison layer.

Nothing here shares code with the simulators or the measure solver: the
closed exponential network is handled through its product form and a direct
generator solve, the exponential mean-field limit through a birth-death ODE,
and stationary single-queue laws through the embedded M/G/1 chain.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np
from scipy import integrate, linalg

from .service import Family, ServiceDistribution


def n_compositions(N: int, M: int) -> int:
    return math.comb(M + N - 1, N - 1)


def compositions(N: int, M: int):
    """All ``(k_1, ..., k_N)`` with nonnegative parts summing to ``M`` (stars and bars)."""
    for bars in itertools.combinations(range(M + N - 1), N - 1):
        prev = -1
        parts = []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(M + N - 1 - prev - 1)
        yield tuple(parts)


def product_form_marginal(N: int, M: int, exact: bool = False):
    """Law of ``k_1`` when the state is uniform over compositions of ``M`` into ``N`` parts."""
    total = n_compositions(N, M)
    if N == 1:
        p = [Fraction(0)] * M + [Fraction(1)]
    else:
        p = [Fraction(math.comb(M - j + N - 2, N - 2), total) for j in range(M + 1)]
    return p if exact else np.array([float(x) for x in p])


def product_form_cov(N: int, M: int) -> float:
    """Covariance of two distinct queue lengths under the uniform composition law."""
    return -M * (M + N) / (N * N * (N + 1))


def ctmc_stationary(N: int, M: int, max_states: int = 1000) -> dict[tuple, float]:
    """Stationary law of the closed exponential network by solving ``pi Q = 0`` directly."""
    states = list(compositions(N, M))
    if len(states) > max_states:
        raise ValueError(f"{len(states)} states exceed the cap {max_states}")
    index = {s: i for i, s in enumerate(states)}
    n = len(states)
    Q = np.zeros((n, n))
    for s, a in index.items():
        for i in range(N):
            if s[i] == 0:
                continue
            for j in range(N):
                if j == i:
                    continue
                t = list(s)
                t[i] -= 1
                t[j] += 1
                Q[a, index[tuple(t)]] += 1.0 / N
        Q[a, a] = -Q[a].sum()
    A = np.vstack([Q.T, np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi = linalg.lstsq(A, b)[0]
    return {s: float(pi[index[s]]) for s in states}


def birth_death_marginals(p0, times, k_max: int = 80, rtol: float = 1e-10, atol: float = 1e-13) -> np.ndarray:
    """Queue-length law of the exponential mean-field limit at the requested times.

    With unit-rate exponential service the age is irrelevant and the output
    rate is the busy probability, so the limit reduces to a birth-death
    system with birth rate ``1 - p_0(t)``. Returns an array ``(len(times), k_max + 1)``.
    """
    p = np.zeros(k_max + 1)
    p0 = np.asarray(p0, dtype=float)
    p[: len(p0)] = p0

    def rhs(_t, x):
        lam = 1.0 - x[0]
        dx = -lam * x
        dx[1:] += lam * x[:-1]
        dx[:-1] += x[1:]
        dx[1:] -= x[1:]
        return dx

    times = np.asarray(times, dtype=float)
    sol = integrate.solve_ivp(rhs, (0.0, float(times.max())), p, t_eval=times, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y.T


def geometric_pmf(rho: float, n: int) -> np.ndarray:
    j = np.arange(n)
    return (1.0 - rho) * rho**j


def _arrivals_per_service(lam: float, d: ServiceDistribution, n: int) -> np.ndarray:
    """``a_j = P(j Poisson(lam) arrivals during one service)`` for ``j < n``."""
    j = np.arange(n)
    if d.family in (Family.EXPONENTIAL, Family.HYPEREXPONENTIAL):
        if d.family is Family.EXPONENTIAL:
            w, r = np.array([1.0]), np.array([1.0])
        else:
            w, r = np.asarray(d.params[0]), np.asarray(d.params[1])
        x = lam / (lam + r)
        return (w * r / (lam + r) * x[None, :] ** j[:, None]).sum(axis=1)
    out = np.empty(n)
    for m in range(n):
        def f(t, m=m):
            if t == 0.0:
                return float(d.pdf(0.0)) if m == 0 else 0.0
            return math.exp(m * math.log(lam * t) - lam * t - math.lgamma(m + 1)) * float(d.pdf(t))

        if m == 0:
            pts = [0.0, 1.0, 10.0]
        else:
            c = m / lam
            pts = [0.0, 0.5 * c, c, 2 * c, 4 * c]
        val = sum(integrate.quad(f, a, b, limit=200, epsabs=1e-15, epsrel=1e-12)[0] for a, b in zip(pts, pts[1:]))
        val += integrate.quad(f, pts[-1], np.inf, limit=200, epsabs=1e-15, epsrel=1e-12)[0]
        out[m] = val
    return out


def mg1_stationary(lam: float, d: ServiceDistribution, n: int = 200) -> np.ndarray:
    """Stationary number in an M/G/1 queue (mean service one) on ``0..n-1``.

    Uses the embedded departure chain, whose law coincides with the
    time-stationary one, with the forward recursion
    ``pi_j a_0 = pi_0 A_{j-1} + sum_{i=1}^{j-1} pi_i A_{j-i}`` where
    ``A_m = P(more than m arrivals during a service)``.
    """
    rho = lam * d.mean
    if not 0 < rho < 1:
        raise ValueError("need 0 < load < 1")
    a = _arrivals_per_service(lam, d, n + 1)
    abar = 1.0 - np.cumsum(a)
    pi = np.zeros(n)
    pi[0] = 1.0 - rho
    for jj in range(1, n):
        s = pi[0] * abar[jj - 1]
        if jj > 1:
            s += pi[1:jj] @ abar[jj - 1 : 0 : -1]
        pi[jj] = s / a[0]
    return pi
