"""Mean-field limit: a single queue whose Poisson input rate equals its own output rate.

The node law lives on a lattice: an atom for the empty queue plus masses
``g[k-1, j]`` for queue length ``k`` and elapsed service ``z = j * dz``.
One step of length ``dt = dz`` is a symmetric split

1. Poisson arrivals for half the step,
2. ageing by one lattice cell with exact survival ratios, service
   completions (a completed service restarts, with a second completion in
   the same step allowed), and
3. Poisson arrivals for the other half,

where the two arrival masses add up to the customers that completed during
the step. That makes the mean queue length an exact invariant of the
discrete dynamics, and the split is second order in ``dt``.

Mass pushed past ``k_max`` or past the last ``z`` cell is collected in
``overflow_mass`` and never silently renormalized.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dominance import DistOnZ, poisson_dist
from .service import Family, ServiceDistribution

DEFAULT_DZ = 0.01
DEFAULT_Z_MAX = 50.0
DEFAULT_K_MAX = 80
DEFAULT_OVERFLOW_TOL = 1e-6
_POISSON_CUT = 1e-15


class TruncationError(RuntimeError):
    """Overflow mass exceeded its tolerance."""


class CFLError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class MeasureGrid:
    empty_mass: float
    g: np.ndarray  # shape (k_max, J); row k-1 holds queue length k
    dz: float
    overflow_mass: float = 0.0

    @property
    def k_max(self) -> int:
        return self.g.shape[0]

    @property
    def J(self) -> int:
        return self.g.shape[1]

    @property
    def z_max(self) -> float:
        return self.J * self.dz

    @property
    def total_mass(self) -> float:
        return float(self.empty_mass + self.g.sum() + self.overflow_mass)

    @property
    def busy_mass(self) -> float:
        return float(self.g.sum())

    @property
    def mean_customers(self) -> float:
        return float(np.arange(1, self.k_max + 1) @ self.g.sum(axis=1))

    def k_marginal(self) -> np.ndarray:
        """Law of the queue length on ``0..k_max`` (overflow excluded)."""
        return np.concatenate(([self.empty_mass], self.g.sum(axis=1)))

    def z_marginal(self) -> np.ndarray:
        """Busy mass at each lattice age ``j * dz`` (sub-probability)."""
        return self.g.sum(axis=0)

    @property
    def z_points(self) -> np.ndarray:
        return np.arange(self.J) * self.dz

    def copy(self) -> "MeasureGrid":
        return MeasureGrid(self.empty_mass, self.g.copy(), self.dz, self.overflow_mass)

    def to_dict(self) -> dict:
        ks, js = np.nonzero(self.g)
        return {
            "dz": self.dz,
            "k_max": self.k_max,
            "J": self.J,
            "empty_mass": self.empty_mass,
            "overflow_mass": self.overflow_mass,
            "cells": [[int(k) + 1, int(j), float(self.g[k, j])] for k, j in zip(ks, js)],
        }

    def to_json(self, header: dict | None = None) -> str:
        d = self.to_dict()
        if header:
            d = {"header": header, **d}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MeasureGrid":
        g = np.zeros((d["k_max"], d["J"]))
        for k, j, m in d["cells"]:
            g[k - 1, j] = m
        return cls(d["empty_mass"], g, d["dz"], d.get("overflow_mass", 0.0))

    @classmethod
    def from_empirical(cls, k: Sequence[int], z: Sequence[float], k_max: int = DEFAULT_K_MAX,
                       J: int | None = None, dz: float = DEFAULT_DZ) -> "MeasureGrid":
        """Histogram of node states ``(k_i, z_i)``, each with weight ``1/N``; ``z`` rounds to the lattice."""
        k = np.asarray(k, dtype=np.int64)
        z = np.asarray(z, dtype=float)
        if J is None:
            J = int(round(DEFAULT_Z_MAX / dz))
        if k.max(initial=0) > k_max:
            raise ValueError("queue length above k_max")
        w = 1.0 / k.size
        g = np.zeros((k_max, J))
        busy = k > 0
        j = np.minimum(np.rint(z[busy] / dz).astype(np.int64), J - 1)
        np.add.at(g, (k[busy] - 1, j), w)
        return cls(float(np.count_nonzero(~busy)) * w, g, dz)


@dataclass
class RateTrajectory:
    """Arrival rate per step: ``lam[n]`` is the mean rate on ``[times[n], times[n] + dt)``."""

    times: np.ndarray
    lam: np.ndarray
    dt: float
    measures: dict = field(default_factory=dict, repr=False)

    @property
    def t_end(self) -> float:
        return float(self.times[-1] + self.dt) if len(self.times) else 0.0

    def cumulative(self) -> np.ndarray:
        return np.concatenate(([0.0], np.cumsum(self.lam) * self.dt))

    def integral(self, a: float, b: float) -> float:
        """Integral of the piecewise-constant rate over ``[a, b]``."""
        t0 = float(self.times[0]) if len(self.times) else 0.0
        if a < t0 - 1e-12 or b > self.t_end + 1e-9:
            raise ValueError("interval outside the trajectory")
        cum = self.cumulative()

        def at(x):
            u = (x - t0) / self.dt
            n = min(int(math.floor(u + 1e-9)), len(self.lam))
            frac = u - n
            return cum[n] + (self.lam[n] * frac * self.dt if n < len(self.lam) and frac > 1e-9 else 0.0)

        return float(at(b) - at(a))

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        if header is not None:
            buf.write(f"# {json.dumps(header, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "lambda"])
        for t, l in zip(self.times, self.lam):
            w.writerow([repr(float(t)), repr(float(l))])
        return buf.getvalue()


def init_measure_q0(queue_length_dist, k_max: int = DEFAULT_K_MAX, J: int | None = None,
                    dz: float = DEFAULT_DZ, overflow_tol: float = DEFAULT_OVERFLOW_TOL) -> MeasureGrid:
    """Measure with every service about to start: mass ``p[k]`` at ``(z=0, k)``.

    Mass above ``k_max`` goes to ``overflow_mass``; more than ``overflow_tol``
    of it is an error.
    """
    if isinstance(queue_length_dist, DistOnZ):
        p = queue_length_dist.as_array()
    else:
        p = np.asarray(queue_length_dist, dtype=float)
    if J is None:
        J = int(round(DEFAULT_Z_MAX / dz))
    if J < 2:
        raise ValueError("need at least two z cells")
    over = float(p[k_max + 1:].sum())
    if over > overflow_tol:
        raise TruncationError(f"mass {over:.3g} above k_max={k_max}")
    g = np.zeros((k_max, J))
    top = min(len(p), k_max + 1)
    g[: top - 1, 0] = p[1:top]
    return MeasureGrid(float(p[0]), g, dz, over)


def output_rate(mu: MeasureGrid, d: ServiceDistribution) -> float:
    """Instantaneous departure rate: hazard at each lattice age weighted by busy mass."""
    return float(np.asarray(d.hazard(mu.z_points)) @ mu.z_marginal())


def _poisson_weights(m: float) -> np.ndarray:
    """Poisson(m) probabilities cut at 1e-15, with p[1] adjusted so the mean is exactly m."""
    if m <= 0:
        return np.array([1.0])
    p = [math.exp(-m)]
    n = 0
    while True:
        n += 1
        p.append(p[-1] * m / n)
        if p[-1] < _POISSON_CUT and n >= 2:
            break
    p = np.array(p)
    p[1] = m - np.dot(np.arange(2, len(p)), p[2:])
    p[0] = 1.0 - p[1:].sum()
    return p


def _arrive(e: float, g: np.ndarray, na: int, m: float) -> tuple[float, float]:
    """Apply Poisson(m) arrivals in place to ``g[:, :na]``; returns (empty mass, overflow)."""
    if m <= 0:
        return e, 0.0
    p = _poisson_weights(m)
    kmax = g.shape[0]
    G = g[:, :na]
    new = G * p[0]
    over = 0.0
    for n in range(1, len(p)):
        if n < kmax:
            new[n:] += p[n] * G[:-n]
            new[n - 1, 0] += p[n] * e
            over += p[n] * G[kmax - n:].sum()
        else:
            over += p[n] * (G.sum() + e)
    g[:, :na] = new
    return e * p[0], over


def evolve(mu0: MeasureGrid, d: ServiceDistribution, T: float, dt: float | None = None, *,
           overflow_tol: float = DEFAULT_OVERFLOW_TOL, save_at: Sequence[float] = (),
           rate0: float | None = None, t0: float = 0.0) -> tuple[MeasureGrid, RateTrajectory]:
    """Evolve ``mu0`` for ``T`` time units.

    Parameters
    ----------
    dt : float, optional
        Must equal the lattice spacing ``mu0.dz`` (the default).
    save_at : sequence of float
        Absolute times (multiples of ``dt`` after ``t0``) at which copies of
        the measure are stored in ``rates.measures``.
    rate0 : float, optional
        Arrival rate carried over from a previous call, used as predictor for
        the first half step; defaults to the discrete departure rate of ``mu0``.

    Raises
    ------
    CFLError
        ``dt != dz`` or ``hazard_sup * dt > 0.1``.
    TruncationError
        Overflow mass above ``overflow_tol``.
    """
    dz = mu0.dz
    if dt is None:
        dt = dz
    if abs(dt - dz) > 1e-12 * dz:
        raise CFLError(f"dt={dt} must equal the lattice spacing dz={dz}")
    if d.hazard_sup * dt > 0.1:
        raise CFLError(f"hazard_sup * dt = {d.hazard_sup * dt:.3g} > 0.1")
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")

    mu = mu0.copy()
    g, e, over = mu.g, mu.empty_mass, mu.overflow_mass
    kmax, J = g.shape
    if J < 2:
        raise ValueError("need at least two z cells")
    S = np.asarray(d.sf(np.arange(J + 1) * dz))
    with np.errstate(divide="ignore", invalid="ignore"):
        surv_ratio = np.where(S[:-1] > 0, S[1:] / S[:-1], 0.0)
    done = 1.0 - surv_ratio
    q = float(d.cdf(dt / 2))

    cols = np.flatnonzero(g.any(axis=0))
    nz = max(int(cols[-1]) + 1 if cols.size else 1, 1)
    if rate0 is None:
        rate0 = float(done[:nz] @ g[:, :nz].sum(axis=0)) / dt

    save = {int(round((s - t0) / dt)): s for s in save_at}
    if 0 in save:
        mu.empty_mass = e
        mu.overflow_mass = over
        mu.g = g
        save_copy = mu.copy()
        saved = {save[0]: save_copy}
    else:
        saved = {}
    lam = np.empty(steps)
    lam_prev = rate0

    for n in range(steps):
        m1 = lam_prev * dt / 2
        e, o = _arrive(e, g, nz, m1)
        over += o

        G = g[:, :nz]
        comp = G * done[:nz]
        surv = G - comp
        ck = comp.sum(axis=1)
        if nz == J:
            over += surv[:, -1].sum()
            g[:, 1:] = surv[:, :-1]
        else:
            g[:, 1 : nz + 1] = surv
        g[:, 0] = 0.0
        nz = min(J, max(nz + 1, 2))

        # k=1 completions empty the queue; k>=2 restart service, possibly finishing again
        e += ck[0]
        single = ck[1:] * (1.0 - q)
        double = ck[1:] * q
        g[:-1, 0] += 0.5 * single
        g[:-1, 1] += 0.5 * single
        if kmax >= 2:
            e += double[0]
            g[:-2, 0] += double[1:]
        C = ck.sum() + double.sum()

        m2 = max(C - m1, 0.0)
        e, o = _arrive(e, g, nz, m2)
        over += o
        lam[n] = C / dt
        lam_prev = lam[n]

        if over > overflow_tol:
            raise TruncationError(f"overflow mass {over:.3g} > {overflow_tol:.3g} at t={t0 + (n + 1) * dt:.4g}")
        if n + 1 in save:
            saved[save[n + 1]] = MeasureGrid(e, g.copy(), dz, over)

    mu.g, mu.empty_mass, mu.overflow_mass = g, e, over
    times = t0 + np.arange(steps) * dt
    return mu, RateTrajectory(times, lam, dt, saved)


# ---------------------------------------------------------------------------
# stationary point


@dataclass
class FixedPoint:
    measure: MeasureGrid
    rate: float
    t: float
    residual: float
    history: list[tuple[float, float, float]] = field(default_factory=list, repr=False)  # (t, rate, residual)


def q0_start(a: float) -> np.ndarray:
    """Two-point queue-length law on ``floor(a), ceil(a)`` with mean ``a``."""
    lo = int(math.floor(a))
    frac = a - lo
    p = np.zeros(lo + 2)
    p[lo] = 1.0 - frac
    p[lo + 1] = frac
    return p


def _heavy_tailed(d: ServiceDistribution) -> bool:
    return d.family is Family.LOMAX


def fixed_point(a: float, d: ServiceDistribution, tol: float = 1e-3, max_T: float = 500.0, *,
                dz: float | None = None, k_max: int | None = None, z_max: float | None = None,
                window: float = 10.0, overflow_tol: float = DEFAULT_OVERFLOW_TOL,
                initial=None) -> FixedPoint:
    """Stationary law on the leaf of mean queue length ``a``, by relaxation.

    Starting from a measure with all services about to start (by default the
    two-point law on ``floor(a), ceil(a)``), the dynamics run in blocks of
    ``window`` time units until the queue-length law moves by less than
    ``tol`` in total variation over one block (with the sup-norm change of
    the age marginal folded in).

    Heavy-tailed laws relax polynomially, so for them the default grid is
    coarser (``dz = 0.05``) and long enough in ``z`` that no mass leaves it
    before ``max_T``.
    """
    if a <= 0:
        raise ValueError("a must be > 0")
    heavy = _heavy_tailed(d)
    if dz is None:
        dz = 0.05 if heavy else DEFAULT_DZ
    if k_max is None:
        k_max = max(DEFAULT_K_MAX, int(40 * a)) if not heavy else max(200, int(100 * a))
    if z_max is None:
        z_max = max_T + 2 * dz if heavy else DEFAULT_Z_MAX
    J = int(math.ceil(z_max / dz))
    p0 = q0_start(a) if initial is None else initial
    mu = init_measure_q0(p0, k_max=k_max, J=J, dz=dz, overflow_tol=overflow_tol)
    t, rate, residual = 0.0, None, math.inf
    history = []
    prev_k, prev_z = mu.k_marginal(), mu.z_marginal()
    while t < max_T - 1e-9:
        span = min(window, max_T - t)
        mu, rt = evolve(mu, d, span, overflow_tol=overflow_tol, rate0=rate, t0=t)
        t += span
        rate = float(rt.lam[-1])
        km, zm = mu.k_marginal(), mu.z_marginal()
        residual = 0.5 * float(np.abs(km - prev_k).sum()) + float(np.abs(zm - prev_z).max())
        history.append((t, rate, residual))
        prev_k, prev_z = km, zm
        if residual < tol:
            return FixedPoint(mu, rate, t, residual, history)
    raise ConvergenceError(f"no fixed point within max_T={max_T}: residual {residual:.3g}", residual)


def mean_queue_length(rho: float, scv: float) -> float:
    """M/G/1 mean number in system at load ``rho`` (mean service one)."""
    return rho + rho**2 * (1.0 + scv) / (2.0 * (1.0 - rho))


def solve_lambda(a: float, d: ServiceDistribution, tol: float = 1e-10) -> float:
    """Arrival rate of the M/G/1 queue whose mean queue length is ``a`` (bisection)."""
    if a <= 0:
        raise ValueError("a must be > 0")
    scv = d.scv
    if not math.isfinite(scv):
        raise ValueError("service law needs a finite second moment")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mean_queue_length(mid, scv) < a:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# rate-function diagnostics


@dataclass
class WindowReport:
    T: float
    delta: float
    max_integral: float
    argmax_tau: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(T=self.T, delta=self.delta, max_integral=self.max_integral,
                    argmax_tau=self.argmax_tau, passed=self.passed)


def window_integrals(rt: RateTrajectory, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Integrals of the rate over every window ``[tau, tau + T]`` with ``tau`` on the step grid."""
    w = int(round(T / rt.dt))
    if w > len(rt.lam):
        raise ValueError("trajectory shorter than the window")
    cum = rt.cumulative()
    return rt.times[: len(cum) - w], cum[w:] - cum[:-w]


def lemma_delta_check(rt: RateTrajectory, T: float, delta: float) -> WindowReport:
    """Largest windowed integral of the rate, and whether it stays below ``T - delta``."""
    taus, ints = window_integrals(rt, T)
    i = int(np.argmax(ints))
    return WindowReport(T, delta, float(ints[i]), float(taus[i]), bool(ints[i] < T - delta))


def smallest_passing_window(rt: RateTrajectory, delta: float, candidates: Sequence[float]) -> float | None:
    """Smallest candidate ``T`` whose windowed integrals all stay below ``T - delta``."""
    for T in sorted(candidates):
        if int(round(T / rt.dt)) <= len(rt.lam) and lemma_delta_check(rt, T, delta).passed:
            return T
    return None


def poisson_count_dist(rt: RateTrajectory, T: float, tail_tol: float = 1e-12) -> DistOnZ:
    """Law of the number of arrivals on ``[t0, t0 + T]``: Poisson with the integrated rate."""
    t0 = float(rt.times[0]) if len(rt.times) else 0.0
    return poisson_dist(rt.integral(t0, t0 + T), tail_tol)
