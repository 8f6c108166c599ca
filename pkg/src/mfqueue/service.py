"""Service-time distributions with mean one.

Every distribution is rescaled at construction so that the mean service time
equals one time unit; user-supplied scale parameters are therefore read as
pre-normalization values. Only families with a strictly positive density at
zero and a bounded log-derivative are accepted (exponential, hyperexponential,
Lomax). Erlang is available solely as an unchecked negative-test input.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import integrate, special

__all__ = [
    "Family",
    "ServiceDistribution",
    "ConditionViolation",
    "ConditionReport",
    "make_distribution",
    "from_config",
    "verify_conditions",
]

#: grid used for the sup |p'/p| estimate
LIPSCHITZ_GRID = (0.0, 50.0, 1e-3)


class Family(str, enum.Enum):
    EXPONENTIAL = "exponential"
    HYPEREXPONENTIAL = "hyperexponential"
    LOMAX = "lomax"
    ERLANG = "erlang"  # rejected by make_distribution unless validate=False


class ConditionViolation(ValueError):
    """Raised when a distribution cannot satisfy the regularity conditions."""


@dataclass(frozen=True)
class ServiceDistribution:
    """Normalized (mean one) service-time law.

    Attributes
    ----------
    family : Family
    params : tuple
        Normalized parameters. Exponential: ``()``; hyperexponential:
        ``(weights, rates)``; Lomax: ``(alpha, sigma)``; Erlang: ``(shape,)``.
    hazard_sup : float
        Supremum of the hazard rate (``beta``).
    lipschitz_C : float
        Estimate of ``sup |p'(t)/p(t)|`` on ``[0, 50]``.
    delta : float
        Exponent margin with ``E eta^(2+delta) < inf``.
    """

    family: Family
    params: tuple
    hazard_sup: float = field(default=math.nan)
    lipschitz_C: float = field(default=math.nan)
    delta: float = field(default=math.nan)

    # -- analytic functions -------------------------------------------------

    @property
    def mean(self) -> float:
        return float(self.moment(1))

    @property
    def scv(self) -> float:
        """Squared coefficient of variation."""
        m1 = self.moment(1)
        return float(self.moment(2) / m1**2 - 1.0)

    def moment(self, s: float) -> float:
        """Real moment ``E eta^s`` (``inf`` when it diverges)."""
        fam = self.family
        if fam is Family.EXPONENTIAL:
            return float(special.gamma(s + 1))
        if fam is Family.HYPEREXPONENTIAL:
            w, r = self.params
            return float(special.gamma(s + 1) * np.sum(np.asarray(w) / np.asarray(r) ** s))
        if fam is Family.LOMAX:
            alpha, sigma = self.params
            if s >= alpha:
                return math.inf
            return float(sigma**s * special.gamma(s + 1) * special.gamma(alpha - s) / special.gamma(alpha))
        (k,) = self.params
        return float(special.gamma(k + s) / (special.gamma(k) * k**s))

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        fam = self.family
        if fam is Family.EXPONENTIAL:
            out = np.exp(-t)
        elif fam is Family.HYPEREXPONENTIAL:
            w, r = (np.asarray(x) for x in self.params)
            out = np.sum(w * r * np.exp(-np.multiply.outer(t, r)), axis=-1)
        elif fam is Family.LOMAX:
            alpha, sigma = self.params
            out = alpha * sigma**alpha / (sigma + t) ** (alpha + 1)
        else:
            (k,) = self.params
            out = k**k * t ** (k - 1) * np.exp(-k * t) / math.factorial(k - 1)
        return _scalar(np.where(t < 0, 0.0, out))

    def sf(self, t):
        """Survival function ``1 - F(t)``."""
        t = np.asarray(t, dtype=float)
        tc = np.maximum(t, 0.0)
        fam = self.family
        if fam is Family.EXPONENTIAL:
            out = np.exp(-tc)
        elif fam is Family.HYPEREXPONENTIAL:
            w, r = (np.asarray(x) for x in self.params)
            out = np.sum(w * np.exp(-np.multiply.outer(tc, r)), axis=-1)
        elif fam is Family.LOMAX:
            alpha, sigma = self.params
            out = (sigma / (sigma + tc)) ** alpha
        else:
            (k,) = self.params
            out = special.gammaincc(k, k * tc)
        return _scalar(out)

    def cdf(self, t):
        return _scalar(1.0 - np.asarray(self.sf(t)))

    def hazard(self, t):
        """``p(t) / (1 - F(t))``; equals the residual density at zero."""
        t = np.asarray(t, dtype=float)
        fam = self.family
        if fam is Family.EXPONENTIAL:
            return _scalar(np.ones_like(t))
        if fam is Family.HYPEREXPONENTIAL:
            w, r = (np.asarray(x) for x in self.params)
            # log-sum-exp form stays finite far in the tail
            e = np.log(w) - np.multiply.outer(t, r)
            e = e - e.max(axis=-1, keepdims=True)
            pe = np.exp(e)
            return _scalar(np.sum(pe * r, axis=-1) / np.sum(pe, axis=-1))
        if fam is Family.LOMAX:
            alpha, sigma = self.params
            return _scalar(alpha / (sigma + t))
        return _scalar(np.asarray(self.pdf(t)) / np.asarray(self.sf(t)))

    def dlogpdf(self, t):
        """Analytic ``p'(t) / p(t)``."""
        t = np.asarray(t, dtype=float)
        fam = self.family
        if fam is Family.EXPONENTIAL:
            return _scalar(-np.ones_like(t))
        if fam is Family.HYPEREXPONENTIAL:
            w, r = (np.asarray(x) for x in self.params)
            e = np.log(w * r) - np.multiply.outer(t, r)
            e = e - e.max(axis=-1, keepdims=True)
            pe = np.exp(e)
            return _scalar(-np.sum(pe * r, axis=-1) / np.sum(pe, axis=-1))
        if fam is Family.LOMAX:
            alpha, sigma = self.params
            return _scalar(-(alpha + 1) / (sigma + t))
        (k,) = self.params
        with np.errstate(divide="ignore"):
            return _scalar((k - 1) / t - k)

    def residual_density(self, tau, t):
        """Density at ``t`` of the remaining service time after ``tau`` elapsed."""
        tau = np.asarray(tau, dtype=float)
        surv = np.asarray(self.sf(tau))
        if np.any(surv < 1e-300):
            raise ValueError(f"survival at tau={tau!r} is below 1e-300; residual law undefined")
        return _scalar(np.asarray(self.pdf(tau + np.asarray(t, dtype=float))) / surv)

    # -- sampling -----------------------------------------------------------

    def sample(self, rng: np.random.Generator, size=None):
        """Draw service times by inversion (hyperexponential: phase, then inversion)."""
        fam = self.family
        u = 1.0 - rng.random(size)  # in (0, 1]
        if fam is Family.EXPONENTIAL:
            return -np.log(u)
        if fam is Family.HYPEREXPONENTIAL:
            w, r = (np.asarray(x) for x in self.params)
            phase = np.searchsorted(np.cumsum(w), rng.random(size), side="right")
            phase = np.minimum(phase, len(w) - 1)
            return -np.log(u) / r[phase]
        if fam is Family.LOMAX:
            alpha, sigma = self.params
            return sigma * (u ** (-1.0 / alpha) - 1.0)
        (k,) = self.params
        return rng.gamma(k, 1.0 / k, size)

    def sample_residual(self, elapsed, rng: np.random.Generator, size=None):
        """Draw the remaining service time given ``elapsed`` time already served."""
        z = float(elapsed)
        if z <= 0.0:
            return self.sample(rng, size)
        fam = self.family
        u = 1.0 - rng.random(size)
        if fam is Family.EXPONENTIAL:
            return -np.log(u)
        if fam is Family.HYPEREXPONENTIAL:
            w, r = (np.asarray(x) for x in self.params)
            post = np.log(w) - r * z
            post = np.exp(post - post.max())
            post /= post.sum()
            phase = np.minimum(np.searchsorted(np.cumsum(post), rng.random(size), side="right"), len(w) - 1)
            return -np.log(u) / r[phase]
        if fam is Family.LOMAX:
            alpha, sigma = self.params
            return (sigma + z) * (u ** (-1.0 / alpha) - 1.0)
        target = u * self.sf(z)
        return np.vectorize(lambda q: _invert_sf(self, q, z))(target) - z

    # -- serialization ------------------------------------------------------

    def to_config(self) -> dict[str, Any]:
        fam = self.family
        if fam is Family.HYPEREXPONENTIAL:
            w, r = self.params
            return {"family": fam.value, "weights": list(w), "rates": list(r)}
        if fam is Family.LOMAX:
            return {"family": fam.value, "alpha": self.params[0]}
        if fam is Family.ERLANG:
            return {"family": fam.value, "shape": self.params[0]}
        return {"family": fam.value}


def _scalar(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def _invert_sf(d: ServiceDistribution, q: float, z: float) -> float:
    from scipy.optimize import brentq

    hi = z + 1.0
    while d.sf(hi) > q:
        hi = 2 * hi + 1.0
    return brentq(lambda x: d.sf(x) - q, z, hi, xtol=1e-13)


def make_distribution(family, params: Sequence = (), *, validate: bool = True) -> ServiceDistribution:
    """Build a mean-one service distribution.

    Parameters
    ----------
    family : Family or str
    params : sequence
        Exponential: ignored. Hyperexponential: ``(weights, rates)`` or a flat
        list ``[w1..wn, r1..rn]``. Lomax: ``[alpha]`` or ``[alpha, scale]``.
        Erlang: ``[shape]``.
    validate : bool
        When false, families that violate the density conditions (Erlang) are
        returned anyway so they can be fed to :func:`verify_conditions`.

    Raises
    ------
    ConditionViolation
        Lomax with ``alpha <= 2`` or an Erlang/Gamma family under validation.
    ValueError
        Malformed parameters.
    """
    family = Family(family)
    params = list(params)
    if family is Family.EXPONENTIAL:
        norm: tuple = ()
        beta = 1.0
        delta = 1.0
    elif family is Family.HYPEREXPONENTIAL:
        if len(params) == 2 and all(np.ndim(p) == 1 for p in params):
            w, r = (np.asarray(p, dtype=float) for p in params)
        else:
            if len(params) % 2 or not params:
                raise ValueError("hyperexponential needs weights and rates of equal length")
            w = np.asarray(params[: len(params) // 2], dtype=float)
            r = np.asarray(params[len(params) // 2 :], dtype=float)
        if w.shape != r.shape or w.size == 0:
            raise ValueError("weights and rates must have the same nonzero length")
        if np.any(r <= 0) or np.any(w <= 0):
            raise ValueError("hyperexponential weights and rates must be positive")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()}, expected 1")
        w = w / w.sum()
        r = r * float(np.sum(w / r))  # rescale time so the mean is one
        norm = (tuple(float(x) for x in w), tuple(float(x) for x in r))
        beta = float(np.dot(w, r))  # hazard is decreasing, sup at t=0
        delta = 1.0
    elif family is Family.LOMAX:
        if not params:
            raise ValueError("lomax needs the shape parameter alpha")
        alpha = float(params[0])
        if alpha <= 2.0:
            raise ConditionViolation(f"lomax alpha={alpha} <= 2 has no finite moment of order 2+delta")
        sigma = alpha - 1.0
        norm = (alpha, sigma)
        beta = alpha / sigma
        delta = (alpha - 2.0) / 2.0
    else:
        if not params:
            raise ValueError("erlang needs an integer shape")
        k = int(params[0])
        if k < 1 or k != params[0]:
            raise ValueError("erlang shape must be a positive integer")
        if validate and k > 1:
            raise ConditionViolation(
                "erlang/gamma with shape > 1 has p(0) = 0, so |p(t+h) - p(t)| <= C p(t) |h| fails near 0"
            )
        norm = (k,)
        beta = float(k)
        delta = 1.0
    d = ServiceDistribution(family, norm, hazard_sup=beta, delta=delta)
    lo, hi, step = LIPSCHITZ_GRID
    grid = np.arange(lo, hi + step / 2, step)
    with np.errstate(divide="ignore", invalid="ignore"):
        c_est = float(np.nanmax(np.abs(d.dlogpdf(grid))))
    return ServiceDistribution(family, norm, hazard_sup=beta, lipschitz_C=c_est, delta=delta)


def from_config(cfg: dict[str, Any]) -> ServiceDistribution:
    """Parse ``{"family": "lomax", "alpha": 3.0}``-style specs."""
    family = Family(str(cfg.get("family", "")).lower())
    if family is Family.EXPONENTIAL:
        return make_distribution(family)
    if family is Family.HYPEREXPONENTIAL:
        return make_distribution(family, [cfg["weights"], cfg["rates"]])
    if family is Family.LOMAX:
        return make_distribution(family, [cfg["alpha"]])
    return make_distribution(family, [cfg["shape"]], validate=cfg.get("validate", True))


# ---------------------------------------------------------------------------
# condition checks


@dataclass
class CheckResult:
    passed: bool
    value: float | None = None
    detail: str = ""


@dataclass
class ConditionReport:
    distribution: dict
    checks: dict[str, CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failures(self) -> list[str]:
        return [name for name, c in self.checks.items() if not c.passed]

    def to_dict(self) -> dict:
        return {
            "distribution": self.distribution,
            "passed": self.passed,
            "checks": {
                name: {"passed": c.passed, "value": _json_num(c.value), "detail": c.detail}
                for name, c in self.checks.items()
            },
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _json_num(x):
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def verify_conditions(d: ServiceDistribution, grid=None, tol: float = 1e-6) -> ConditionReport:
    """Numerically check the regularity conditions on a service law.

    All checks use finite differences and quadrature on ``d.pdf``/``d.sf``,
    not the analytic derivatives, so they are independent of how
    ``lipschitz_C`` was obtained. The report carries failures rather than
    raising.
    """
    if grid is None:
        grid = np.arange(0.0, 50.0 + 5e-4, 1e-3)
    t = np.asarray(grid, dtype=float)
    p = np.asarray(d.pdf(t))
    checks: dict[str, CheckResult] = {}

    total = integrate.quad(lambda x: float(d.pdf(x)), 0, np.inf, limit=500, epsabs=1e-12)[0]
    ok = bool(np.all(p >= 0) and np.all(np.isfinite(p)) and abs(total - 1.0) < tol)
    checks["density"] = CheckResult(ok, float(np.max(p)), f"integral={total:.12g}")

    mean_q = integrate.quad(lambda x: x * float(d.pdf(x)), 0, np.inf, limit=500, epsabs=1e-12)[0]
    checks["mean_one"] = CheckResult(abs(d.mean - 1.0) < 1e-9 and abs(mean_q - 1.0) < 1e-5, mean_q)

    # strong Lipschitz: |p(t+h) - p(t)| <= C p(t) |h|
    h = 1e-3
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(np.asarray(d.pdf(t + h)) - p) / (p * h)
        wide = []
        for step in (-0.9, -0.5, -0.1, 0.1, 0.5, 0.9):
            mask = t + step > 0
            wide.append(np.abs(np.asarray(d.pdf(t[mask] + step)) - p[mask]) / (p[mask] * abs(step)))
    c_est = float(np.max(ratio)) if np.all(p > 0) else math.inf
    wide_max = float(max(np.max(x) for x in wide)) if np.all(p > 0) else math.inf
    lip_ok = bool(np.all(p > 0) and math.isfinite(c_est) and math.isfinite(wide_max))
    detail = f"ratio over |dt|<1 up to {wide_max:.6g}"
    if not lip_ok:
        bad = t[~(p > 0)] if np.any(~(p > 0)) else t[np.argmax(ratio)]
        detail = f"unbounded near t={float(np.min(bad)):.3g}"
    checks["lipschitz"] = CheckResult(lip_ok, c_est, detail)

    s = 2.0 + d.delta
    m = integrate.quad(lambda x: x**s * float(d.pdf(x)), 0, np.inf, limit=1000)[0]
    checks["moment"] = CheckResult(bool(math.isfinite(m) and d.delta > 0), m, f"order {s:g}")

    sf = np.asarray(d.sf(t))
    live = sf > 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        haz = p[live] / sf[live]
    hmax = float(np.max(haz))
    checks["hazard_bound"] = CheckResult(
        bool(hmax <= d.hazard_sup + 1e-12 + tol * d.hazard_sup), hmax, f"beta={d.hazard_sup:.12g}"
    )

    tl = t[live]
    dh = np.diff(haz) / np.diff(tl)
    dmax = float(np.max(np.abs(dh)))
    checks["hazard_derivative"] = CheckResult(bool(np.isfinite(dmax)), dmax)

    # bounded + eventually monotone => the limit exists
    half = len(haz) // 2
    tail_h, tail_dh = haz[half:], dh[half:]
    slack = tol * max(1.0, float(np.max(np.abs(tail_h))))
    mono_h = _monotone(tail_h, slack)
    mono_dh = _monotone(tail_dh, tol * max(1.0, float(np.max(np.abs(tail_dh)))))
    checks["tail_limits"] = CheckResult(
        bool(mono_h and mono_dh),
        float(tail_h[-1]),
        f"hazard -> {tail_h[-1]:.6g}, d/dtau hazard -> {tail_dh[-1]:.3g}",
    )
    return ConditionReport(d.to_config(), checks)


def _monotone(x: np.ndarray, slack: float) -> bool:
    dx = np.diff(x)
    return bool(np.all(dx <= slack) or np.all(dx >= -slack))
