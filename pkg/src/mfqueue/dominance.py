"""First-order stochastic dominance on the nonnegative integers.

Covers the orders ``xi <= zeta`` (CDF of ``xi`` pointwise above that of
``zeta``) and its prefix version, the splice ``xi <>_k zeta``, the
dominating batch law built from two Poisson laws, the single-server queue
fed by those batches at epochs ``0, T, 2T, ...``, and a DKW-band test for
dominance between two samples.

Distributions built from :class:`fractions.Fraction` probabilities stay exact
through every operation here; float inputs are compared with a ``1e-12``
slack.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

FLOAT_TOL = 1e-12


class DistOnZ:
    """Finite-support probability law on ``{0, 1, 2, ...}``.

    ``probs[n]`` is the mass at ``n``. Entries may be floats or Fractions;
    a law is *exact* when all entries are Fractions (or ints).
    """

    __slots__ = ("probs", "_cdf", "_tail")

    def __init__(self, probs: Iterable, *, check: bool = True):
        p = list(probs)
        if not p:
            raise ValueError("empty distribution")
        while len(p) > 1 and p[-1] == 0:
            p.pop()
        self.probs = tuple(p)
        exact = self.exact
        if check:
            if any(x < 0 for x in p):
                if exact or min(p) < -FLOAT_TOL:
                    raise ValueError("negative probability")
            total = sum(p)
            if (exact and total != 1) or (not exact and abs(total - 1) > FLOAT_TOL * max(1, len(p))):
                raise ValueError(f"probabilities sum to {total}, not 1")
        # prefix sums and right-to-left tails; tails summed from the right for accuracy
        cdf, acc = [], Fraction(0) if exact else 0.0
        for x in p:
            acc += x
            cdf.append(acc)
        tail, acc = [], Fraction(0) if exact else 0.0
        for x in reversed(p):
            acc += x
            tail.append(acc)
        self._cdf = tuple(cdf)
        self._tail = tuple(reversed(tail))

    # constructors
    @classmethod
    def point(cls, n: int) -> "DistOnZ":
        return cls([Fraction(0)] * n + [Fraction(1)])

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "DistOnZ":
        m = hi - lo + 1
        return cls([Fraction(0)] * lo + [Fraction(1, m)] * m)

    @classmethod
    def from_samples(cls, samples: Sequence[int]) -> "DistOnZ":
        s = np.asarray(samples, dtype=np.int64)
        if s.size == 0 or s.min() < 0:
            raise ValueError("need a nonempty sample of nonnegative integers")
        counts = np.bincount(s)
        return cls((counts / s.size).tolist())

    @classmethod
    def geometric(cls, rho: float, n_max: int) -> "DistOnZ":
        """``(1 - rho) rho^n`` truncated at ``n_max``; leftover mass lumped at ``n_max``."""
        p = (1 - rho) * rho ** np.arange(n_max + 1)
        p[-1] += rho ** (n_max + 1)
        return cls(p.tolist())

    # queries
    @property
    def exact(self) -> bool:
        return all(isinstance(x, (Fraction, int)) for x in self.probs)

    @property
    def n_max(self) -> int:
        return len(self.probs) - 1

    def pmf(self, n: int):
        return self.probs[n] if 0 <= n < len(self.probs) else self._zero()

    def cdf(self, n: int):
        """``P([0, n])``."""
        if n < 0:
            return self._zero()
        return self._cdf[min(n, len(self._cdf) - 1)]

    def tail(self, n: int):
        """``P([n, inf))``."""
        if n <= 0:
            return self._tail[0]
        return self._tail[n] if n < len(self._tail) else self._zero()

    def mean(self):
        return sum(n * x for n, x in enumerate(self.probs))

    def as_array(self) -> np.ndarray:
        return np.array([float(x) for x in self.probs])

    def sample(self, rng: np.random.Generator, size=None):
        c = np.array([float(x) for x in self._cdf])
        c /= c[-1]
        return np.searchsorted(c, rng.random(size), side="right")

    def _zero(self):
        return Fraction(0) if self.exact else 0.0

    def to_json(self) -> str:
        return json.dumps([str(x) if isinstance(x, Fraction) else float(x) for x in self.probs])

    @classmethod
    def from_json(cls, text: str) -> "DistOnZ":
        return cls([Fraction(x) if isinstance(x, str) else x for x in json.loads(text)])

    def __len__(self) -> int:
        return len(self.probs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DistOnZ):
            return NotImplemented
        return self.probs == other.probs

    def __hash__(self):
        return hash(self.probs)

    def __repr__(self) -> str:
        body = ", ".join(f"{n}: {x}" for n, x in enumerate(self.probs) if x != 0)
        return f"DistOnZ({{{body}}})"


def _tol(*ds: DistOnZ):
    # integer zero keeps Fraction arithmetic exact (Fraction - 0.0 would be a float)
    return 0 if all(d.exact for d in ds) else FLOAT_TOL


def preceq(xi: DistOnZ, zeta: DistOnZ, tol: float | None = None) -> bool:
    """``xi <= zeta``: ``xi([0,n]) >= zeta([0,n])`` for every ``n >= 0``."""
    if tol is None:
        tol = _tol(xi, zeta)
    top = max(len(xi), len(zeta))
    return all(xi.cdf(n) >= zeta.cdf(n) - tol for n in range(top))


def preceq_l(xi: DistOnZ, zeta: DistOnZ, l: int, tol: float | None = None) -> bool:
    """Prefix order: the CDF comparison only for ``n <= l``."""
    if l < 0:
        raise ValueError("l must be >= 0")
    if tol is None:
        tol = _tol(xi, zeta)
    return all(xi.cdf(n) >= zeta.cdf(n) - tol for n in range(l + 1))


def splice_K(xi: DistOnZ, zeta: DistOnZ, k: int) -> int:
    """Smallest ``K >= k`` with ``zeta([K+1,inf)) <= xi([k,inf)) <= zeta([K,inf))``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    tol = _tol(xi, zeta)
    if not preceq(xi, zeta, tol):
        raise ValueError("splice needs xi <= zeta")
    x = xi.tail(k)
    K = k
    while zeta.tail(K + 1) > x + tol:
        K += 1
    return K


def splice(xi: DistOnZ, zeta: DistOnZ, k: int) -> DistOnZ:
    """``xi <>_k zeta``: ``xi`` below ``k``, nothing on ``[k, K-1]``, ``zeta``'s tail above ``K``."""
    K = splice_K(xi, zeta, k)
    exact = xi.exact and zeta.exact
    zero = Fraction(0) if exact else 0.0
    size = max(k, K + 1, len(zeta))
    out = [zero] * size
    for n in range(min(k, len(xi))):
        out[n] = xi.probs[n]
    atom = 1 - xi.cdf(k - 1) - zeta.tail(K + 1)
    if not exact and -FLOAT_TOL < atom < 0:
        atom = 0.0
    out[K] = atom
    for n in range(K + 1, len(zeta)):
        out[n] = zeta.probs[n]
    return DistOnZ(out)


def splice_properties(xi: DistOnZ, zeta: DistOnZ, k: int) -> dict[str, bool]:
    """Evaluate the defining properties of ``xi <>_k zeta`` (and the atom bound)."""
    r = splice(xi, zeta, k)
    K = splice_K(xi, zeta, k)
    tol = _tol(xi, zeta)
    top = max(len(r), len(zeta), len(xi)) + 1
    return {
        "below_zeta": preceq(r, zeta, tol),
        "above_xi": preceq(xi, r, tol),
        "prefix_matches_xi": all(abs(r.cdf(n) - xi.cdf(n)) <= tol for n in range(k)),
        "tail_matches_zeta": all(abs(r.tail(n) - zeta.tail(n)) <= tol for n in range(K + 1, top)),
        "gap_empty": (r.cdf(K - 1) - r.cdf(k - 1)) <= tol if K > k else True,
        "atom_in_range": -tol <= r.pmf(K) <= zeta.pmf(K) + tol,
    }


def lemma_mix_check(kappa: DistOnZ, xi: DistOnZ, zeta: DistOnZ, k: int) -> bool:
    """Whether ``kappa <= zeta`` and ``kappa <=_k xi`` imply ``kappa <= xi <>_{k+1} zeta``.

    Returns True vacuously when the hypotheses fail.
    """
    if not preceq(xi, zeta):
        raise ValueError("lemma needs xi <= zeta")
    if not (preceq(kappa, zeta) and preceq_l(kappa, xi, k)):
        return True
    return preceq(kappa, splice(xi, zeta, k + 1))


# ---------------------------------------------------------------------------
# Poisson laws and the dominating batch


def poisson_dist(theta: float, tail_tol: float = 1e-12) -> DistOnZ:
    """Poisson(theta) cut where the upper tail drops below ``tail_tol``.

    The cut-off tail is lumped into the last atom so the CDF is exact below
    the cut and the total mass is one.
    """
    if theta < 0:
        raise ValueError("theta must be >= 0")
    if theta == 0:
        return DistOnZ([1.0])
    n = int(theta + 10 * math.sqrt(theta) + 20)
    while stats.poisson.sf(n, theta) >= tail_tol:
        n *= 2
    sf = stats.poisson.sf(np.arange(n + 1), theta)
    n_cut = int(np.argmax(sf < tail_tol))
    p = stats.poisson.pmf(np.arange(n_cut + 1), theta)
    p[-1] += sf[n_cut]
    return DistOnZ(p.tolist(), check=False)


def choose_K(theta: float, eps: float) -> int:
    """Smallest ``K`` with ``P(Poisson(theta) > K) < eps``."""
    if theta <= 0 or not (0 < eps < 1):
        raise ValueError("need theta > 0 and 0 < eps < 1")
    K = 0
    while stats.poisson.sf(K, theta) >= eps:
        K += 1
    return K


@dataclass(frozen=True)
class DominatingBatch:
    dist: DistOnZ
    K: int
    eps: float
    beta_used: float
    beta_adjusted: bool
    mean: float
    bound: float  # (T - delta/2) + eps * T * beta


def build_dominating_batch(T: float, delta: float, beta: float, eps: float = 1e-3, max_halvings: int = 60) -> DominatingBatch:
    """Construct ``Pois(T - delta/2) <>_{K+1} Pois(T beta)`` with mean below ``T - delta/4``.

    ``eps`` is halved until both the mean bound and ``mean < T - delta/4``
    hold. For ``beta <= 1`` the upper law uses ``beta = 1 + 1e-6`` and the
    result is flagged with ``beta_adjusted``.
    """
    if not (0 < delta < T):
        raise ValueError("need 0 < delta < T")
    if not (0 < eps < 1):
        raise ValueError("need 0 < eps < 1")
    adjusted = beta <= 1
    beta_used = max(beta, 1 + 1e-6)
    lo = T - delta / 2
    xi = poisson_dist(lo)
    zeta = poisson_dist(T * beta_used)
    for _ in range(max_halvings + 1):
        K = choose_K(lo, eps)
        r = splice(xi, zeta, K + 1)
        mean = float(r.mean())
        bound = lo + eps * T * beta_used
        if mean <= bound + 1e-9 and mean < T - delta / 4:
            return DominatingBatch(r, K, eps, beta_used, adjusted, mean, bound)
        eps /= 2
    raise RuntimeError(f"no admissible eps found for T={T}, delta={delta}, beta={beta}")


def dominating_batch_dist(T: float, delta: float, beta: float, eps: float = 1e-3) -> DistOnZ:
    return build_dominating_batch(T, delta, beta, eps).dist


@dataclass
class BatchQueueResult:
    samples: np.ndarray
    mean: float
    ci: tuple[float, float]
    time_average: float
    n_customers: int


def simulate_BT(batch: DistOnZ, T: float, d, horizon: float, rng: np.random.Generator, n_samples: int = 10_000, burn_in: float | None = None) -> BatchQueueResult:
    """Single FIFO server fed by i.i.d. batches at epochs ``0, T, 2T, ...``.

    Queue lengths (customer in service included) are read at ``n_samples``
    uniformly random times in ``[burn_in, horizon]``; the mean comes with a
    95% batch-means interval over 20 consecutive time blocks.
    """
    mean_batch = float(batch.mean())
    if mean_batch >= T:
        raise ValueError(f"batch mean {mean_batch:.6g} >= T={T}: queue is not ergodic")
    if burn_in is None:
        burn_in = horizon / 10
    n_epochs = int(math.ceil(horizon / T)) + 1
    sizes = batch.sample(rng, n_epochs)
    arrivals = np.repeat(np.arange(n_epochs) * T, sizes)
    service = np.asarray(d.sample(rng, arrivals.size), dtype=float)
    if arrivals.size:
        csum = np.cumsum(service)
        prev = np.concatenate(([0.0], csum[:-1]))
        departures = csum + np.maximum.accumulate(arrivals - prev)
    else:
        departures = arrivals

    times = np.sort(rng.uniform(burn_in, horizon, n_samples))
    q = np.searchsorted(arrivals, times, side="right") - np.searchsorted(departures, times, side="right")

    # exact time average of the step function on [burn_in, horizon]
    ev_t = np.concatenate((arrivals, departures))
    ev_d = np.concatenate((np.ones(arrivals.size), -np.ones(departures.size)))
    order = np.argsort(ev_t, kind="stable")
    ev_t, ev_d = ev_t[order], ev_d[order]
    level = np.cumsum(ev_d)
    seg_t = np.clip(np.concatenate((ev_t, [horizon])), burn_in, horizon)
    widths = np.diff(seg_t)
    time_avg = float(np.sum(level * widths) / (horizon - burn_in))

    blocks = np.array_split(q, 20)
    bm = np.array([b.mean() for b in blocks if b.size])
    half = float(stats.t.ppf(0.975, bm.size - 1) * bm.std(ddof=1) / math.sqrt(bm.size)) if bm.size > 1 else math.inf
    m = float(q.mean())
    return BatchQueueResult(q, m, (m - half, m + half), time_avg, int(arrivals.size))


# ---------------------------------------------------------------------------
# empirical dominance


@dataclass
class DominanceReport:
    passed: bool
    confidence: float
    n_lo: int
    n_hi: int
    band_lo: float
    band_hi: float
    worst_gap: float
    worst_n: int
    gaps: list[float] = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "confidence": self.confidence,
            "n_lo": self.n_lo,
            "n_hi": self.n_hi,
            "band_lo": self.band_lo,
            "band_hi": self.band_hi,
            "worst_gap": self.worst_gap,
            "worst_n": self.worst_n,
            "cdf_gaps": self.gaps,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def dkw_band(n: int, alpha: float, one_sided: bool = True) -> float:
    """DKW/Massart half-width: ``P(sup (F_n - F) > eps) <= exp(-2 n eps^2)``."""
    return math.sqrt(math.log((1 if one_sided else 2) / alpha) / (2 * n))


def empirical_dominance_test(samples_lo, samples_hi, confidence: float = 0.99) -> DominanceReport:
    """Test that the law of ``samples_lo`` is dominated by that of ``samples_hi``.

    Fails when some ``n`` has ``F_lo(n) + band_lo < F_hi(n) - band_hi``, the
    bands being one-sided DKW half-widths at level ``(1 - confidence) / 2``
    each. ``gaps[n]`` is ``(F_lo(n) + band_lo) - (F_hi(n) - band_hi)``.
    """
    lo = np.asarray(samples_lo, dtype=np.int64)
    hi = np.asarray(samples_hi, dtype=np.int64)
    if lo.size == 0 or hi.size == 0:
        raise ValueError("both samples must be nonempty")
    alpha = (1 - confidence) / 2
    b_lo, b_hi = dkw_band(lo.size, alpha), dkw_band(hi.size, alpha)
    top = int(max(lo.max(), hi.max())) + 1
    f_lo = np.cumsum(np.bincount(lo, minlength=top)) / lo.size
    f_hi = np.cumsum(np.bincount(hi, minlength=top)) / hi.size
    gaps = (f_lo + b_lo) - (f_hi - b_hi)
    worst = int(np.argmin(gaps))
    return DominanceReport(
        bool(gaps.min() >= 0), confidence, int(lo.size), int(hi.size), b_lo, b_hi,
        float(gaps[worst]), worst, gaps.tolist(),
    )
