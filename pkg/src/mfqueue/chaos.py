"""Statistical comparison of the finite network with its mean-field limit.

Estimators for covariance gaps between distinct nodes, fluctuations of
empirical averages, and distances between empirical node laws and solver
output. Confidence intervals come from a moving-block bootstrap over
snapshots, which also absorbs the residual autocorrelation of spaced
snapshots.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import stats

from .dominance import DistOnZ
from .network import Snapshots
from .nlmp import MeasureGrid
from .oracles import compositions, ctmc_stationary, n_compositions

N_BOOT = 1000


class Kind(str, enum.Enum):
    K_EQ = "k_eq"
    K_LE = "k_le"
    BOUNDED_Z = "bounded_z"
    K_VALUE = "k_value"
    CONSTANT = "constant"


@dataclass(frozen=True)
class TestFunction:
    """Bounded function of a node state ``(z, k)``.

    ``k_eq(j)`` and ``k_le(j)`` are indicators, ``bounded_z(w)`` is
    ``min(z, w)`` on busy nodes and 0 on empty ones, ``k_value(cap)`` is
    ``min(k, cap)`` and ``constant(c)`` is ``c``.
    """

    __test__ = False  # not a pytest class

    kind: Kind
    param: float = 0.0

    @classmethod
    def k_eq(cls, j: int) -> "TestFunction":
        return cls(Kind.K_EQ, j)

    @classmethod
    def k_le(cls, j: int) -> "TestFunction":
        return cls(Kind.K_LE, j)

    @classmethod
    def bounded_z(cls, w: float) -> "TestFunction":
        if w <= 0:
            raise ValueError("window must be > 0")
        return cls(Kind.BOUNDED_Z, w)

    @classmethod
    def k_value(cls, cap: int) -> "TestFunction":
        return cls(Kind.K_VALUE, cap)

    @classmethod
    def constant(cls, c: float) -> "TestFunction":
        return cls(Kind.CONSTANT, c)

    @property
    def bound(self) -> float:
        if self.kind in (Kind.K_EQ, Kind.K_LE):
            return 1.0
        return abs(self.param)

    def __call__(self, k, z=None) -> np.ndarray:
        k = np.asarray(k)
        if self.kind is Kind.K_EQ:
            return (k == self.param).astype(float)
        if self.kind is Kind.K_LE:
            return (k <= self.param).astype(float)
        if self.kind is Kind.K_VALUE:
            return np.minimum(k, self.param).astype(float)
        if self.kind is Kind.CONSTANT:
            return np.full(k.shape, float(self.param))
        if z is None:
            raise ValueError("bounded_z needs elapsed times")
        return np.where(k > 0, np.minimum(np.asarray(z, dtype=float), self.param), 0.0)


@dataclass
class ComparisonReport:
    """Named metrics with confidence intervals and optional pass/fail against tolerances."""

    metrics: dict[str, float]
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)
    n: dict[str, int] = field(default_factory=dict)
    tolerances: dict[str, float] = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def checks(self) -> dict[str, bool]:
        return {k: bool(self.metrics[k] < tol) for k, tol in self.tolerances.items()}

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checks"] = self.checks
        d["passed"] = self.passed
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=to_jsonable, **kw)

    def rows(self, **labels) -> list[dict]:
        out = []
        for name, v in self.metrics.items():
            lo, hi = self.ci.get(name, (math.nan, math.nan))
            out.append({**labels, "statistic": name, "value": v, "ci_lo": lo, "ci_hi": hi})
        return out


def to_jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, Fraction):
        return str(x)
    raise TypeError(type(x))


def rows_to_csv(rows: list[dict], header: dict | None = None) -> str:
    buf = io.StringIO()
    if header is not None:
        buf.write(f"# {json.dumps(header, sort_keys=True)}\n")
    if rows:
        cols = list(rows[0])
        for r in rows[1:]:
            cols += [c for c in r if c not in cols]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# distances


def tv_distance(p, q) -> float:
    """Total variation between two pmfs on 0..n (the shorter one is zero-padded)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = max(len(p), len(q))
    p = np.pad(p, (0, n - len(p)))
    q = np.pad(q, (0, n - len(q)))
    return 0.5 * float(np.abs(p - q).sum())


def w1_distance(x, y, wx=None, wy=None) -> float:
    """Wasserstein-1 distance between two weighted samples on the line."""
    return float(stats.wasserstein_distance(x, y, wx, wy))


def empirical_pmf(samples, n: int | None = None) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.int64).ravel()
    top = int(samples.max()) + 1 if n is None else n
    return np.bincount(samples, minlength=top)[:top] / samples.size


# ---------------------------------------------------------------------------
# bootstrap


def _block_indices(n: int, block: int, rng: np.random.Generator) -> np.ndarray:
    block = max(1, min(block, n))
    nb = math.ceil(n / block)
    starts = rng.integers(0, n - block + 1, size=nb)
    return (starts[:, None] + np.arange(block)).ravel()[:n]


def default_block(n: int) -> int:
    return max(1, round(n ** (1 / 3)))


def block_bootstrap(data: np.ndarray, stat, n_boot: int = N_BOOT, block: int | None = None, seed=0) -> np.ndarray:
    """Replicates of ``stat(data[idx])`` with moving-block resampling of the rows."""
    rng = np.random.default_rng(seed)
    n = len(data)
    block = default_block(n) if block is None else block
    return np.array([stat(data[_block_indices(n, block, rng)]) for _ in range(n_boot)])


def _ci(reps: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    a = (1 - level) / 2
    return float(np.quantile(reps, a)), float(np.quantile(reps, 1 - a))


# ---------------------------------------------------------------------------
# propagation of chaos


@dataclass
class PocEstimate:
    joint: float
    product: float
    gap: float
    ci: tuple[float, float]
    se: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def poc_estimate(snaps: Snapshots, fs: Sequence[TestFunction], nodes: Sequence[int] | None = None, *,
                 symmetrize: bool = False, n_boot: int = N_BOOT, block: int | None = None,
                 level: float = 0.95, seed=0) -> PocEstimate:
    """Joint expectation of ``prod f_i(node_i)`` against the product of the marginal expectations.

    With ``symmetrize=True`` (two functions only) the joint term averages
    ``f(q_i) g(q_j)`` over all ordered pairs ``i != j`` and the marginals are
    pooled over nodes; by exchangeability this estimates the same quantity
    with far less variance.
    """
    fs = list(fs)
    live = [f for f in fs if f.kind is not Kind.CONSTANT]
    if len(live) <= 1:
        # a constant factor is independent of everything: the gap is exactly zero
        c = float(np.prod([f.param for f in fs if f.kind is Kind.CONSTANT]))
        if live:
            f = live[0]
            i = 0 if symmetrize or nodes is None else list(nodes)[fs.index(f)]
            vals = f(snaps.k, snaps.z) if symmetrize else f(snaps.k[:, i], snaps.z[:, i])
            c *= float(np.mean(vals))
        return PocEstimate(c, c, 0.0, (0.0, 0.0), 0.0, len(snaps))
    if symmetrize:
        if len(fs) != 2:
            raise ValueError("symmetrized estimator needs exactly two functions")
        N = snaps.N
        if N < 2:
            raise ValueError("need at least two nodes")
        F = fs[0](snaps.k, snaps.z)
        G = fs[1](snaps.k, snaps.z)
        sf, sg = F.sum(axis=1), G.sum(axis=1)
        pair = (sf * sg - (F * G).sum(axis=1)) / (N * (N - 1))
        data = np.column_stack([pair, sf / N, sg / N])

        def parts(x):
            m = x.mean(axis=0)
            return m[0], m[1] * m[2]
    else:
        nodes = list(range(len(fs))) if nodes is None else list(nodes)
        if len(set(nodes)) != len(nodes) or len(nodes) != len(fs):
            raise ValueError("need one distinct node index per function")
        cols = [f(snaps.k[:, i], snaps.z[:, i]) for f, i in zip(fs, nodes)]
        data = np.column_stack([np.prod(cols, axis=0)] + cols)

        def parts(x):
            m = x.mean(axis=0)
            return m[0], float(np.prod(m[1:]))

    joint, product = parts(data)
    reps = block_bootstrap(data, lambda x: float(np.subtract(*parts(x))), n_boot, block, seed)
    return PocEstimate(float(joint), float(product), float(joint - product), _ci(reps, level),
                       float(reps.std(ddof=1)), len(data))


def loglog_slope(Ns, values) -> float:
    """Least-squares slope of ``log|value|`` against ``log(1/N)``."""
    x = np.log(1.0 / np.asarray(Ns, dtype=float))
    y = np.log(np.abs(np.asarray(values, dtype=float)))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class LLNReport:
    Ns: list[int]
    means: list[float]
    variances: list[float]
    slope: float  # of log variance against log N

    def to_dict(self) -> dict:
        return asdict(self)


def lln_test(runs: dict[int, Snapshots], f: TestFunction) -> LLNReport:
    """Variance of the node average of ``f`` across snapshots, for each N, and its log-log slope."""
    Ns = sorted(runs)
    means, variances = [], []
    for N in Ns:
        s = runs[N]
        avg = f(s.k, s.z).mean(axis=1)
        means.append(float(avg.mean()))
        variances.append(float(avg.var(ddof=1)) if len(avg) > 1 else 0.0)
    v = np.asarray(variances)
    if len(Ns) >= 2 and np.all(v > 0):
        slope = float(np.polyfit(np.log(Ns), np.log(v), 1)[0])
    else:
        slope = math.nan
    return LLNReport(Ns, means, variances, slope)


# ---------------------------------------------------------------------------
# finite-time and stationary comparisons


def _busy_z(mu: MeasureGrid) -> tuple[np.ndarray, np.ndarray]:
    w = mu.z_marginal()
    keep = w > 0
    return mu.z_points[keep], w[keep]


def measure_distance(k, z, mu: MeasureGrid) -> tuple[float, float]:
    """TV between queue-length laws and W1 between busy elapsed-time laws."""
    k = np.asarray(k).ravel()
    z = np.asarray(z).ravel()
    if k.max(initial=0) > mu.k_max:
        emp = empirical_pmf(k)
    else:
        emp = empirical_pmf(k, mu.k_max + 1)
    tv = tv_distance(emp, mu.k_marginal())
    busy = k > 0
    gz, gw = _busy_z(mu)
    if busy.any() and gw.size:
        w1 = w1_distance(z[busy], gz, None, gw)
    else:
        w1 = 0.0 if not busy.any() and not gw.size else math.nan
    return tv, w1


def wph_compare(runs: Sequence[Snapshots], measures: dict[float, MeasureGrid], times: Sequence[float],
                level: float = 0.95) -> ComparisonReport:
    """Distance of each replica's empirical measure from the limit measure at each time.

    ``runs[r].k[n]`` is replica ``r`` at ``times[n]``. Reports the replica
    mean of TV (queue length) and W1 (elapsed time) with a normal CI.
    """
    times = list(times)
    metrics, ci, n = {}, {}, {}
    zq = stats.norm.ppf(0.5 + level / 2)
    for idx, t in enumerate(times):
        mu = _lookup(measures, t)
        tvs, w1s = [], []
        for r in runs:
            if len(r) != len(times):
                raise ValueError("each run needs one snapshot per time")
            tv, w1 = measure_distance(r.k[idx], r.z[idx], mu)
            tvs.append(tv)
            w1s.append(w1)
        for name, vals in ((f"tv_k@{t:g}", np.array(tvs)), (f"w1_z@{t:g}", np.array(w1s))):
            m = float(np.nanmean(vals))
            h = float(zq * np.nanstd(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
            metrics[name] = m
            ci[name] = (m - h, m + h)
            n[name] = len(vals)
    return ComparisonReport(metrics, ci, n)


def _lookup(measures: dict[float, MeasureGrid], t: float) -> MeasureGrid:
    for key, mu in measures.items():
        if abs(key - t) < 1e-9:
            return mu
    raise KeyError(f"no limit measure at t={t}")


def corollary_k_compare(counts, reference: DistOnZ, tol: float | None = None, n_boot: int = N_BOOT,
                        seed=0) -> ComparisonReport:
    """Empirical law of tagged-node arrival counts against a reference law."""
    counts = np.asarray(counts, dtype=np.int64)
    ref = reference.as_array()
    n = max(int(counts.max(initial=0)) + 1, len(ref))
    emp = empirical_pmf(counts, n)
    tv = tv_distance(emp, ref)
    rng = np.random.default_rng(seed)
    reps = np.array([tv_distance(empirical_pmf(rng.choice(counts, counts.size), n), ref) for _ in range(n_boot)])
    report = ComparisonReport(
        {"tv": tv, "mean_gap": float(counts.mean() - float(reference.mean()))},
        {"tv": _ci(reps)},
        {"tv": int(counts.size)},
        {} if tol is None else {"tv": tol},
        {"gaps": (emp - np.pad(ref, (0, n - len(ref)))).tolist()},
    )
    return report


def sph_compare(snaps: Snapshots, nu, tol: float | None = None, n_boot: int = N_BOOT, block: int | None = None,
                seed=0) -> ComparisonReport:
    """Pooled stationary queue-length law of the network against ``nu``.

    ``nu`` is a MeasureGrid (then busy elapsed times are compared too) or a pmf.
    """
    if isinstance(nu, MeasureGrid):
        ref = nu.k_marginal()
    else:
        ref = nu.as_array() if isinstance(nu, DistOnZ) else np.asarray(nu, dtype=float)
    n = max(int(snaps.k.max(initial=0)) + 1, len(ref))
    per_snap = np.stack([np.bincount(row, minlength=n) for row in snaps.k]) / snaps.N
    emp = per_snap.mean(axis=0)
    tv = tv_distance(emp, ref)
    reps = block_bootstrap(per_snap, lambda x: tv_distance(x.mean(axis=0), ref), n_boot, block, seed)
    metrics = {"tv_k": tv}
    ci = {"tv_k": _ci(reps)}
    if isinstance(nu, MeasureGrid):
        metrics["w1_z"] = measure_distance(snaps.k, snaps.z, nu)[1]
    return ComparisonReport(metrics, ci, {"tv_k": len(snaps), "nodes": snaps.N},
                            {} if tol is None else {"tv_k": tol}, {"empirical": emp.tolist()})


# ---------------------------------------------------------------------------
# exact small-network law


def exact_small_oracle(N: int, M: int, max_states: int = 100_000, crosscheck: bool = True) -> dict[tuple, Fraction]:
    """Stationary joint law of ``(k_1, ..., k_N)`` for exponential service: uniform over compositions.

    For at most 1000 states the result is cross-checked against a direct
    solve of the generator.
    """
    count = n_compositions(N, M)
    if count > max_states:
        raise ValueError(f"{count} compositions exceed the cap {max_states}")
    p = Fraction(1, count)
    law = {c: p for c in compositions(N, M)}
    if crosscheck and count <= 1000:
        pi = ctmc_stationary(N, M)
        err = max(abs(pi[c] - float(p)) for c in law)
        if err > 1e-9:
            raise AssertionError(f"product form disagrees with the generator solve by {err:.3g}")
    return law


def exchangeability_test(snaps: Snapshots, i: int = 0, j: int = 1, n_perm: int = 1000, seed=0) -> float:
    """Permutation p-value for ``law(k_i, k_j) == law(k_j, k_i)``.

    The statistic is the TV distance between the two empirical joint laws;
    under exchangeability swapping the pair within any snapshot leaves the
    law unchanged, which gives the permutation distribution.
    """
    a = snaps.k[:, i].astype(np.int64)
    b = snaps.k[:, j].astype(np.int64)
    m = int(max(a.max(initial=0), b.max(initial=0))) + 1

    def stat(x, y):
        h1 = np.bincount(x * m + y, minlength=m * m)
        h2 = np.bincount(y * m + x, minlength=m * m)
        return 0.5 * np.abs(h1 - h2).sum() / len(x)

    obs = stat(a, b)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        swap = rng.random(len(a)) < 0.5
        x = np.where(swap, b, a)
        y = np.where(swap, a, b)
        hits += stat(x, y) >= obs - 1e-15
    return (1 + hits) / (1 + n_perm)
