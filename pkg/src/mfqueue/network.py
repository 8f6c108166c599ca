"""Discrete-event simulation of the closed mean-field network.

``N`` FIFO servers share ``M`` customers. When a service ends, the customer
joins the back of a uniformly chosen queue (possibly the same one). Service
durations are drawn in full when a service starts, so the only events are
service completions and the elapsed time ``z`` of a busy node is the clock
minus its service start.
"""

from __future__ import annotations

import copy
import csv
import enum
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .service import ServiceDistribution

__all__ = [
    "QueueState",
    "NetworkState",
    "Placement",
    "Streams",
    "EventLog",
    "Snapshots",
    "init_state",
    "run",
    "sample_stationary",
    "empirical_measure",
    "tagged_arrival_counts",
    "tagged_arrival_count",
]


@dataclass(frozen=True)
class QueueState:
    """One node: queue length ``k`` (customer in service included) and elapsed service ``z``."""

    k: int
    z: float = 0.0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.k == 0 and self.z != 0.0:
            object.__setattr__(self, "z", 0.0)

    @property
    def empty(self) -> bool:
        return self.k == 0


EMPTY = QueueState(0)


class Placement(str, enum.Enum):
    ALL_AT_ONE = "all_at_one"
    ROUND_ROBIN = "round_robin"
    RANDOM_UNIFORM = "random_uniform"


@dataclass
class NetworkState:
    """State of the whole network.

    ``completion[i]`` is the absolute completion time of the service in
    progress at node ``i`` (``inf`` when idle, ``nan`` when a busy node has
    not drawn its service time yet).
    """

    k: np.ndarray
    start: np.ndarray
    completion: np.ndarray
    t: float = 0.0

    @property
    def N(self) -> int:
        return len(self.k)

    @property
    def M(self) -> int:
        return int(self.k.sum())

    @property
    def z(self) -> np.ndarray:
        return np.where(self.k > 0, self.t - self.start, 0.0)

    @property
    def nodes(self) -> list[QueueState]:
        return [QueueState(int(k), float(z)) for k, z in zip(self.k, self.z)]

    def copy(self) -> "NetworkState":
        return NetworkState(self.k.copy(), self.start.copy(), self.completion.copy(), self.t)

    @classmethod
    def from_nodes(cls, nodes: Sequence[QueueState], t: float = 0.0) -> "NetworkState":
        k = np.array([q.k for q in nodes], dtype=np.int64)
        z = np.array([q.z for q in nodes], dtype=float)
        start = np.where(k > 0, t - z, np.nan)
        completion = np.where(k > 0, np.nan, np.inf)
        return cls(k, start, completion, t)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "k": self.k.tolist(),
            "z": self.z.tolist(),
            "completion": [None if not math.isfinite(c) else c for c in self.completion.tolist()],
        }


def init_state(N: int, M: int, placement=Placement.ROUND_ROBIN, rng: np.random.Generator | None = None) -> NetworkState:
    """Place ``M`` customers on ``N`` nodes, all services about to start (``z = 0``)."""
    if N < 1 or M < 0:
        raise ValueError("need N >= 1 and M >= 0")
    placement = Placement(placement)
    if placement is Placement.ALL_AT_ONE:
        k = np.zeros(N, dtype=np.int64)
        k[0] = M
    elif placement is Placement.ROUND_ROBIN:
        k = np.bincount(np.arange(M) % N, minlength=N).astype(np.int64)
    else:
        if rng is None:
            raise ValueError("random placement needs an rng")
        k = np.bincount(rng.integers(0, N, M), minlength=N).astype(np.int64)
    start = np.where(k > 0, 0.0, np.nan)
    completion = np.where(k > 0, np.nan, np.inf)
    return NetworkState(k, start, completion, 0.0)


class Streams:
    """Random sources for one replica: service times and routing on separate streams.

    With ``per_node=True`` each node owns its service-time stream, which is
    what coupling experiments need; see :meth:`permuted`.
    """

    def __init__(self, dist: ServiceDistribution, N: int, seed=None, *, per_node: bool = False, chunk: int = 256):
        self.dist = dist
        self.N = N
        self.per_node = per_node
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.seed_entropy = ss.entropy
        route_ss, service_ss = ss.spawn(2)
        self._route_rng = np.random.default_rng(route_ss)
        if per_node:
            self._service_rngs = [np.random.default_rng(s) for s in service_ss.spawn(N)]
        else:
            self._service_rngs = [np.random.default_rng(service_ss)]
        self._chunk = chunk
        self._sbuf: list[list[float]] = [[] for _ in self._service_rngs]
        self._spos = [0] * len(self._service_rngs)
        self._rbuf: list[int] = []
        self._rpos = 0
        self._relabel: list[int] | None = None
        self._owner: list[int] | None = None

    def permuted(self, perm: Sequence[int]) -> "Streams":
        """Streams for the relabelled network where old node ``i`` becomes ``perm[i]``.

        Node ``perm[i]`` reads node ``i``'s service stream and every routing
        draw ``j`` is mapped to ``perm[j]``. Requires ``per_node``.
        """
        if not self.per_node:
            raise ValueError("permuted streams need per_node=True")
        other = copy.deepcopy(self)
        perm = list(perm)
        inv = [0] * len(perm)
        for i, p in enumerate(perm):
            inv[p] = i
        other._relabel = perm
        other._owner = inv
        return other

    def service(self, node: int) -> float:
        s = self._owner[node] if self._owner is not None else (node if self.per_node else 0)
        pos = self._spos[s]
        buf = self._sbuf[s]
        if pos == len(buf):
            buf = self._sbuf[s] = np.asarray(self.dist.sample(self._service_rngs[s], self._chunk)).tolist()
            pos = 0
        self._spos[s] = pos + 1
        return buf[pos]

    def residual(self, node: int, elapsed: float) -> float:
        s = self._owner[node] if self._owner is not None else (node if self.per_node else 0)
        return float(self.dist.sample_residual(elapsed, self._service_rngs[s]))

    def route(self) -> int:
        pos = self._rpos
        if pos == len(self._rbuf):
            self._rbuf = self._route_rng.integers(0, self.N, max(self._chunk, 1024)).tolist()
            pos = 0
        self._rpos = pos + 1
        j = self._rbuf[pos]
        return self._relabel[j] if self._relabel is not None else j


@dataclass
class EventLog:
    """Completion events: time, source node, destination node."""

    times: list[float] = field(default_factory=list)
    src: list[int] = field(default_factory=list)
    dst: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class RunResult:
    state: NetworkState
    n_events: int
    arrivals: np.ndarray  # routed arrivals per node during the run
    log: EventLog | None = None
    occupancy: np.ndarray | None = None  # (N, M+1) time spent at each queue length


Observer = Callable[[float, int, int, NetworkState], None]


def run(
    state: NetworkState,
    dist: ServiceDistribution,
    horizon: float,
    streams: Streams,
    observers: Sequence[Observer] = (),
    *,
    max_events: int | None = None,
    record_log: bool = False,
    occupancy: bool = False,
) -> RunResult:
    """Advance ``state`` (in place) by ``horizon`` time units or ``max_events`` completions.

    The clock stops at ``state.t + horizon`` unless the event budget runs out
    first, in which case it stops at the last event. Observers are called as
    ``obs(t, src, dst, state)`` after each event with the arrays synchronized.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    N = state.N
    M = state.M
    k = state.k.tolist()
    start = state.start.tolist()
    comp = state.completion.tolist()
    t0 = state.t
    t_end = t0 + horizon
    for i in range(N):
        if k[i] > 0 and not (comp[i] == comp[i]):  # nan: draw pending service
            z = t0 - start[i]
            comp[i] = t0 + (streams.residual(i, z) if z > 0 else streams.service(i))
    heap = [(comp[i], i) for i in range(N) if k[i] > 0]
    heapq.heapify(heap)
    arrivals = [0] * N
    log = EventLog() if record_log else None
    occ = [0.0] * (N * (M + 1)) if occupancy else None
    last = [t0] * N if occupancy else None
    budget = math.inf if max_events is None else max_events
    n = 0
    t = t0
    pop, push = heapq.heappop, heapq.heappush
    service, route = streams.service, streams.route

    while heap and heap[0][0] <= t_end and n < budget:
        t, i = pop(heap)
        j = route()
        if occ is not None:
            occ[i * (M + 1) + k[i]] += t - last[i]
            last[i] = t
            if j != i:
                occ[j * (M + 1) + k[j]] += t - last[j]
                last[j] = t
        k[i] -= 1
        k[j] += 1
        arrivals[j] += 1
        if k[i] > 0:
            start[i] = t
            c = t + service(i)
            comp[i] = c
            push(heap, (c, i))
        else:
            start[i] = math.nan
            comp[i] = math.inf
        if j != i and k[j] == 1:
            start[j] = t
            c = t + service(j)
            comp[j] = c
            push(heap, (c, j))
        n += 1
        if log is not None:
            log.times.append(t)
            log.src.append(i)
            log.dst.append(j)
        if observers:
            _sync(state, k, start, comp, t)
            for obs in observers:
                obs(t, i, j, state)

    t_stop = t_end if n < budget else t
    if occ is not None:
        for i in range(N):
            occ[i * (M + 1) + k[i]] += t_stop - last[i]
    _sync(state, k, start, comp, t_stop)
    return RunResult(
        state,
        n,
        np.array(arrivals, dtype=np.int64),
        log,
        None if occ is None else np.array(occ).reshape(N, M + 1),
    )


def _sync(state: NetworkState, k, start, comp, t) -> None:
    state.k = np.array(k, dtype=np.int64)
    state.start = np.array(start, dtype=float)
    state.completion = np.array(comp, dtype=float)
    state.t = t


@dataclass
class Snapshots:
    """Spaced snapshots of a run: ``k[s, i]`` and ``z[s, i]`` for snapshot ``s`` and node ``i``."""

    k: np.ndarray
    z: np.ndarray
    t: np.ndarray
    seed: int | None = None

    def __len__(self) -> int:
        return self.k.shape[0]

    @property
    def N(self) -> int:
        return self.k.shape[1]

    def state(self, s: int) -> list[QueueState]:
        return [QueueState(int(a), float(b)) for a, b in zip(self.k[s], self.z[s])]

    def marginal_k(self, pooled: bool = True, node: int = 0, k_max: int | None = None) -> np.ndarray:
        """Empirical law of the queue length, pooled over nodes or for one node."""
        data = self.k.ravel() if pooled else self.k[:, node]
        top = int(data.max()) + 1 if k_max is None else k_max + 1
        return np.bincount(data, minlength=top)[:top] / data.size

    def to_csv(self, fh=None, header: dict | None = None) -> str:
        buf = fh if fh is not None else io.StringIO()
        meta = dict(header or {})
        meta.setdefault("seed", self.seed)
        buf.write(f"# {json.dumps(meta, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["snapshot", "t", "node", "k", "z"])
        for s in range(len(self)):
            ts = repr(float(self.t[s]))
            for i in range(self.N):
                w.writerow([s, ts, i, int(self.k[s, i]), repr(float(self.z[s, i]))])
        return buf.getvalue() if fh is None else ""

    def to_json(self, header: dict | None = None) -> str:
        meta = dict(header or {})
        meta.setdefault("seed", self.seed)
        return json.dumps({"header": meta, "t": self.t.tolist(), "k": self.k.tolist(), "z": self.z.tolist()}, sort_keys=True)


def sample_stationary(
    N: int,
    M: int,
    dist: ServiceDistribution,
    n_samples: int,
    *,
    burn_in: float | None = None,
    spacing: float | None = None,
    seed=None,
    placement=Placement.ROUND_ROBIN,
    streams: Streams | None = None,
) -> Snapshots:
    """Spaced snapshots approximating the stationary law of the network.

    ``burn_in`` and ``spacing`` are in time units. When omitted, burn-in is
    ``50 M`` completions and the spacing is the time that ``5 M``
    completions take at the throughput observed during burn-in. Snapshots
    are always taken at fixed times, never at event epochs, since the state
    seen just after a completion is biased.
    """
    if streams is None:
        streams = Streams(dist, N, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2]) if placement == Placement.RANDOM_UNIFORM else None
    state = init_state(N, M, placement, rng)
    K = np.empty((n_samples, N), dtype=np.int64)
    Z = np.empty((n_samples, N))
    T = np.empty(n_samples)
    if M == 0:
        K[:] = 0
        Z[:] = 0.0
        T[:] = 0.0
        return Snapshots(K, Z, T, _seed_int(seed))
    if burn_in is None:
        res = run(state, dist, math.inf, streams, max_events=50 * M)
        if spacing is None:
            spacing = state.t / 10.0
    else:
        if burn_in <= 0:
            raise ValueError("burn_in must be > 0")
        res = run(state, dist, burn_in, streams)
        if spacing is None:
            spacing = 5 * M * burn_in / max(res.n_events, 1)
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    for s in range(n_samples):
        run(state, dist, spacing, streams)
        K[s] = state.k
        Z[s] = state.z
        T[s] = state.t
    return Snapshots(K, Z, T, _seed_int(seed))


def _seed_int(seed):
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.entropy) if isinstance(seed.entropy, int) else None
    return None


def empirical_measure(state: NetworkState) -> list[tuple[QueueState, float]]:
    """Atoms of the empirical measure, each with weight ``1/N``."""
    w = 1.0 / state.N
    return [(q, w) for q in state.nodes]


def tagged_arrival_counts(state: NetworkState, dist: ServiceDistribution, T: float, streams: Streams) -> np.ndarray:
    """Routed arrivals to every node during ``[t, t + T]``; ``state`` is left untouched."""
    if T <= 0:
        raise ValueError("T must be > 0")
    return run(state.copy(), dist, T, streams).arrivals


def tagged_arrival_count(state: NetworkState, dist: ServiceDistribution, node: int, T: float, streams: Streams) -> int:
    return int(tagged_arrival_counts(state, dist, T, streams)[node])


def trajectory(state: NetworkState, dist: ServiceDistribution, times: Sequence[float], streams: Streams) -> Snapshots:
    """Snapshots of one run at the given increasing absolute times (``state`` is copied)."""
    s = state.copy()
    times = list(times)
    K = np.empty((len(times), s.N), dtype=np.int64)
    Z = np.empty((len(times), s.N))
    for n, t in enumerate(times):
        if t < s.t:
            raise ValueError("times must be increasing and not before the state clock")
        run(s, dist, t - s.t, streams)
        K[n] = s.k
        Z[n] = s.z
    return Snapshots(K, Z, np.asarray(times, dtype=float))
