"""Simulated parameter server running asynchronous minibatch SGD.

Three roles, all in one process: a coordinator that owns barrier state
and hands out operation permits, worker loops that pull parameter
snapshots and push gradient messages, and server shards that each own a
disjoint slice of the key space and serialize every mutation to it.

The staleness knob P is the number of SGD operations each worker runs
between synchronization barriers; P=1 degenerates to synchronous SGD.
At a barrier all in-flight gradients have been applied, every stored
vector is projected into the radius-1/sqrt(gamma) ball, the aggregate
sums are recomputed exactly, and the training loss is recorded.

Two execution modes share every code path that touches numbers:
"serial" runs workers round-robin on the calling thread and is bit-for-
bit reproducible, "threads" runs real worker threads with per-shard
locks.  Gradients are applied to the live server state immediately on
receipt; there is no cross-worker averaging.
"""

from __future__ import annotations

import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from cohash.core import (
    Dataset,
    FactorMatrices,
    Hyperparams,
    active_sum,
    dch_loss,
    init_factors,
    mf_loss,
    minibatch_gradients,
    project,
    round_codes,
)
from cohash.retrieval import CodeSet

__all__ = [
    "ParameterKey",
    "PullRequest",
    "PullResponse",
    "GradientMessage",
    "ServerShard",
    "TrainResult",
    "OpEvent",
    "ProtocolError",
    "DivergenceError",
    "partition_data",
    "shard_of",
    "has_converged",
    "run_training",
    "CONVERGENCE_WINDOW",
    "CONVERGENCE_TOL",
    "DIVERGENCE_FACTOR",
]

KIND_USER = "user"
KIND_ITEM = "item"
KIND_AGG_U = "aggregate-u"
KIND_AGG_V = "aggregate-v"
_KINDS = (KIND_USER, KIND_ITEM, KIND_AGG_U, KIND_AGG_V)

CONVERGENCE_WINDOW = 5
CONVERGENCE_TOL = 1e-5
DIVERGENCE_FACTOR = 1e6


class ProtocolError(RuntimeError):
    """A message referenced a key its target shard does not own."""


class DivergenceError(RuntimeError):
    """Training loss blew past DIVERGENCE_FACTOR times its initial value."""

    def __init__(self, message: str, losses: list[float]):
        super().__init__(message)
        self.losses = losses


@dataclass(frozen=True)
class ParameterKey:
    """Addresses one stored vector: a user row, item row, or aggregate sum."""

    kind: str
    index: int = 0

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown key kind {self.kind!r}")
        if self.kind in (KIND_AGG_U, KIND_AGG_V) and self.index != 0:
            raise ValueError("aggregate keys carry no entity index")


def shard_of(key: ParameterKey, num_shards: int) -> int:
    """Stable shard assignment: crc32 of the key's text form, mod S.

    crc32 rather than the builtin hash so placement does not move
    between interpreter runs.
    """
    return zlib.crc32(f"{key.kind}:{key.index}".encode()) % num_shards


@dataclass(frozen=True)
class PullRequest:
    """Keys a worker needs for one operation: the minibatch's entities
    plus the two aggregate sums."""

    worker: int
    op: int
    keys: tuple[ParameterKey, ...]


@dataclass
class PullResponse:
    """Value snapshots for the requested keys.

    ``shard_clocks`` are the logical clocks of every touched shard and
    ``barrier_index`` is the coordinator's barrier count, both at
    snapshot time; the staleness assertions read them back when the
    resulting gradient is applied.
    """

    values: dict[ParameterKey, np.ndarray]
    shard_clocks: dict[int, int]
    barrier_index: int


@dataclass(frozen=True)
class GradientMessage:
    """Per-key gradient contributions pushed by one worker operation.

    Keys must be a subset of the preceding pull's keys; aggregates are
    never pushed, the owning shard adjusts them from the vector deltas.
    """

    worker: int
    op: int
    grads: tuple[tuple[ParameterKey, np.ndarray], ...]


class ServerShard:
    """Owns a slice of the key space; all mutations are serialized here.

    The logical clock counts applied key updates.  Updating a user or
    item vector also reports the (new - old) delta so the runtime can
    forward it to whichever shard owns the matching aggregate.
    """

    def __init__(self, shard_id: int, apply_delay: float = 0.0):
        self.shard_id = shard_id
        self.store: dict[ParameterKey, np.ndarray] = {}
        self.clock = 0
        self.update_counts: dict[ParameterKey, int] = {}
        self.apply_delay = apply_delay
        self._lock = threading.Lock()

    def preload(self, key: ParameterKey, value: np.ndarray) -> None:
        self.store[key] = np.array(value, dtype=np.float64)

    def pull(self, keys: Sequence[ParameterKey]) -> tuple[dict[ParameterKey, np.ndarray], int]:
        with self._lock:
            out = {}
            for key in keys:
                value = self.store.get(key)
                if value is None:
                    raise ProtocolError(f"shard {self.shard_id} does not own {key}")
                out[key] = value.copy()
            return out, self.clock

    def apply(
        self, entries: Sequence[tuple[ParameterKey, np.ndarray]], alpha: float
    ) -> list[tuple[ParameterKey, np.ndarray]]:
        """SGD-step each keyed vector; returns (key, delta) per mutation."""
        if self.apply_delay > 0.0:
            time.sleep(self.apply_delay)
        deltas = []
        with self._lock:
            for key, grad in entries:
                old = self.store.get(key)
                if old is None:
                    raise ProtocolError(f"shard {self.shard_id} does not own {key}")
                new = old - alpha * grad
                self.store[key] = new
                self.clock += 1
                self.update_counts[key] = self.update_counts.get(key, 0) + 1
                deltas.append((key, new - old))
        return deltas

    def add_to(self, key: ParameterKey, delta: np.ndarray) -> None:
        """Accumulate an aggregate delta; counts as one applied update."""
        with self._lock:
            value = self.store.get(key)
            if value is None:
                raise ProtocolError(f"shard {self.shard_id} does not own {key}")
            self.store[key] = value + delta
            self.clock += 1

    def replace(self, key: ParameterKey, value: np.ndarray) -> None:
        with self._lock:
            if key not in self.store:
                raise ProtocolError(f"shard {self.shard_id} does not own {key}")
            self.store[key] = value

    def keys(self) -> list[ParameterKey]:
        return list(self.store.keys())


@dataclass
class OpEvent:
    """Timing record of one worker SGD operation, for schedule assertions."""

    worker: int
    op: int
    period: int
    started: float
    finished: float


@dataclass
class TrainResult:
    factors: FactorMatrices
    losses: list[float]
    wall_clock_ms: list[float]
    converged: bool
    barriers: int
    ops_per_worker: int
    objective: str
    user_codes: CodeSet | None = None
    item_codes: CodeSet | None = None
    staleness_max: int = 0
    update_counts: dict[ParameterKey, int] = field(default_factory=dict)
    events: list[OpEvent] = field(default_factory=list)


def partition_data(data: Dataset, workers: int, seed: int = 0) -> list[np.ndarray]:
    """Split triple indices into W disjoint shards of near-equal size.

    Sizes differ by at most one.  W=1 returns the identity ordering;
    otherwise a seeded permutation is dealt round-robin, so the split
    depends only on (seed, |data|, W).
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    n = len(data)
    if workers > n:
        raise ValueError(f"cannot split {n} triples across {workers} workers")
    if workers == 1:
        return [np.arange(n, dtype=np.int64)]
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    perm = rng.permutation(n).astype(np.int64)
    return [perm[w::workers] for w in range(workers)]


def has_converged(
    losses: Sequence[float],
    window: int = CONVERGENCE_WINDOW,
    tol: float = CONVERGENCE_TOL,
) -> bool:
    """True when the loss moved < tol (relatively) across the last
    ``window`` barriers, i.e. over the trailing window+1 recorded values."""
    if len(losses) < window + 1:
        return False
    tail = losses[-(window + 1):]
    spread = max(tail) - min(tail)
    scale = max(abs(tail[-1]), 1e-12)
    return spread / scale < tol


class _WorkerStream:
    """Deterministic minibatch source over one worker's shard.

    Each pass over the shard is a fresh seeded permutation; a batch that
    exhausts the current pass wraps into the next one, so every
    operation yields exactly B triples.  The sequence depends only on
    (seed, worker, shard), never on scheduling.
    """

    def __init__(self, data: Dataset, shard: np.ndarray, worker: int, seed: int):
        if shard.size == 0:
            raise ValueError("worker shard must not be empty")
        self._data = data
        self._shard = shard
        self._worker = worker
        self._seed = seed
        self._pass = 0
        self._pos = 0
        self._order = self._permute()

    def _permute(self) -> np.ndarray:
        ss = np.random.SeedSequence(self._seed, spawn_key=(1, self._worker, self._pass))
        return self._shard[np.random.default_rng(ss).permutation(self._shard.size)]

    def next_batch(self, b: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        taken = []
        need = b
        while need > 0:
            chunk = self._order[self._pos : self._pos + need]
            taken.append(chunk)
            self._pos += chunk.size
            need -= chunk.size
            if self._pos >= self._order.size:
                self._pass += 1
                self._pos = 0
                self._order = self._permute()
        idx = np.concatenate(taken) if len(taken) > 1 else taken[0]
        return self._data.users[idx], self._data.items[idx], self._data.ratings[idx]


class _Coordinator:
    """Owns barrier state, permits, shards, and the loss trace."""

    def __init__(
        self,
        data: Dataset,
        h: Hyperparams,
        objective: str,
        stop_on_convergence: bool,
        server_delay: float,
    ):
        if objective not in ("dch", "mf"):
            raise ValueError(f"unknown objective {objective!r}")
        self.data = data
        self.h = h
        self.objective = objective
        self.stop_on_convergence = stop_on_convergence

        fm = init_factors(data, h)
        if objective == "dch":
            self.initial_loss = dch_loss(data, fm, h)
        else:
            self.initial_loss = mf_loss(data, fm, h.lambda_)
        self.shards = [ServerShard(s, server_delay) for s in range(h.servers)]
        self._key_shard: dict[ParameterKey, ServerShard] = {}
        for i in range(data.num_users):
            self._place(ParameterKey(KIND_USER, i), fm.U[i])
        for j in range(data.num_items):
            self._place(ParameterKey(KIND_ITEM, j), fm.V[j])
        self.agg_u_key = ParameterKey(KIND_AGG_U)
        self.agg_v_key = ParameterKey(KIND_AGG_V)
        self._place(self.agg_u_key, fm.sum_u)
        self._place(self.agg_v_key, fm.sum_v)

        self.barrier_index = 0
        self.losses: list[float] = []
        self.wall_clock_ms: list[float] = []
        self._t0 = time.monotonic()
        self.completed = [0] * h.workers
        self.staleness_max = 0
        self.stop = False
        self.failure: BaseException | None = None
        self._state_lock = threading.Lock()
        self._permit = threading.Condition(self._state_lock)

    def _place(self, key: ParameterKey, value: np.ndarray) -> None:
        shard = self.shards[shard_of(key, len(self.shards))]
        shard.preload(key, value)
        self._key_shard[key] = shard

    # -- worker-facing protocol ---------------------------------------

    def pull(self, req: PullRequest) -> PullResponse:
        values: dict[ParameterKey, np.ndarray] = {}
        clocks: dict[int, int] = {}
        by_shard: dict[int, list[ParameterKey]] = {}
        for key in req.keys:
            shard = self._key_shard.get(key)
            if shard is None:
                raise ProtocolError(f"no shard owns {key}")
            by_shard.setdefault(shard.shard_id, []).append(key)
        for sid, keys in by_shard.items():
            got, clock = self.shards[sid].pull(keys)
            values.update(got)
            clocks[sid] = clock
        with self._state_lock:
            skew = self.completed[req.worker] - min(self.completed)
            if skew > self.staleness_max:
                self.staleness_max = skew
            barrier = self.barrier_index
        return PullResponse(values, clocks, barrier)

    def push(self, msg: GradientMessage, pulled: PullRequest) -> None:
        pulled_keys = set(pulled.keys)
        by_shard: dict[int, list[tuple[ParameterKey, np.ndarray]]] = {}
        for key, grad in msg.grads:
            if key not in pulled_keys:
                raise ProtocolError(f"pushed {key} without pulling it first")
            by_shard.setdefault(self._key_shard[key].shard_id, []).append((key, grad))
        for sid, entries in by_shard.items():
            deltas = self.shards[sid].apply(entries, self.h.alpha)
            for key, delta in deltas:
                agg = self.agg_u_key if key.kind == KIND_USER else self.agg_v_key
                self._key_shard[agg].add_to(agg, delta)

    def permit_wait(self, worker: int) -> None:
        """Block until starting this worker's next op keeps the op-count
        skew below P (the bounded-staleness permit)."""
        with self._permit:
            while (
                self.completed[worker] - min(self.completed) >= self.h.staleness
                and not self.stop
            ):
                self._permit.wait()

    def op_done(self, worker: int) -> None:
        with self._permit:
            self.completed[worker] += 1
            self._permit.notify_all()

    # -- barrier ------------------------------------------------------

    def gather(self) -> FactorMatrices:
        U = np.empty((self.data.num_users, self.h.k))
        V = np.empty((self.data.num_items, self.h.k))
        for i in range(self.data.num_users):
            U[i] = self._key_shard_value(ParameterKey(KIND_USER, i))
        for j in range(self.data.num_items):
            V[j] = self._key_shard_value(ParameterKey(KIND_ITEM, j))
        sum_u = self._key_shard_value(self.agg_u_key)
        sum_v = self._key_shard_value(self.agg_v_key)
        return FactorMatrices(U, V, sum_u, sum_v)

    def _key_shard_value(self, key: ParameterKey) -> np.ndarray:
        shard = self._key_shard[key]
        with shard._lock:
            return shard.store[key].copy()

    def on_barrier(self) -> None:
        """Project every stored vector, restore exact aggregates, record
        the loss, and advance the barrier index."""
        try:
            if self.objective == "dch":
                for key, shard in self._key_shard.items():
                    if key.kind in (KIND_USER, KIND_ITEM):
                        with shard._lock:
                            shard.store[key] = project(shard.store[key], self.h.gamma)
            fm = self.gather()
            su = active_sum(fm.U, self.data.active_users)
            sv = active_sum(fm.V, self.data.active_items)
            self._key_shard[self.agg_u_key].replace(self.agg_u_key, su)
            self._key_shard[self.agg_v_key].replace(self.agg_v_key, sv)
            fm.sum_u, fm.sum_v = su, sv
            if self.objective == "dch":
                loss = dch_loss(self.data, fm, self.h)
            else:
                loss = mf_loss(self.data, fm, self.h.lambda_)
            self.losses.append(loss)
            self.wall_clock_ms.append((time.monotonic() - self._t0) * 1000.0)
            self.barrier_index += 1
            if loss > DIVERGENCE_FACTOR * max(self.initial_loss, 1e-300):
                raise DivergenceError(
                    f"loss {loss:.6g} exceeds {DIVERGENCE_FACTOR:g} x initial "
                    f"{self.initial_loss:.6g} at barrier {self.barrier_index}",
                    self.losses,
                )
            if self.stop_on_convergence and has_converged(self.losses):
                self.stop = True
        except BaseException as exc:
            self.failure = exc
            self.stop = True
            raise
        finally:
            with self._permit:
                self._permit.notify_all()


def _worker_op(
    coord: _Coordinator,
    stream: _WorkerStream,
    worker: int,
    op: int,
    objective: str,
) -> None:
    uu, ii, rr = stream.next_batch(coord.h.batch_size)
    u_index = np.unique(uu)
    i_index = np.unique(ii)
    keys = (
        tuple(ParameterKey(KIND_USER, int(i)) for i in u_index)
        + tuple(ParameterKey(KIND_ITEM, int(j)) for j in i_index)
        + (coord.agg_u_key, coord.agg_v_key)
    )
    req = PullRequest(worker, op, keys)
    resp = coord.pull(req)
    u_rows = np.stack([resp.values[ParameterKey(KIND_USER, int(i))] for i in u_index])
    v_rows = np.stack([resp.values[ParameterKey(KIND_ITEM, int(j))] for j in i_index])
    g_u, g_v = minibatch_gradients(
        uu, ii, rr, u_rows, v_rows, u_index, i_index,
        resp.values[coord.agg_u_key], resp.values[coord.agg_v_key],
        coord.h.lambda_, objective=objective,
    )
    grads = tuple(
        (ParameterKey(KIND_USER, int(i)), g_u[r]) for r, i in enumerate(u_index)
    ) + tuple(
        (ParameterKey(KIND_ITEM, int(j)), g_v[r]) for r, j in enumerate(i_index)
    )
    coord.push(GradientMessage(worker, op, grads), req)


def _plan_ops(data: Dataset, h: Hyperparams, shards: list[np.ndarray]) -> tuple[int, int]:
    """Periods and ops-per-worker for the epoch budget.

    One epoch is enough operations for the largest shard to be covered
    once at batch size B; the total is rounded up to whole periods so
    every worker performs exactly P operations between barriers.
    """
    max_shard = max(s.size for s in shards)
    ops_per_epoch = -(-max_shard // h.batch_size)
    total = h.epochs * ops_per_epoch
    periods = -(-total // h.staleness)
    return periods, periods * h.staleness


def run_training(
    data: Dataset,
    h: Hyperparams,
    *,
    objective: str = "dch",
    mode: str = "serial",
    stop_on_convergence: bool = True,
    make_codes: bool = True,
    worker_delays: Sequence[float] | None = None,
    server_delay: float = 0.0,
    record_schedule: bool = False,
) -> TrainResult:
    """Coordinator loop: partition, repeated P-operation rounds with
    barriers, then median rounding of the final factors.

    ``mode`` is "serial" (round-robin on the calling thread, exactly
    reproducible) or "threads" (one thread per worker, shard locks and
    permits doing the synchronization).  The MF objective runs the same
    protocol but skips the projection step, which belongs to the
    hashing model.  Raises DivergenceError when the loss exceeds
    DIVERGENCE_FACTOR times its initial value.
    """
    if mode not in ("serial", "threads"):
        raise ValueError(f"unknown mode {mode!r}")
    if worker_delays is not None and len(worker_delays) != h.workers:
        raise ValueError("worker_delays must list one delay per worker")
    coord = _Coordinator(data, h, objective, stop_on_convergence, server_delay)
    shards = partition_data(data, h.workers, h.seed)
    streams = [_WorkerStream(data, shards[w], w, h.seed) for w in range(h.workers)]
    periods, ops_per_worker = _plan_ops(data, h, shards)
    delays = list(worker_delays) if worker_delays is not None else [0.0] * h.workers
    events: list[OpEvent] = []
    events_lock = threading.Lock()

    def one_op(w: int, op: int, period: int) -> None:
        started = time.monotonic()
        if delays[w] > 0.0:
            time.sleep(delays[w])
        _worker_op(coord, streams[w], w, op, objective)
        coord.op_done(w)
        if record_schedule:
            with events_lock:
                events.append(OpEvent(w, op, period, started, time.monotonic()))

    if mode == "serial":
        for period in range(periods):
            for p in range(h.staleness):
                for w in range(h.workers):
                    one_op(w, period * h.staleness + p, period)
            coord.on_barrier()
            if coord.stop:
                break
    else:
        sync = threading.Barrier(h.workers, action=coord.on_barrier)

        def worker_loop(w: int) -> None:
            try:
                for period in range(periods):
                    for p in range(h.staleness):
                        coord.permit_wait(w)
                        if coord.stop:
                            return
                        one_op(w, period * h.staleness + p, period)
                    try:
                        sync.wait()
                    except threading.BrokenBarrierError:
                        return
                    if coord.stop:
                        return
            except BaseException as exc:
                # record the first failure, then unblock everyone else
                with coord._permit:
                    if coord.failure is None:
                        coord.failure = exc
                    coord.stop = True
                    coord._permit.notify_all()
                sync.abort()

        threads = [
            threading.Thread(target=worker_loop, args=(w,), name=f"worker-{w}")
            for w in range(h.workers)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if coord.failure is not None:
            raise coord.failure

    fm = coord.gather()
    user_codes = item_codes = None
    if make_codes:
        ucodes, icodes = round_codes(fm)
        user_codes = CodeSet(ucodes)
        item_codes = CodeSet(icodes)
    update_counts: dict[ParameterKey, int] = {}
    for shard in coord.shards:
        update_counts.update(shard.update_counts)
    return TrainResult(
        factors=fm,
        losses=coord.losses,
        wall_clock_ms=coord.wall_clock_ms,
        converged=coord.stop and coord.failure is None,
        barriers=len(coord.losses),
        ops_per_worker=ops_per_worker,
        objective=objective,
        user_codes=user_codes,
        item_codes=item_codes,
        staleness_max=coord.staleness_max,
        update_counts=update_counts,
        events=events,
    )
