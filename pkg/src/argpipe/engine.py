"""In-process data-parallel engine.

Datasets are lazy: each transformation records how to compute its
partitions from its parent, and nothing runs until ``collect`` (or another
action) asks for the partitions. Every per-partition step runs as a task on
a thread pool whose threads stand in for cluster workers. ``cache`` pins a
dataset's partitions after the first evaluation.

Records that change partition during a shuffle are pickled to measure the
bytes that would cross the network.
"""

from __future__ import annotations

import itertools
import json
import logging
import pickle
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Any, Callable, Iterable, NamedTuple

from .errors import TaskError

log = logging.getLogger(__name__)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@lru_cache(maxsize=65536)
def fnv1a_64(key: str) -> int:
    h = _FNV_OFFSET
    for b in key.encode("utf-8"):
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


PARTITIONERS = {"fnv1a": fnv1a_64}


class KeyedRecord(NamedTuple):
    key: str
    value: Any


@dataclass(frozen=True)
class EngineConfig:
    num_workers: int = 4
    num_partitions: int = 8
    partitioner: str = "fnv1a"

    def __post_init__(self):
        if self.num_workers < 1 or self.num_partitions < 1:
            raise ValueError("num_workers and num_partitions must be positive")
        if self.partitioner not in PARTITIONERS:
            raise ValueError(f"unknown partitioner {self.partitioner!r}")

    def partition_of(self, key: str, n: int | None = None) -> int:
        return PARTITIONERS[self.partitioner](key) % (n or self.num_partitions)


@dataclass
class TaskRecord:
    stage: str
    partitionId: int
    workerId: int
    durationMicros: int
    recordsIn: int
    recordsOut: int
    setupCalls: int = 0
    shuffleBytesOut: int = 0


class EngineMetrics:
    """Thread-safe counters shared by all tasks of an engine."""

    def __init__(self):
        self._lock = threading.Lock()
        self.counters: dict[str, int] = {}
        self.stage_seconds: dict[str, float] = {}

    def add(self, name: str, n: int = 1) -> None:
        with self._lock:
            self.counters[name] = self.counters.get(name, 0) + n

    def get(self, name: str) -> int:
        with self._lock:
            return self.counters.get(name, 0)

    def add_time(self, stage: str, seconds: float) -> None:
        with self._lock:
            self.stage_seconds[stage] = self.stage_seconds.get(stage, 0.0) + seconds

    def time_with_prefix(self, prefix: str) -> float:
        with self._lock:
            return sum(v for k, v in self.stage_seconds.items() if k.startswith(prefix))

    @property
    def shuffle_bytes(self) -> int:
        return self.get("shuffle_bytes")

    @property
    def setup_calls(self) -> int:
        return self.get("setup_calls")


_local = threading.local()


def current_worker_id() -> int:
    """Id of the worker thread running the caller, or -1 on the driver."""
    return getattr(_local, "worker_id", -1)


class Broadcast:
    """Read-only value handed to each worker at most once.

    The first read on a given worker counts as a delivery; later reads on
    that worker hit its local copy.
    """

    def __init__(self, value, metrics: EngineMetrics | None = None):
        self._value = value
        self._metrics = metrics
        self._lock = threading.Lock()
        self.delivered_to: set[int] = set()

    @property
    def value(self):
        wid = current_worker_id()
        if wid >= 0 and wid not in self.delivered_to:
            with self._lock:
                if wid not in self.delivered_to:
                    self.delivered_to.add(wid)
                    if self._metrics is not None:
                        self._metrics.add("broadcast_deliveries")
        return self._value

    @property
    def delivery_count(self) -> int:
        return len(self.delivered_to)


class Engine:
    """Owns the worker pool, the metrics and the task log."""

    def __init__(self, cfg: EngineConfig | None = None):
        self.cfg = cfg or EngineConfig()
        if self.cfg.num_partitions < self.cfg.num_workers:
            log.warning("num_partitions=%d < num_workers=%d leaves workers idle",
                        self.cfg.num_partitions, self.cfg.num_workers)
        self.metrics = EngineMetrics()
        self.task_log: list[TaskRecord] = []
        self._log_lock = threading.Lock()
        self._ids = itertools.count()
        self._pool = ThreadPoolExecutor(self.cfg.num_workers, thread_name_prefix="argpipe-worker",
                                        initializer=self._init_worker)

    def _init_worker(self):
        _local.worker_id = next(self._ids)

    def close(self):
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ---------------------------------------------------------------- sources

    def parallelize(self, records: Iterable, name: str = "parallelize") -> "Dataset":
        n = self.cfg.num_partitions
        parts: list[list[KeyedRecord]] = [[] for _ in range(n)]
        for rec in records:
            rec = KeyedRecord(*rec)
            if not isinstance(rec.key, str) or not rec.key:
                raise ValueError(f"record key must be a non-empty string, got {rec.key!r}")
            parts[self.cfg.partition_of(rec.key)].append(rec)
        frozen = [tuple(p) for p in parts]
        return Dataset(self, lambda: [list(p) for p in frozen], n, True, name)

    def from_partitions(self, parts, key_partitioned=False, name="from_partitions") -> "Dataset":
        frozen = [tuple(KeyedRecord(*r) for r in p) for p in parts]
        return Dataset(self, lambda: [list(p) for p in frozen], len(frozen), key_partitioned, name)

    def broadcast(self, value) -> Broadcast:
        return Broadcast(value, self.metrics)

    # ---------------------------------------------------------------- tasks

    def run_stage(self, stage: str, parts: list[list], fn: Callable[[int, list], tuple]) -> list[list]:
        """Run ``fn(pid, records) -> (out_records, setup_calls, shuffle_bytes)`` on every partition."""
        t0 = time.perf_counter()

        def task(pid, recs):
            start = time.perf_counter()
            try:
                out, setups, sbytes = fn(pid, recs)
            except TaskError:
                raise
            except Exception as exc:
                raise TaskError(stage, pid, cause=exc) from exc
            rec = TaskRecord(stage, pid, current_worker_id(), int((time.perf_counter() - start) * 1e6),
                             len(recs), len(out), setups, sbytes)
            with self._log_lock:
                self.task_log.append(rec)
            return out

        futures = [self._pool.submit(task, pid, recs) for pid, recs in enumerate(parts)]
        results = []
        try:
            for f in futures:
                results.append(f.result())
        except BaseException:
            for f in futures:
                f.cancel()
            raise
        self.metrics.add_time(stage, time.perf_counter() - t0)
        return results

    def write_task_log(self, path) -> None:
        with self._log_lock, open(path, "w", encoding="utf-8") as fh:
            for rec in self.task_log:
                fh.write(json.dumps(asdict(rec)) + "\n")

    def tasks(self, stage_prefix: str = "") -> list[TaskRecord]:
        with self._log_lock:
            return [t for t in self.task_log if t.stage.startswith(stage_prefix)]


def _shuffle_size(rec) -> int:
    return len(pickle.dumps(rec, protocol=pickle.HIGHEST_PROTOCOL))


def _value_order(v):
    sk = getattr(v, "sort_key", None)
    if callable(sk):
        return (0, sk())
    if isinstance(v, tuple):
        return (1, tuple(_value_order(x) for x in v))
    if isinstance(v, bool) or v is None:
        return (2, repr(v))
    if isinstance(v, (int, float)):
        return (3, v)
    if isinstance(v, str):
        return (4, v)
    return (5, repr(v))


class Dataset:
    """A lazily computed, partitioned collection of ``KeyedRecord``."""

    def __init__(self, engine: Engine, compute: Callable[[], list[list]], num_partitions: int,
                 key_partitioned: bool, name: str):
        self.engine = engine
        self._compute = compute
        self.num_partitions = num_partitions
        self.key_partitioned = key_partitioned
        self.name = name

    def partitions(self) -> list[list[KeyedRecord]]:
        return self._compute()

    def _derive(self, compute, key_partitioned=None, name=None, num_partitions=None):
        return Dataset(self.engine, compute, num_partitions or self.num_partitions,
                       self.key_partitioned if key_partitioned is None else key_partitioned,
                       name or self.name)

    # ---------------------------------------------------------- narrow ops

    def map_values(self, f: Callable, name: str = "map_values") -> "Dataset":
        def run(pid, recs):
            out = []
            for r in recs:
                try:
                    out.append(KeyedRecord(r.key, f(r.value)))
                except Exception as exc:
                    raise TaskError(name, pid, r.key, exc) from exc
            return out, 0, 0

        return self._derive(lambda: self.engine.run_stage(name, self.partitions(), run), name=name)

    def flat_map_values(self, f: Callable, name: str = "flat_map_values") -> "Dataset":
        def run(pid, recs):
            out = []
            for r in recs:
                try:
                    out.extend(KeyedRecord(r.key, v) for v in f(r.value))
                except Exception as exc:
                    raise TaskError(name, pid, r.key, exc) from exc
            return out, 0, 0

        return self._derive(lambda: self.engine.run_stage(name, self.partitions(), run), name=name)

    def flat_map(self, f: Callable[[KeyedRecord], Iterable], name: str = "flat_map") -> "Dataset":
        """``f(record)`` yields ``(key, value)`` pairs; keys may change."""
        def run(pid, recs):
            out = []
            for r in recs:
                try:
                    out.extend(KeyedRecord(*kv) for kv in f(r))
                except Exception as exc:
                    raise TaskError(name, pid, r.key, exc) from exc
            return out, 0, 0

        return self._derive(lambda: self.engine.run_stage(name, self.partitions(), run),
                            key_partitioned=False, name=name)

    def map_partitions(self, setup: Callable[[], Any], f: Callable[[Any, list], list],
                       name: str = "map_partitions", preserves_keys: bool = False) -> "Dataset":
        """Apply ``f(state, records)`` per partition; ``setup()`` runs once per non-empty partition."""
        metrics = self.engine.metrics

        def run(pid, recs):
            if not recs:
                return [], 0, 0
            state = setup()
            metrics.add("setup_calls")
            metrics.add(f"setup_calls:{name}")
            out = [KeyedRecord(*r) for r in f(state, recs)]
            return out, 1, 0

        return self._derive(lambda: self.engine.run_stage(name, self.partitions(), run),
                            key_partitioned=self.key_partitioned and preserves_keys, name=name)

    def filter(self, pred: Callable[[Any], bool], name: str = "filter") -> "Dataset":
        def run(pid, recs):
            return [r for r in recs if pred(r.value)], 0, 0

        return self._derive(lambda: self.engine.run_stage(name, self.partitions(), run), name=name)

    def cache(self) -> "Dataset":
        lock = threading.Lock()
        store: list = []

        def compute():
            with lock:
                if not store:
                    store.append(self.partitions())
            return [list(p) for p in store[0]]

        return self._derive(compute, name=self.name + ":cached")

    # ---------------------------------------------------------- wide ops

    def _shuffle(self, assign: Callable[[int, int, KeyedRecord], int], n: int, name: str):
        """Move records to ``assign(pid, i, rec)``; returns the new partitions."""
        metrics = self.engine.metrics

        def route(pid, recs):
            dest = []
            moved = 0
            for i, r in enumerate(recs):
                q = assign(pid, i, r)
                if q != pid:
                    moved += _shuffle_size(r)
                dest.append(q)
            metrics.add("shuffle_bytes", moved)
            return list(zip(dest, recs)), 0, moved

        routed = self.engine.run_stage(name, self.partitions(), route)
        parts: list[list] = [[] for _ in range(n)]
        for chunk in routed:
            for q, r in chunk:
                parts[q].append(r)
        return parts

    def partition_by_key(self, num_partitions: int | None = None, name: str = "shuffle") -> "Dataset":
        n = num_partitions or self.engine.cfg.num_partitions
        if self.key_partitioned and n == self.num_partitions:
            return self
        cfg = self.engine.cfg
        return Dataset(self.engine, lambda: self._shuffle(lambda pid, i, r: cfg.partition_of(r.key, n), n, name),
                       n, True, name)

    def repartition(self, num_partitions: int | None = None, name: str = "repartition") -> "Dataset":
        """Round-robin rebalance; records lose key co-location."""
        n = num_partitions or self.engine.cfg.num_partitions

        def compute():
            parts = self.partitions()
            offsets = list(itertools.accumulate((len(p) for p in parts), initial=0))
            return self._shuffle(lambda pid, i, r: (offsets[pid] + i) % n, n, name)

        return Dataset(self.engine, compute, n, False, name)

    def join(self, other: "Dataset", name: str = "join") -> "Dataset":
        """Per-key Cartesian product of values: ``(key, (left, right))``."""
        n = self.engine.cfg.num_partitions
        left = self.partition_by_key(n, name=f"{name}:shuffle-left")
        right = other.partition_by_key(n, name=f"{name}:shuffle-right")
        metrics = self.engine.metrics

        def compute():
            lparts = left.partitions()
            rparts = right.partitions()

            def run(pid, recs):
                by_key: dict[str, list] = {}
                for r in rparts[pid]:
                    by_key.setdefault(r.key, []).append(r.value)
                out = []
                for r in recs:
                    for rv in by_key.get(r.key, ()):
                        out.append(KeyedRecord(r.key, (r.value, rv)))
                metrics.add("join_pairs", len(out))
                return out, 0, 0

            return self.engine.run_stage(name, lparts, run)

        return Dataset(self.engine, compute, n, True, name)

    def cogroup(self, other: "Dataset", name: str = "cogroup") -> "Dataset":
        """``(key, (left_values, right_values))`` for every key present on either side."""
        n = self.engine.cfg.num_partitions
        left = self.partition_by_key(n, name=f"{name}:shuffle-left")
        right = other.partition_by_key(n, name=f"{name}:shuffle-right")

        def compute():
            lparts = left.partitions()
            rparts = right.partitions()

            def run(pid, recs):
                groups: dict[str, tuple[list, list]] = {}
                for r in recs:
                    groups.setdefault(r.key, ([], []))[0].append(r.value)
                for r in rparts[pid]:
                    groups.setdefault(r.key, ([], []))[1].append(r.value)
                return [KeyedRecord(k, g) for k, g in groups.items()], 0, 0

            return self.engine.run_stage(name, lparts, run)

        return Dataset(self.engine, compute, n, True, name)

    # ---------------------------------------------------------- actions

    def collect(self, sort: bool = True) -> list[KeyedRecord]:
        recs = [r for p in self.partitions() for r in p]
        if sort:
            recs.sort(key=lambda r: (r.key, _value_order(r.value)))
        return recs

    def count(self) -> int:
        return sum(len(p) for p in self.partitions())


def parallelize(records: Iterable, engine: Engine) -> Dataset:
    return engine.parallelize(records)
