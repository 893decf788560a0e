"""Micro-batch stream runtime.

A stream is a time-ordered iterable of ``(arrival_time, KeyedRecord)``.
``slice_stream`` cuts it into fixed-period micro-batches. Claim and
evidence micro-batches are paired either per file with accumulated state
(``ScopeFileJoin``) or over a window of recent micro-batches
(``WindowJoin``). ``Scheduler`` dispatches micro-batches in order, one at a
time, and reports whether processing kept up with the period.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, NamedTuple

from .engine import KeyedRecord
from .errors import StateOverflowError

log = logging.getLogger(__name__)

WINDOW_KEY = "~window"
SENTENCE_BYTES = 200


@dataclass(frozen=True)
class StreamConfig:
    batch_period: float = 0.2
    window_dim: float | None = None
    join_scope: str = "file"
    symmetric_state: bool = False
    slide: bool = False
    keep_keys: bool = False
    state_cap: int = 100_000

    def __post_init__(self):
        if not self.batch_period > 0:
            raise ValueError("batch_period must be positive")
        if self.join_scope not in ("file", "window"):
            raise ValueError(f"join_scope must be 'file' or 'window', got {self.join_scope!r}")
        if self.window_dim is not None:
            ratio = self.window_dim / self.batch_period
            if self.window_dim <= 0 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
                raise ValueError(f"window_dim {self.window_dim} is not a positive multiple of "
                                 f"batch_period {self.batch_period}")
        elif self.join_scope == "window":
            raise ValueError("window scope needs window_dim")
        if self.state_cap < 1:
            raise ValueError("state_cap must be positive")

    @property
    def window_batches(self) -> int:
        if self.window_dim is None:
            raise ValueError("no window configured")
        return int(round(self.window_dim / self.batch_period))


class EndOfFile(NamedTuple):
    """Marker record closing a streamed document."""

    file_key: str


@dataclass
class MicroBatch:
    seq: int
    records: list
    start: float
    end: float
    error: BaseException | None = None

    @property
    def arrival_window(self) -> tuple[float, float]:
        return (self.start, self.end)


def slice_stream(events: Iterable[tuple[float, Any]], cfg: StreamConfig, until: float | None = None,
                 start: float = 0.0) -> Iterator[MicroBatch]:
    """Group timed records into consecutive micro-batches.

    Batch ``k`` holds records with arrival time in
    ``[start + k*period, start + (k+1)*period)``. Empty batches are emitted
    for quiet periods, and, when ``until`` is given, up to that time. A
    failing or out-of-order source ends the stream with one batch whose
    ``error`` is set.
    """
    period = cfg.batch_period
    seq = 0
    current: list = []
    it = iter(events)
    while True:
        try:
            item = next(it)
        except StopIteration:
            break
        except Exception as exc:
            yield MicroBatch(seq, current, start + seq * period, start + (seq + 1) * period, exc)
            return
        t, rec = item
        # tolerate rounding for records sitting exactly on a boundary
        k = int(math.floor((t - start) / period + 1e-9))
        if k < seq:
            exc = ValueError(f"record at t={t} arrived after micro-batch {k} was closed")
            yield MicroBatch(seq, current, start + seq * period, start + (seq + 1) * period, exc)
            return
        while k > seq:
            yield MicroBatch(seq, current, start + seq * period, start + (seq + 1) * period)
            current = []
            seq += 1
        current.append(rec)
    last = seq + 1 if current else 0
    if until is not None:
        last = max(last, int(math.ceil((until - start) / period - 1e-12)))
    while seq < last:
        yield MicroBatch(seq, current, start + seq * period, start + (seq + 1) * period)
        current = []
        seq += 1


# ---------------------------------------------------------------- sources


def sentence_source(docs: Iterable[tuple[str, list]], rate: float, sentence_bytes: int | None = SENTENCE_BYTES,
                    start: float = 0.0) -> Iterator[tuple[float, KeyedRecord]]:
    """Emit sentences of consecutive documents at ``rate`` bytes per second.

    Each sentence occupies ``sentence_bytes`` of the stream, or its real
    UTF-8 length plus one delimiter byte when ``sentence_bytes`` is None.
    An ``EndOfFile`` record follows the last sentence of every document.
    """
    if not rate > 0:
        raise ValueError("rate must be positive")
    sent_bytes = 0
    t = start
    for key, sentences in docs:
        for s in sentences:
            t = start + sent_bytes / rate
            yield t, KeyedRecord(key, s)
            sent_bytes += sentence_bytes if sentence_bytes is not None else len(s.text.encode("utf-8")) + 1
        # the marker travels with the document's last sentence
        yield t, KeyedRecord(key, EndOfFile(key))


def until_duration(events, duration: float):
    for t, rec in events:
        if t >= duration:
            return
        yield t, rec


# ---------------------------------------------------------------- joins


class ScopeFileJoin:
    """Per-file pairing with claims (and optionally evidence) kept across batches."""

    def __init__(self, cfg: StreamConfig):
        self.symmetric = cfg.symmetric_state
        self.cap = cfg.state_cap
        self.state: dict[str, FileState] = {}

    def _file(self, key):
        st = self.state.get(key)
        if st is None:
            st = self.state[key] = FileState(key)
        return st

    def _check(self, st):
        size = len(st.accumulated_claims) + len(st.accumulated_evidence)
        if size > self.cap:
            raise StateOverflowError(st.file_key, size, self.cap)

    def step(self, seq: int, claims: list[KeyedRecord], evidence: list[KeyedRecord]) -> list[KeyedRecord]:
        for c in claims:
            st = self._file(c.key)
            st.accumulated_claims.append(c.value)
            self._check(st)
        pairs = []
        for e in evidence:
            st = self.state.get(e.key)
            if st is not None:
                pairs.extend(KeyedRecord(e.key, (c, e.value)) for c in st.accumulated_claims)
        if self.symmetric:
            for c in claims:
                st = self.state[c.key]
                pairs.extend(KeyedRecord(c.key, (c.value, ev)) for ev in st.accumulated_evidence)
            for e in evidence:
                st = self._file(e.key)
                st.accumulated_evidence.append(e.value)
                self._check(st)
        return pairs

    def end_file(self, key: str) -> None:
        self.state.pop(key, None)

    def flush(self, seq: int) -> list[KeyedRecord]:
        return []


@dataclass
class FileState:
    file_key: str
    accumulated_claims: list = field(default_factory=list)
    accumulated_evidence: list = field(default_factory=list)


class WindowJoin:
    """Pairs claims and evidence falling in the same window of micro-batches.

    Tumbling mode (default) evaluates each block of ``window_batches``
    batches once, at its last batch. Sliding mode evaluates at every batch
    over the last ``window_batches`` batches but only emits pairs not emitted
    by an earlier evaluation, i.e. pairs involving the newest batch.
    """

    def __init__(self, cfg: StreamConfig):
        self.w = cfg.window_batches
        self.slide = cfg.slide
        self.keep_keys = cfg.keep_keys
        self.history: deque = deque()

    def _key(self, rec):
        return rec.key if self.keep_keys else WINDOW_KEY

    def contents(self) -> tuple[list[KeyedRecord], list[KeyedRecord]]:
        """Claims and evidence currently held in the window."""
        return ([c for _, cs, _ in self.history for c in cs], [e for _, _, es in self.history for e in es])

    def window_pairs(self) -> list[KeyedRecord]:
        """Every pair of the current window, including ones emitted before."""
        return self._pairs(*self.contents())

    def _pairs(self, claims, evidence):
        by_key: dict[str, list] = {}
        for e in evidence:
            by_key.setdefault(self._key(e), []).append(e.value)
        out = []
        for c in claims:
            k = self._key(c)
            for ev in by_key.get(k, ()):
                out.append(KeyedRecord(k, (c.value, ev)))
        return out

    def step(self, seq: int, claims: list[KeyedRecord], evidence: list[KeyedRecord]) -> list[KeyedRecord]:
        if self.slide:
            while self.history and self.history[0][0] <= seq - self.w:
                self.history.popleft()
            old_c, old_e = self.contents()
            all_e = old_e + list(evidence)
            self.history.append((seq, list(claims), list(evidence)))
            return self._pairs(claims, all_e) + self._pairs(old_c, evidence)
        self.history.append((seq, list(claims), list(evidence)))
        if seq % self.w == self.w - 1:
            return self.flush(seq)
        return []

    def flush(self, seq: int) -> list[KeyedRecord]:
        """Evaluate a pending tumbling window early (end of stream)."""
        if self.slide or not self.history:
            return []
        out = self.window_pairs()
        self.history.clear()
        return out

    def end_file(self, key: str) -> None:
        pass


def make_joiner(cfg: StreamConfig):
    return WindowJoin(cfg) if cfg.join_scope == "window" else ScopeFileJoin(cfg)


def window_join(claim_batches: Iterable[MicroBatch], evid_batches: Iterable[MicroBatch],
                cfg: StreamConfig) -> Iterator[tuple[int, list[KeyedRecord]]]:
    """Yield ``(seq, pairs)`` for aligned claim/evidence micro-batch streams."""
    if cfg.join_scope != "window":
        raise ValueError("window_join needs join_scope='window'")
    yield from _drive(WindowJoin(cfg), claim_batches, evid_batches)


def scope_file_join(claim_batches: Iterable[MicroBatch], evid_batches: Iterable[MicroBatch],
                    cfg: StreamConfig) -> Iterator[tuple[int, list[KeyedRecord]]]:
    if cfg.join_scope != "file":
        raise ValueError("scope_file_join needs join_scope='file'")
    yield from _drive(ScopeFileJoin(cfg), claim_batches, evid_batches)


def _drive(joiner, claim_batches, evid_batches):
    seq = -1
    for cb, eb in zip(claim_batches, evid_batches):
        if cb.seq != eb.seq:
            raise ValueError(f"misaligned micro-batches {cb.seq} and {eb.seq}")
        seq = cb.seq
        yield seq, joiner.step(seq, cb.records, eb.records)
    if seq >= 0:
        tail = joiner.flush(seq)
        if tail:
            yield seq, tail


# ---------------------------------------------------------------- lag


@dataclass(frozen=True)
class LagReport:
    seq: int
    processing_time: float
    behind: bool
    backlog_depth: int

    def to_json(self) -> dict:
        return {"seq": self.seq, "processingTime": self.processing_time, "behind": self.behind,
                "backlogDepth": self.backlog_depth}


def detect_lag(seq: int, processing_time: float, cfg: StreamConfig, backlog_depth: int = 0) -> LagReport:
    return LagReport(seq, processing_time, processing_time > cfg.batch_period, backlog_depth)


@dataclass(frozen=True)
class CostModel:
    """Virtual processing time of one micro-batch.

    Parallel work is divided across ``workers``; ``serial_fraction`` of it
    stays on the driver.
    """

    per_batch: float = 0.0
    per_sentence: float = 0.0
    per_pair: float = 0.0
    workers: int = 1
    serial_fraction: float = 0.0

    def __call__(self, sentences: int, pairs: int) -> float:
        work = self.per_sentence * sentences + self.per_pair * pairs
        return self.per_batch + work * (self.serial_fraction + (1.0 - self.serial_fraction) / self.workers)

    def scaled(self, workers: int) -> "CostModel":
        return CostModel(self.per_batch, self.per_sentence, self.per_pair, workers, self.serial_fraction)


@dataclass
class BatchOutcome:
    """What the per-batch processor reports back to the scheduler."""

    output: list
    sentences: int = 0
    pairs: int = 0


class Scheduler:
    """In-order, depth-1 dispatch of micro-batches.

    With a ``CostModel`` the clock is virtual: batch ``n`` becomes ready at
    the end of its arrival window, starts when both ready and the previous
    batch has finished, and takes the modelled time. Without one, the
    measured wall time of ``process`` is used with the same arithmetic.
    """

    def __init__(self, cfg: StreamConfig, cost: CostModel | None = None):
        self.cfg = cfg
        self.cost = cost
        self.reports: list[LagReport] = []
        self._finish = 0.0
        self._ready: list[float] = []

    def run(self, batches: Iterable[MicroBatch], process: Callable[[MicroBatch], BatchOutcome],
            on_report: Callable[[LagReport], None] | None = None, stop_when_behind: bool = False):
        batches = list(batches)
        ready = [b.end for b in batches]
        outputs = []
        for i, b in enumerate(batches):
            if b.error is not None:
                raise b.error
            t0 = time.perf_counter()
            outcome = process(b)
            measured = time.perf_counter() - t0
            proc = self.cost(outcome.sentences, outcome.pairs) if self.cost is not None else measured
            start = max(ready[i], self._finish)
            self._finish = start + proc
            backlog = sum(1 for r in ready[i + 1:] if r <= self._finish)
            rep = detect_lag(b.seq, proc, self.cfg, backlog)
            self.reports.append(rep)
            outputs.append((b.seq, outcome.output))
            if on_report is not None:
                on_report(rep)
            if stop_when_behind and rep.behind:
                break
        return outputs


def run_live(events: Iterable[tuple[float, Any]], cfg: StreamConfig,
             process: Callable[[MicroBatch], BatchOutcome], on_report=None, until: float | None = None):
    """Wall-clock mode: ingestion, slicing and processing on separate threads.

    Event times are offsets in seconds from the start of the run. The
    backlog depth of a report is the number of sliced micro-batches still
    queued when that batch finished.
    """
    period = cfg.batch_period
    buf: list = []
    lock = threading.Lock()
    done = threading.Event()
    dispatch: queue.Queue = queue.Queue()
    t0 = time.monotonic()
    failure: list = []

    def ingest():
        try:
            for t, rec in events:
                delay = t0 + t - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                with lock:
                    buf.append(rec)
        except Exception as exc:  # surfaced as a terminal batch
            failure.append(exc)
        finally:
            done.set()

    def slicer():
        seq = 0
        while True:
            boundary = t0 + (seq + 1) * period
            delay = boundary - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            with lock:
                recs = buf[:]
                buf.clear()
            err = failure[0] if failure else None
            dispatch.put(MicroBatch(seq, recs, seq * period, (seq + 1) * period, err))
            seq += 1
            finished = done.is_set() and not buf
            if err is not None or (finished and (until is None or (seq * period) >= until)):
                dispatch.put(None)
                return

    threads = [threading.Thread(target=ingest, daemon=True), threading.Thread(target=slicer, daemon=True)]
    for th in threads:
        th.start()
    reports, outputs = [], []
    while True:
        b = dispatch.get()
        if b is None:
            break
        if b.error is not None:
            raise b.error
        s = time.perf_counter()
        outcome = process(b)
        proc = time.perf_counter() - s
        rep = detect_lag(b.seq, proc, cfg, dispatch.qsize())
        reports.append(rep)
        outputs.append((b.seq, outcome.output))
        if on_report is not None:
            on_report(rep)
    for th in threads:
        th.join()
    return outputs, reports


# ---------------------------------------------------------------- rate ramp


@dataclass
class RampResult:
    max_rate: float
    tested: list[tuple[float, bool]]
    diagnostic: str = ""


def ramp_to_max_rate(run_at_rate: Callable[[float], list[LagReport]], ramp_step: float, ceiling: float) -> RampResult:
    """Raise the input rate by ``ramp_step`` until a micro-batch falls behind.

    ``run_at_rate(rate)`` runs one step of the ramp and returns its lag
    reports. The result is the highest tested rate with no batch behind, the
    ceiling if none fell behind, or 0 if even the first step failed.
    """
    if not ramp_step > 0 or ceiling < ramp_step:
        raise ValueError("need 0 < ramp_step <= ceiling")
    best = 0.0
    tested = []
    k = 1
    while k * ramp_step <= ceiling * (1 + 1e-12):
        rate = k * ramp_step
        ok = not any(r.behind for r in run_at_rate(rate))
        tested.append((rate, ok))
        if not ok:
            break
        best = rate
        k += 1
    diag = ""
    if best == 0.0:
        diag = f"pipeline falls behind already at {ramp_step:g} bytes/s"
        log.warning(diag)
    return RampResult(best, tested, diag)
