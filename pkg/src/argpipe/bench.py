"""Scalability harness: Tests 1-3 in batch and stream mode, written as CSV."""

from __future__ import annotations

import csv
import itertools
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from . import model as m
from .engine import Engine, EngineConfig
from .model import ModelBundle
from .pipeline import PipelineConfig, StreamPipeline, document_sentences, run_batch
from .stream import CostModel, LagReport, RampResult, StreamConfig, ramp_to_max_rate, sentence_source, until_duration
from .synth import LINK_MARKER, Corpus, CorpusSpec, ModelSpec, generate_bundle, generate_corpus, generate_model

log = logging.getLogger(__name__)

CSV_COLUMNS = ["testId", "mode", "workers", "partitions", "datasetId", "thresholdPct", "svCount", "windowDim",
               "rep", "totalMs", "phase1Ms", "phase2Ms", "shuffleBytes", "modelLoads", "sentencesScored",
               "pairsScored", "linksEmitted", "maxRateBps"]
_NUMERIC = CSV_COLUMNS[9:]


@dataclass
class RunMetrics:
    test_id: str = ""
    mode: str = "batch"
    workers: int = 1
    partitions: int = 1
    dataset_id: str = ""
    threshold_pct: float | None = None
    sv_count: int | None = None
    window_dim: float | None = None
    rep: int = 0
    total_time: float = 0.0
    per_stage_time: dict = field(default_factory=dict)
    shuffle_bytes: int = 0
    model_load_count: int = 0
    sentences_scored: int = 0
    pairs_scored: int = 0
    links_emitted: int = 0
    max_sustainable_rate: float | None = None
    lag_reports: list[LagReport] = field(default_factory=list)

    def __post_init__(self):
        if min(self.shuffle_bytes, self.model_load_count, self.sentences_scored, self.pairs_scored,
               self.links_emitted) < 0:
            raise ValueError("counts must be non-negative")
        if self.pairs_scored < self.links_emitted:
            raise ValueError("more links than scored pairs")

    def config_key(self):
        return (self.test_id, self.mode, self.workers, self.partitions, self.dataset_id, self.threshold_pct,
                self.sv_count, self.window_dim)

    def row(self) -> dict:
        return {
            "testId": self.test_id, "mode": self.mode, "workers": self.workers, "partitions": self.partitions,
            "datasetId": self.dataset_id, "thresholdPct": _blank(self.threshold_pct),
            "svCount": _blank(self.sv_count), "windowDim": _blank(self.window_dim), "rep": self.rep,
            "totalMs": round(self.total_time * 1e3, 3),
            "phase1Ms": round(self.per_stage_time.get("phase1", 0.0) * 1e3, 3),
            "phase2Ms": round(self.per_stage_time.get("phase2", 0.0) * 1e3, 3),
            "shuffleBytes": self.shuffle_bytes, "modelLoads": self.model_load_count,
            "sentencesScored": self.sentences_scored, "pairsScored": self.pairs_scored,
            "linksEmitted": self.links_emitted, "maxRateBps": _blank(self.max_sustainable_rate),
        }


def _blank(x):
    return "" if x is None else x


@dataclass
class TestPlan:
    test_id: str
    mode: str = "batch"
    worker_grid: Sequence[int] = (1, 2, 4, 8)
    dataset_grid: Sequence = ()
    threshold_grid: Sequence[float] = ()
    model_grid: Sequence[int] = ()
    window_grid: Sequence[float] = ()
    include_scope_file: bool = True
    repetitions: int = 3
    warmup: bool = True
    partitions: int | None = None
    bundle: ModelBundle | None = None
    claim_svs: int = 33
    evid_svs: int = 33
    link_svs: int = 33
    nnz_per_vector: int = 12
    seed: int = 0
    batch_period: float = 1.0
    symmetric_state: bool = False
    slide: bool = True
    ramp_step: float = 200.0
    ramp_ceiling: float = 20_000.0
    step_duration: float = 20.0
    cost: CostModel | None = None
    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.test_id not in ("T1", "T2", "T3"):
            raise ValueError(f"unknown test {self.test_id!r}")
        if self.mode not in ("batch", "stream"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.worker_grid or self.repetitions < 1:
            raise ValueError("worker grid must be non-empty and repetitions positive")
        grid = {"T1": self.dataset_grid, "T2": self.threshold_grid, "T3": self.model_grid}[self.test_id]
        if not grid:
            raise ValueError(f"{self.test_id} needs a non-empty grid")

    def engine_cfg(self, workers: int) -> EngineConfig:
        return EngineConfig(workers, self.partitions or max(8, 2 * workers))


def _resolve_corpus(item, seed: int) -> tuple[str, Corpus]:
    if isinstance(item, Corpus):
        return f"custom{item.spec.seed}", item
    if isinstance(item, CorpusSpec):
        return f"n{sum(item.file_sizes())}", generate_corpus(item)
    if isinstance(item, str):
        name, _, scale = item.partition(":")
        return item, generate_corpus(CorpusSpec.dataset(name, float(scale or 0.1), seed=seed))
    if isinstance(item, tuple) and len(item) == 2 and isinstance(item[1], Corpus):
        return item
    raise TypeError(f"cannot build a corpus from {item!r}")


def _bundle(plan: TestPlan, corpus: Corpus) -> ModelBundle:
    if plan.bundle is not None:
        return plan.bundle
    return generate_bundle(corpus.dictionary, plan.claim_svs, plan.evid_svs, plan.link_svs,
                           plan.nnz_per_vector, plan.seed)


def batch_metrics(docs, bundle, pcfg: PipelineConfig, ecfg: EngineConfig, **labels) -> RunMetrics:
    run = run_batch(docs, bundle, pcfg, ecfg)
    c = run.metrics.counters
    return RunMetrics(mode="batch", workers=ecfg.num_workers, partitions=ecfg.num_partitions,
                      total_time=run.total_seconds,
                      per_stage_time={"phase1": run.phase1_seconds, "phase2": run.phase2_seconds},
                      shuffle_bytes=c.get("shuffle_bytes", 0), model_load_count=c.get("model_loads", 0),
                      sentences_scored=c.get("sentences_scored", 0), pairs_scored=c.get("pairs_scored", 0),
                      links_emitted=len(run.links), **labels)


def _repeat(plan: TestPlan, once: Callable[[int], RunMetrics]) -> list[RunMetrics]:
    if plan.warmup:
        once(-1)
    runs = [once(rep) for rep in range(plan.repetitions)]
    r = runs[-1]
    log.info("%s %s workers=%d dataset=%s pct=%s sv=%s window=%s: median %.1f ms", r.test_id, r.mode, r.workers,
             r.dataset_id, r.threshold_pct, r.sv_count, r.window_dim,
             1e3 * statistics.median(x.total_time for x in runs))
    return runs


# ---------------------------------------------------------------- streaming


def stream_max_rate(docs, bundle: ModelBundle, scfg: StreamConfig, pcfg: PipelineConfig, workers: int,
                    cost: CostModel | None, ramp_step: float, ceiling: float, step_duration: float,
                    partitions: int | None = None) -> tuple[RampResult, dict]:
    """Ramp a synthetic sentence stream until a micro-batch falls behind.

    Each ramp step is a fresh run of ``step_duration`` seconds over the
    documents streamed back to back at the step's rate.
    """
    sentences = document_sentences(docs)
    if not any(ss for _, ss in sentences):
        raise ValueError("cannot ramp an empty corpus")
    cost = cost.scaled(workers) if cost is not None else None
    pcfg = replace(pcfg, mode="stream", stream=scfg)
    totals = {"pairs": 0, "sentences": 0, "links": 0}

    def run_at_rate(rate: float) -> list[LagReport]:
        events = until_duration(sentence_source(_cycled(sentences), rate), step_duration)
        with Engine(EngineConfig(workers, partitions or max(8, 2 * workers))) as eng:
            sp = StreamPipeline(bundle, pcfg, eng, cost)
            run = sp.run(events, until=step_duration, stop_when_behind=True)
        totals["pairs"] += run.pairs_scored
        totals["sentences"] += run.sentences
        totals["links"] += len(run.all_links)
        return run.reports

    return ramp_to_max_rate(run_at_rate, ramp_step, ceiling), totals


def _cycled(sentences):
    """Documents repeated without end, each pass under fresh file keys."""
    for i in itertools.count():
        for key, ss in sentences:
            k = key if i == 0 else f"{key}~{i}"
            yield k, ss if i == 0 else [replace(s, file_key=k) for s in ss]


# ---------------------------------------------------------------- tests


def run_test1(plan: TestPlan) -> list[RunMetrics]:
    """Growing input: batch time per dataset, or stream capacity per window size."""
    out = []
    for item in plan.dataset_grid:
        ds_id, corpus = _resolve_corpus(item, plan.seed)
        bundle = _bundle(plan, corpus)
        if plan.mode == "batch":
            for w in plan.worker_grid:
                ecfg = plan.engine_cfg(w)
                out += _repeat(plan, lambda rep: batch_metrics(corpus.files, bundle, PipelineConfig(), ecfg,
                                                               test_id="T1", dataset_id=ds_id, rep=rep))
            continue
        series = [(wd, StreamConfig(plan.batch_period, wd, "window", slide=plan.slide)) for wd in plan.window_grid]
        if plan.include_scope_file:
            series.append((None, StreamConfig(plan.batch_period, None, "file", plan.symmetric_state)))
        for wd, scfg in series:
            for w in plan.worker_grid:
                out += _repeat(plan, lambda rep: _stream_row(plan, corpus, bundle, scfg, PipelineConfig(), w,
                                                             test_id="T1", dataset_id=ds_id, window_dim=wd,
                                                             rep=rep))
    return out


def _stream_row(plan, corpus, bundle, scfg, pcfg, workers, **labels) -> RunMetrics:
    t0 = time.perf_counter()
    res, totals = stream_max_rate(corpus.files, bundle, scfg, pcfg, workers, plan.cost, plan.ramp_step,
                                  plan.ramp_ceiling, plan.step_duration, plan.partitions)
    return RunMetrics(mode="stream", workers=workers, partitions=plan.engine_cfg(workers).num_partitions,
                      total_time=time.perf_counter() - t0, sentences_scored=totals["sentences"],
                      pairs_scored=totals["pairs"], links_emitted=totals["links"],
                      max_sustainable_rate=res.max_rate, **labels)


def phase1_scores(docs, bundle: ModelBundle) -> tuple[np.ndarray, np.ndarray]:
    """Claim and evidence scores of every sentence, in document order."""
    from .textproc import extract_features, split_sentences

    fvs = [extract_features(s.text, bundle.dictionary)
           for k, v in (docs.items() if hasattr(docs, "items") else docs) for s in split_sentences(k, v)]
    if not fvs:
        return np.zeros(0), np.zeros(0)
    return m.score_many(bundle.claim, fvs), m.score_many(bundle.evidence, fvs)


def threshold_for_fraction(scores: np.ndarray, fraction: float) -> float:
    """Threshold letting ``round(fraction * n)`` of ``scores`` pass a strict ``>`` test."""
    s = np.sort(np.asarray(scores, dtype=float))[::-1]
    n = s.size
    k = int(round(fraction * n))
    if n == 0:
        return 0.0
    if k <= 0:
        return float(s[0]) + 1.0
    if k >= n:
        return float(s[-1]) - 1.0
    return float((s[k - 1] + s[k]) / 2.0)


def thresholds_for_pct(docs, bundle: ModelBundle, pct: float) -> PipelineConfig:
    cs, es = phase1_scores(docs, bundle)
    return PipelineConfig(claim_threshold=threshold_for_fraction(cs, pct / 100.0),
                          evid_threshold=threshold_for_fraction(es, pct / 100.0))


def run_test2(plan: TestPlan) -> list[RunMetrics]:
    """Pass-through percentage of phase 1 varied through calibrated thresholds."""
    ds_id, corpus = _resolve_corpus(plan.dataset_grid[0] if plan.dataset_grid else CorpusSpec(8, 250, seed=plan.seed),
                                    plan.seed)
    bundle = _bundle(plan, corpus)
    out = []
    for pct in plan.threshold_grid:
        pcfg = thresholds_for_pct(corpus.files, bundle, pct)
        for w in plan.worker_grid:
            if plan.mode == "batch":
                ecfg = plan.engine_cfg(w)
                out += _repeat(plan, lambda rep: batch_metrics(corpus.files, bundle, pcfg, ecfg, test_id="T2",
                                                               dataset_id=ds_id, threshold_pct=pct, rep=rep))
            else:
                wd = plan.window_grid[0] if plan.window_grid else None
                scfg = StreamConfig(plan.batch_period, wd, "window" if wd else "file", plan.symmetric_state,
                                    slide=plan.slide)
                out += _repeat(plan, lambda rep: _stream_row(plan, corpus, bundle, scfg, pcfg, w, test_id="T2",
                                                             dataset_id=ds_id, threshold_pct=pct, window_dim=wd,
                                                             rep=rep))
    return out


def link_models(dictionary, sv_counts: Sequence[int], nnz: int = 12, seed: int = 0) -> list:
    """Sign-equivalent link models differing only in padding."""
    return [generate_model(ModelSpec(n, nnz, seed), dictionary, [LINK_MARKER], pair=True, jitter=0.002,
                           name=f"link{n}") for n in sv_counts]


def run_test3(plan: TestPlan) -> list[RunMetrics]:
    """Link models of growing support-vector count."""
    ds_id, corpus = _resolve_corpus(plan.dataset_grid[0] if plan.dataset_grid else CorpusSpec(4, 100, seed=plan.seed),
                                    plan.seed)
    base = _bundle(plan, corpus)
    out = []
    for link in link_models(corpus.dictionary, plan.model_grid, plan.nnz_per_vector, plan.seed):
        bundle = ModelBundle(base.claim, base.evidence, link, base.dictionary)
        n = link.num_support_vectors
        for w in plan.worker_grid:
            if plan.mode == "batch":
                ecfg = plan.engine_cfg(w)
                out += _repeat(plan, lambda rep: batch_metrics(corpus.files, bundle, PipelineConfig(), ecfg,
                                                               test_id="T3", dataset_id=ds_id, sv_count=n, rep=rep))
            else:
                wd = plan.window_grid[0] if plan.window_grid else None
                scfg = StreamConfig(plan.batch_period, wd, "window" if wd else "file", plan.symmetric_state,
                                    slide=plan.slide)
                out += _repeat(plan, lambda rep: _stream_row(plan, corpus, bundle, scfg, PipelineConfig(), w,
                                                             test_id="T3", dataset_id=ds_id, sv_count=n,
                                                             window_dim=wd, rep=rep))
    return out


def per_pair_seconds(link, claims, evidence, vocab_size: int, reps: int = 5) -> float:
    """Median kernel time per (claim, evidence) pair over the full cross product."""
    ci, ei = np.meshgrid(np.arange(len(claims)), np.arange(len(evidence)), indexing="ij")
    ci, ei = ci.ravel(), ei.ravel()
    m.score_pairs_many(link, claims[:1], evidence[:1], [0], [0], vocab_size)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        m.score_pairs_many(link, claims, evidence, ci, ei, vocab_size)
        times.append(time.perf_counter() - t0)
    return statistics.median(times) / ci.size


def calibrate_cost(bundle: ModelBundle, docs, reps: int = 3) -> CostModel:
    """Per-sentence and per-pair kernel costs measured on ``docs``."""
    from .textproc import extract_features, split_sentences

    fvs = [extract_features(s.text, bundle.dictionary) for k, v in docs.items() for s in split_sentences(k, v)][:400]
    m.score_many(bundle.claim, fvs[:1])
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        m.score_many(bundle.claim, fvs)
        m.score_many(bundle.evidence, fvs)
        times.append(time.perf_counter() - t0)
    per_sentence = statistics.median(times) / max(1, len(fvs))
    half = fvs[: min(40, len(fvs))]
    per_pair = per_pair_seconds(bundle.link, half, half, bundle.vocab_size, reps)
    return CostModel(per_batch=0.0, per_sentence=per_sentence, per_pair=per_pair)


# ---------------------------------------------------------------- output


def median_rows(metrics: Sequence[RunMetrics]) -> list[dict]:
    groups: dict = {}
    for rm in metrics:
        groups.setdefault(rm.config_key(), []).append(rm.row())
    rows = []
    for rs in groups.values():
        rows += rs
        med = dict(rs[0])
        med["rep"] = "median"
        for col in _NUMERIC:
            vals = [r[col] for r in rs if r[col] != ""]
            med[col] = statistics.median(vals) if vals else ""
        rows.append(med)
    return rows


def emit_csv(metrics: Sequence[RunMetrics], path, plan: TestPlan | None = None) -> None:
    """One row per (configuration, repetition) followed by that configuration's median row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for row in median_rows(metrics):
            w.writerow(row)


def run_plan(plan: TestPlan) -> list[RunMetrics]:
    return {"T1": run_test1, "T2": run_test2, "T3": run_test3}[plan.test_id](plan)


def compare_backends(n_sv: int = 2000, n_rows: int = 200, nnz: int = 30, dim: int = 4000, reps: int = 5,
                     seed: int = 0) -> dict[str, float]:
    """Seconds per ``score_rows`` call for each available kernel backend."""
    rng = np.random.default_rng(seed)

    def csr(rows):
        ptr = np.arange(rows + 1, dtype=np.int64) * nnz
        idx = np.concatenate([np.sort(rng.choice(dim, nnz, replace=False)) for _ in range(rows)]).astype(np.int64)
        return ptr, idx, rng.normal(size=rows * nnz)

    sv_ptr, sv_idx, sv_val = csr(n_sv)
    alpha = rng.normal(size=n_sv)
    x_ptr, x_idx, x_val = csr(n_rows)
    out = {}
    for name, (rows_fn, _) in _kernels.implementations().items():
        buf = np.empty(n_rows)
        rows_fn(sv_ptr, sv_idx, sv_val, alpha, 0.1, x_ptr[:2], x_idx, x_val, buf[:1])
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            rows_fn(sv_ptr, sv_idx, sv_val, alpha, 0.1, x_ptr, x_idx, x_val, buf)
            times.append(time.perf_counter() - t0)
        out[name] = statistics.median(times)
    return out
