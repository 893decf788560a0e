"""The two-phase claim/evidence/link pipeline on top of the engines.

Phase 1 splits documents into sentences, extracts features, scores every
sentence with the claim and evidence models once (cached), and filters the
two score columns. Phase 2 pairs claims with evidence of the same file (or
window, when streaming), scores each pair with the link model and keeps
pairs above the link threshold.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import model as m
from .engine import Broadcast, Dataset, Engine, EngineConfig, KeyedRecord
from .errors import ScoringError
from .model import ModelBundle, SvmModel
from .stream import (BatchOutcome, CostModel, EndOfFile, LagReport, MicroBatch, Scheduler, StreamConfig,
                     make_joiner, run_live, slice_stream)
from .textproc import ScoredSentence, Sentence, extract_features, split_sentences


@dataclass(frozen=True)
class PipelineConfig:
    claim_threshold: float = 0.0
    evid_threshold: float = 0.0
    link_threshold: float = 0.0
    mode: str = "batch"
    stream: StreamConfig | None = None
    no_self_pairs: bool = False
    rebalance: bool = True

    def __post_init__(self):
        for t in (self.claim_threshold, self.evid_threshold, self.link_threshold):
            if not math.isfinite(t):
                raise ValueError("thresholds must be finite")
        if self.mode not in ("batch", "stream"):
            raise ValueError(f"mode must be 'batch' or 'stream', got {self.mode!r}")
        if self.mode == "stream" and self.stream is None:
            raise ValueError("stream mode needs a StreamConfig")


@dataclass(frozen=True)
class LinkResult:
    file_key: str
    claim: Sentence
    evidence: Sentence
    link_score: float

    def sort_key(self):
        return (self.file_key, self.claim.ordinal, self.evidence.file_key, self.evidence.ordinal)

    def to_json(self) -> dict:
        return {"file": self.file_key, "claimOrdinal": self.claim.ordinal,
                "evidenceOrdinal": self.evidence.ordinal, "claimText": self.claim.text,
                "evidenceText": self.evidence.text, "linkScore": self.link_score}


def canonical(links: Iterable[LinkResult]) -> list[LinkResult]:
    return sorted(links, key=LinkResult.sort_key)


def write_links(links: Iterable[LinkResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lr in links:
            fh.write(json.dumps(lr.to_json()) + "\n")


def _doc_items(docs) -> list[tuple[str, str]]:
    items = docs.items() if isinstance(docs, Mapping) else docs
    return [(str(k), v) for k, v in items]


# ---------------------------------------------------------------- phase 1


def score_sentences(engine: Engine, sentences: Dataset, bundle: Broadcast, name: str = "phase1") -> Dataset:
    """Feature extraction plus claim/evidence scoring, cached."""
    metrics = engine.metrics

    def featurize(s: Sentence):
        return s, extract_features(s.text, bundle.value.dictionary)

    def load_models():
        b = bundle.value
        metrics.add("model_loads", 2)
        return b.claim, b.evidence

    def score_partition(models, recs):
        claim_model, evid_model = models
        fvs = [r.value[1] for r in recs]
        try:
            cs = m.score_many(claim_model, fvs)
            es = m.score_many(evid_model, fvs)
        except ScoringError as exc:
            _locate_failure(exc, [r.value[0] for r in recs], fvs, (claim_model, evid_model))
            raise
        metrics.add("sentences_scored", len(recs))
        return [KeyedRecord(r.key, ScoredSentence(r.value[0], r.value[1], float(c), float(e)))
                for r, c, e in zip(recs, cs.tolist(), es.tolist())]

    return (sentences
            .map_values(featurize, name=f"{name}:features")
            .map_partitions(load_models, score_partition, name=f"{name}:score", preserves_keys=True)
            .cache())


def _locate_failure(exc, sentences, fvs, models):
    """Re-raise a batch scoring failure naming the first offending sentence."""
    for s, fv in zip(sentences, fvs):
        for model in models:
            try:
                m.score(model, fv)
            except ScoringError:
                raise ScoringError(model.name, f"non-finite score for sentence {s.ordinal} of {s.file_key!r}: "
                                               f"{s.text[:60]!r}") from exc


def split_phase(scored: Dataset, cfg: PipelineConfig, name: str = "phase1") -> tuple[Dataset, Dataset]:
    ct, et = cfg.claim_threshold, cfg.evid_threshold
    claims = scored.filter(lambda ss: ss.claim_score > ct, name=f"{name}:claims")
    evidence = scored.filter(lambda ss: ss.evid_score > et, name=f"{name}:evidence")
    return claims, evidence


def phase1(engine: Engine, docs: Dataset, bundle: Broadcast, cfg: PipelineConfig):
    """Returns ``(claims, evidence, scored)`` datasets keyed by file."""
    sentences = docs.flat_map(lambda r: ((r.key, s) for s in split_sentences(r.key, r.value)),
                              name="phase1:split")
    if cfg.rebalance:
        sentences = sentences.repartition(name="phase1:rebalance")
    scored = score_sentences(engine, sentences, bundle)
    claims, evidence = split_phase(scored, cfg)
    return claims, evidence, scored


# ---------------------------------------------------------------- phase 2


def score_links(engine: Engine, pairs: Dataset, link: Broadcast, vocab_size: int, cfg: PipelineConfig,
                name: str = "phase2") -> Dataset:
    metrics = engine.metrics

    def load_link():
        metrics.add("model_loads")
        return link.value

    def score_partition(model: SvmModel, recs):
        claims, evid, ci, ei = [], [], [], []
        seen_c: dict[int, int] = {}
        seen_e: dict[int, int] = {}
        for r in recs:
            c, e = r.value
            j = seen_c.get(id(c))
            if j is None:
                j = seen_c[id(c)] = len(claims)
                claims.append(c.fv)
            ci.append(j)
            j = seen_e.get(id(e))
            if j is None:
                j = seen_e[id(e)] = len(evid)
                evid.append(e.fv)
            ei.append(j)
        scores = m.score_pairs_many(model, claims, evid, ci, ei, vocab_size)
        metrics.add("pairs_scored", len(recs))
        return [KeyedRecord(r.key, LinkResult(r.value[0].sentence.file_key, r.value[0].sentence,
                                              r.value[1].sentence, s))
                for r, s in zip(recs, scores.tolist())]

    if cfg.no_self_pairs:
        pairs = pairs.filter(lambda ce: not _self_pair(*ce), name=f"{name}:no-self")
    lt = cfg.link_threshold
    return (pairs
            .map_partitions(load_link, score_partition, name=f"{name}:score", preserves_keys=True)
            .filter(lambda lr: lr.link_score > lt, name=f"{name}:links"))


def _self_pair(c: ScoredSentence, e: ScoredSentence) -> bool:
    return c.sentence.file_key == e.sentence.file_key and c.sentence.ordinal == e.sentence.ordinal


def phase2_batch(engine: Engine, claims: Dataset, evidence: Dataset, link: Broadcast, vocab_size: int,
                 cfg: PipelineConfig) -> Dataset:
    """Score every same-file (claim, evidence) pair and keep those above the link threshold.

    Claims and evidence are co-grouped by file and each file's claim x
    evidence block is expanded into index arrays for one kernel call per
    partition, so only surviving links become Python objects.
    """
    metrics = engine.metrics
    lt = cfg.link_threshold

    def load_link():
        metrics.add("model_loads")
        return link.value

    def score_blocks(model: SvmModel, recs):
        cs_all, es_all, ci, ei = [], [], [], []
        for r in recs:
            cs, es = r.value
            if not cs or not es:
                continue
            a = np.repeat(np.arange(len(cs_all), len(cs_all) + len(cs)), len(es))
            b = np.tile(np.arange(len(es_all), len(es_all) + len(es)), len(cs))
            cs_all += cs
            es_all += es
            ci.append(a)
            ei.append(b)
        if not ci:
            return []
        ci, ei = np.concatenate(ci), np.concatenate(ei)
        if cfg.no_self_pairs:
            c_ord = np.array([c.sentence.ordinal for c in cs_all])
            e_ord = np.array([e.sentence.ordinal for e in es_all])
            keep = c_ord[ci] != e_ord[ei]
            ci, ei = ci[keep], ei[keep]
        scores = m.score_pairs_many(model, [c.fv for c in cs_all], [e.fv for e in es_all], ci, ei, vocab_size)
        metrics.add("pairs_scored", ci.size)
        out = []
        for h in np.flatnonzero(scores > lt).tolist():
            c, e = cs_all[ci[h]], es_all[ei[h]]
            out.append(KeyedRecord(c.sentence.file_key,
                                   LinkResult(c.sentence.file_key, c.sentence, e.sentence, float(scores[h]))))
        return out

    groups = claims.cogroup(evidence, name="phase2:join")
    return groups.map_partitions(load_link, score_blocks, name="phase2:score", preserves_keys=True)


@dataclass
class BatchRun:
    links: list[LinkResult]
    engine: Engine
    total_seconds: float
    phase1_seconds: float
    phase2_seconds: float
    sentences: int
    claims: int
    evidence: int

    @property
    def metrics(self):
        return self.engine.metrics


def run_batch(docs, bundle: ModelBundle, cfg: PipelineConfig | None = None,
              engine_cfg: EngineConfig | None = None, engine: Engine | None = None) -> BatchRun:
    """Run both phases on ``docs`` (mapping or pairs of file key to text)."""
    cfg = cfg or PipelineConfig()
    own = engine is None
    engine = engine or Engine(engine_cfg)
    try:
        t0 = time.perf_counter()
        docs_ds = engine.parallelize(_doc_items(docs), name="phase1:read")
        bundle_bc = engine.broadcast(bundle)
        link_bc = engine.broadcast(bundle.link)
        claims, evidence, scored = phase1(engine, docs_ds, bundle_bc, cfg)
        n_claims, n_evid = claims.count(), evidence.count()
        t1 = time.perf_counter()
        links = phase2_batch(engine, claims, evidence, link_bc, bundle.vocab_size, cfg).collect()
        t2 = time.perf_counter()
        return BatchRun([r.value for r in links], engine, t2 - t0, t1 - t0, t2 - t1,
                        scored.count(), n_claims, n_evid)
    finally:
        if own:
            engine.close()


def run_sequential_reference(docs, bundle: ModelBundle, cfg: PipelineConfig | None = None) -> list[LinkResult]:
    """Single-threaded nested loops, no engine."""
    cfg = cfg or PipelineConfig()
    out = []
    for key, content in _doc_items(docs):
        claims, evidence = [], []
        for s in split_sentences(key, content):
            fv = extract_features(s.text, bundle.dictionary)
            if m.score(bundle.claim, fv) > cfg.claim_threshold:
                claims.append((s, fv))
            if m.score(bundle.evidence, fv) > cfg.evid_threshold:
                evidence.append((s, fv))
        for cs, cfv in claims:
            for es, efv in evidence:
                if cfg.no_self_pairs and cs.ordinal == es.ordinal:
                    continue
                ls = m.score_pair(bundle.link, cfv, efv, bundle.vocab_size)
                if ls > cfg.link_threshold:
                    out.append(LinkResult(key, cs, es, ls))
    return canonical(out)


# ---------------------------------------------------------------- streaming


@dataclass
class StreamRun:
    links: list[tuple[int, list[LinkResult]]]
    reports: list[LagReport]
    sentences: int = 0
    claims: int = 0
    evidence: int = 0
    pairs_per_batch: list[int] = field(default_factory=list)

    @property
    def all_links(self) -> list[LinkResult]:
        return [lr for _, batch in self.links for lr in batch]

    @property
    def pairs_scored(self) -> int:
        return sum(self.pairs_per_batch)


class StreamPipeline:
    """Phase 1 per micro-batch, then the configured stream join and link scoring.

    Records of the input stream are ``KeyedRecord(file, Sentence)`` or
    ``KeyedRecord(file, EndOfFile)``.
    """

    def __init__(self, bundle: ModelBundle, cfg: PipelineConfig, engine: Engine,
                 cost: CostModel | None = None):
        if cfg.stream is None:
            raise ValueError("StreamPipeline needs cfg.stream")
        self.bundle = bundle
        self.cfg = cfg
        self.scfg = cfg.stream
        self.engine = engine
        self.cost = cost
        self.joiner = make_joiner(self.scfg)
        self._bundle_bc = engine.broadcast(bundle)
        self._link_bc = engine.broadcast(bundle.link)
        self.run_state = StreamRun([], [])

    def process(self, batch: MicroBatch, final: bool = False) -> BatchOutcome:
        sents = [r for r in batch.records if not isinstance(r.value, EndOfFile)]
        eofs = [r.value.file_key for r in batch.records if isinstance(r.value, EndOfFile)]
        claims, evidence = self.phase1_batch(sents, batch.seq)
        pairs = self.joiner.step(batch.seq, claims, evidence)
        if final:
            pairs += self.joiner.flush(batch.seq)
        links = self.phase2_pairs(pairs, batch.seq)
        for key in eofs:
            self.joiner.end_file(key)
        rs = self.run_state
        rs.sentences += len(sents)
        rs.claims += len(claims)
        rs.evidence += len(evidence)
        rs.pairs_per_batch.append(len(pairs) if not self.cfg.no_self_pairs
                                  else sum(1 for p in pairs if not _self_pair(*p.value)))
        return BatchOutcome(links, len(sents), rs.pairs_per_batch[-1])

    def phase1_batch(self, sentence_records, seq) -> tuple[list[KeyedRecord], list[KeyedRecord]]:
        if not sentence_records:
            return [], []
        ds = self.engine.parallelize(sentence_records, name=f"stream{seq}:read")
        if self.cfg.rebalance:
            ds = ds.repartition(name="phase1:rebalance")
        scored = score_sentences(self.engine, ds, self._bundle_bc)
        claims, evidence = split_phase(scored, self.cfg)
        return claims.collect(), evidence.collect()

    def phase2_pairs(self, pairs: list[KeyedRecord], seq) -> list[LinkResult]:
        if not pairs:
            return []
        n = self.engine.cfg.num_partitions
        chunks = [pairs[i::n] for i in range(n)]
        ds = self.engine.from_partitions(chunks, name=f"stream{seq}:pairs")
        links = score_links(self.engine, ds, self._link_bc, self.bundle.vocab_size, self.cfg)
        return [r.value for r in links.collect()]

    def run(self, events, until: float | None = None, stop_when_behind: bool = False) -> StreamRun:
        """Virtual-clock (with a cost model) or measured run over a timed event stream."""
        batches = list(slice_stream(events, self.scfg, until=until))
        last = batches[-1].seq if batches else -1
        sched = Scheduler(self.scfg, self.cost)
        outputs = sched.run(batches, lambda b: self.process(b, final=b.seq == last),
                            stop_when_behind=stop_when_behind)
        self.run_state.links = outputs
        self.run_state.reports = sched.reports
        return self.run_state

    def run_live(self, events, until: float | None = None, on_report=None) -> StreamRun:
        outputs, reports = run_live(events, self.scfg, self.process, on_report=on_report, until=until)
        if outputs:
            tail = self.phase2_pairs(self.joiner.flush(outputs[-1][0]), outputs[-1][0])
            if tail:
                outputs.append((outputs[-1][0], tail))
        self.run_state.links = outputs
        self.run_state.reports = reports
        return self.run_state


def phase2_stream(bundle: ModelBundle, events, cfg: PipelineConfig, engine: Engine,
                  cost: CostModel | None = None, until: float | None = None) -> StreamRun:
    return StreamPipeline(bundle, cfg, engine, cost).run(events, until=until)


def document_sentences(docs) -> list[tuple[str, list[Sentence]]]:
    return [(k, split_sentences(k, v)) for k, v in _doc_items(docs)]
