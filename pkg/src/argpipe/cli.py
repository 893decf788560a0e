"""Command line entry point: ``argpipe {bench,run,synth,backends}``."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from . import _kernels
from .bench import TestPlan, compare_backends, emit_csv, run_plan
from .engine import Engine, EngineConfig
from .pipeline import PipelineConfig, StreamPipeline, document_sentences, run_batch, write_links
from .stream import StreamConfig, sentence_source
from .synth import (MODEL_SIZES, CorpusSpec, generate_bundle, generate_corpus, read_bundle, read_docs,
                    write_bundle, write_corpus)

_DUR = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?)\s*(ms|s|m|h)?\s*$")
_UNIT = {"ms": 1e-3, "s": 1.0, "m": 60.0, "h": 3600.0, None: 1.0}


def parse_duration(text: str) -> float:
    """``"200ms"``, ``"1.5s"``, ``"5m"`` or bare seconds."""
    mt = _DUR.match(text)
    if not mt:
        raise argparse.ArgumentTypeError(f"bad duration {text!r}")
    return float(mt.group(1)) * _UNIT[mt.group(2)]


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _dur_list(text):
    return [parse_duration(x) for x in text.split(",") if x.strip()]


def _kv(text: str) -> dict:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        k, sep, v = part.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {part!r}")
        out[k.strip()] = v.strip()
    return out


def corpus_from_arg(arg: str, seed: int = 0, scale: float = 0.1):
    """A directory of ``.txt`` files, a dataset name like ``DS1`` or ``DS2:0.05``, or ``files=..,sentences=..``."""
    p = Path(arg)
    if p.is_dir():
        return None, read_docs(p)
    name, _, sc = arg.partition(":")
    if name.upper() in ("DS1", "DS2", "DS3", "DS4"):
        spec = CorpusSpec.dataset(name.upper(), float(sc) if sc else scale, seed=seed)
    else:
        kv = _kv(arg)
        keys = {"files": "num_files", "sentences": "sentences_per_file", "vocab": "vocab_size",
                "claim_rate": "claim_rate", "evid_rate": "evid_rate", "link_rate": "link_rate",
                "seed": "seed", "total": "total_sentences", "words": "words_per_sentence"}
        kw = {"seed": seed}
        for k, v in kv.items():
            if k not in keys:
                raise SystemExit(f"unknown corpus key {k!r}")
            kw[keys[k]] = float(v) if "rate" in k else int(v)
        spec = CorpusSpec(**kw)
    corpus = generate_corpus(spec)
    return corpus, corpus.files


def bundle_from_arg(arg: str | None, corpus, corpus_arg: str | None = None):
    if arg and Path(arg).is_dir():
        d = Path(arg)
        dict_path = d / "dict.txt"
        if not dict_path.exists() and corpus_arg and (Path(corpus_arg) / "dict.txt").exists():
            dict_path = Path(corpus_arg) / "dict.txt"
        return read_bundle(d, dict_path)
    if corpus is None:
        if corpus_arg and (Path(corpus_arg) / "claim.svm").exists():
            return read_bundle(corpus_arg)
        raise SystemExit("--models spec needs a generated corpus; pass a model directory for file corpora")
    kv = _kv(arg or "")
    return generate_bundle(corpus.dictionary, int(kv.get("claim", 33)), int(kv.get("evidence", 33)),
                           int(kv.get("link", 33)), int(kv.get("nnz", 12)), int(kv.get("seed", 0)))


def _stream_cfg(args) -> StreamConfig:
    windows = args.window or []
    scope = args.scope
    return StreamConfig(args.batch_period, windows[0] if scope == "window" and windows else None, scope,
                        args.symmetric_state, args.slide, args.window_keep_keys, args.state_cap)


def cmd_bench(args) -> int:
    corpus_args = args.corpus or ["files=4,sentences=250"]
    datasets = []
    for c in corpus_args:
        corpus, docs = corpus_from_arg(c, args.seed, args.scale)
        if corpus is None:
            raise SystemExit("bench needs generated corpora (spec strings), not directories")
        datasets.append((c, corpus))
    test = f"T{args.test}"
    plan = TestPlan(
        test, args.mode, worker_grid=args.workers, dataset_grid=datasets,
        threshold_grid=args.thresholds, model_grid=args.sv_counts, window_grid=args.window or [],
        include_scope_file=args.scope != "window" or args.test == 1, repetitions=args.reps,
        partitions=args.partitions, seed=args.seed, batch_period=args.batch_period,
        symmetric_state=args.symmetric_state, slide=args.slide, ramp_step=args.ramp_step,
        ramp_ceiling=args.ramp_ceiling, step_duration=args.step_duration)
    if args.models:
        plan.bundle = bundle_from_arg(args.models, datasets[0][1])
    if args.mode == "stream" and not args.wall_clock:
        from .bench import calibrate_cost

        c0 = datasets[0][1]
        plan.cost = calibrate_cost(plan.bundle or generate_bundle(c0.dictionary, 33, 33, 33), c0.files)
    metrics = run_plan(plan)
    emit_csv(metrics, args.out, plan)
    print(f"wrote {len(metrics)} runs to {args.out}")
    return 0


def cmd_run(args) -> int:
    ecfg = EngineConfig(args.workers[-1], args.partitions or 8)
    pcfg = PipelineConfig(args.claim_threshold, args.evid_threshold, args.link_threshold, args.mode,
                          _stream_cfg(args) if args.mode == "stream" else None, args.no_self_pairs)
    if args.mode == "batch":
        corpus, docs = corpus_from_arg(args.corpus or args.input, args.seed, args.scale)
        bundle = bundle_from_arg(args.models, corpus, args.corpus or args.input)
        with Engine(ecfg) as eng:
            run = run_batch(docs, bundle, pcfg, engine=eng)
            if args.task_log:
                eng.write_task_log(args.task_log)
        write_links(run.links, args.out)
        print(f"{len(run.links)} links from {run.sentences} sentences ({run.claims} claims, "
              f"{run.evidence} evidence) in {run.total_seconds:.3f}s")
        return 0

    if args.source == "replay":
        if not args.input:
            raise SystemExit("--source replay needs --input <dir>")
        corpus, docs = None, read_docs(args.input)
        bundle = bundle_from_arg(args.models, None, args.input)
        sentence_bytes = None
    else:
        corpus, docs = corpus_from_arg(args.corpus or f"files=4,sentences=100,seed={args.seed}", args.seed, args.scale)
        bundle = bundle_from_arg(args.models, corpus)
        sentence_bytes = 200
    events = sentence_source(document_sentences(docs), args.rate, sentence_bytes)
    lag_fh = open(args.lag_log, "w", encoding="utf-8") if args.lag_log else None

    def on_report(rep):
        if lag_fh:
            lag_fh.write(json.dumps(rep.to_json()) + "\n")

    try:
        with Engine(ecfg) as eng:
            sp = StreamPipeline(bundle, pcfg, eng)
            if args.live:
                run = sp.run_live(events, on_report=on_report)
            else:
                run = sp.run(events)
                for rep in run.reports:
                    on_report(rep)
            if args.task_log:
                eng.write_task_log(args.task_log)
    finally:
        if lag_fh:
            lag_fh.close()
    write_links(run.all_links, args.out)
    behind = sum(r.behind for r in run.reports)
    print(f"{len(run.all_links)} links over {len(run.reports)} micro-batches, {behind} behind")
    return 0


def cmd_synth(args) -> int:
    corpus, _ = corpus_from_arg(args.corpus, args.seed, args.scale)
    if corpus is None:
        raise SystemExit("--corpus must be a spec for synth")
    out = write_corpus(corpus, args.out)
    bundle = bundle_from_arg(args.models or "", corpus)
    write_bundle(bundle, out)
    print(f"wrote {len(corpus.files)} files, {corpus.num_sentences} sentences and models to {out}")
    return 0


def cmd_backends(args) -> int:
    res = compare_backends(n_sv=args.sv, n_rows=args.rows)
    for name, sec in sorted(res.items()):
        print(f"{name:6s} {sec * 1e3:10.3f} ms")
    if "numba" in res:
        print(f"speedup {res['numpy'] / res['numba']:.1f}x (active backend: {_kernels.BACKEND})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="argpipe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--mode", choices=["batch", "stream"], default="batch")
    common.add_argument("--workers", type=_int_list, default=[1, 2, 4, 8])
    common.add_argument("--partitions", type=int, default=None)
    common.add_argument("--models", default=None, help="model directory or spec claim=N,evidence=N,link=N,nnz=K")
    common.add_argument("--batch-period", type=parse_duration, default=0.2)
    common.add_argument("--window", type=_dur_list, default=None, help="window length(s), e.g. 1s,5s")
    common.add_argument("--scope", choices=["file", "window"], default="file")
    common.add_argument("--symmetric-state", action="store_true")
    common.add_argument("--slide", action="store_true", help="sliding windows (slide = batch period)")
    common.add_argument("--window-keep-keys", action="store_true")
    common.add_argument("--state-cap", type=int, default=100_000)
    common.add_argument("--no-self-pairs", action="store_true")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--scale", type=float, default=0.1, help="dataset scale for DS1..DS4 specs")

    b = sub.add_parser("bench", parents=[common], help="run Test 1, 2 or 3 and write CSV")
    b.add_argument("--test", type=int, choices=[1, 2, 3], required=True)
    b.add_argument("--corpus", action="append", help="corpus spec, repeatable (DS1, DS2:0.05, files=4,sentences=250)")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--out", required=True)
    b.add_argument("--thresholds", type=_float_list, default=[5, 35, 65, 90])
    b.add_argument("--sv-counts", type=_int_list, default=list(MODEL_SIZES.values()))
    b.add_argument("--ramp-step", type=float, default=200.0)
    b.add_argument("--ramp-ceiling", type=float, default=20_000.0)
    b.add_argument("--step-duration", type=parse_duration, default=20.0)
    b.add_argument("--wall-clock", action="store_true", help="measure processing time instead of the cost model")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("run", parents=[common], help="run the pipeline once and write links as JSON lines")
    r.add_argument("--corpus", default=None)
    r.add_argument("--input", default=None, help="directory of .txt documents")
    r.add_argument("--source", choices=["replay", "synth"], default="synth")
    r.add_argument("--rate", type=float, default=2000.0, help="stream input rate in bytes/s")
    r.add_argument("--live", action="store_true", help="real-time ingestion on wall clock")
    r.add_argument("--claim-threshold", type=float, default=0.0)
    r.add_argument("--evid-threshold", type=float, default=0.0)
    r.add_argument("--link-threshold", type=float, default=0.0)
    r.add_argument("--out", required=True)
    r.add_argument("--task-log", default=None)
    r.add_argument("--lag-log", default=None)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus, dictionary and models")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    k = sub.add_parser("backends", help="time the numba and numpy scoring kernels")
    k.add_argument("--sv", type=int, default=2000)
    k.add_argument("--rows", type=int, default=200)
    k.set_defaults(func=cmd_backends)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
