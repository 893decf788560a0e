"""Numba vs pure-numpy scoring kernels.

Times ``score_rows`` and ``score_pairs`` for both backends on synthetic
sparse data at a few support-vector counts, and checks they agree. With
``--pipeline`` it also times a full batch run in two subprocesses, one with
ARGPIPE_DISABLE_NUMBA=1.

    python benchmarks/bench_backends.py
    python benchmarks/bench_backends.py --sv 1000,7085 --pipeline
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from argpipe import _kernels

PIPELINE_SNIPPET = """
import time
from argpipe import BACKEND
from argpipe.engine import EngineConfig
from argpipe.pipeline import run_batch
from argpipe.synth import CorpusSpec, generate_bundle, generate_corpus
c = generate_corpus(CorpusSpec(num_files=8, sentences_per_file=300, vocab_size=1500, seed=1))
b = generate_bundle(c.dictionary, 200, 200, 1000, seed=1)
run_batch(c.files, b, engine_cfg=EngineConfig(1, 4))
t0 = time.perf_counter()
run = run_batch(c.files, b, engine_cfg=EngineConfig(1, 4))
print(BACKEND, time.perf_counter() - t0, len(run.links))
"""


def csr(rng, rows, nnz, dim):
    ptr = np.arange(rows + 1, dtype=np.int64) * nnz
    idx = np.concatenate([np.sort(rng.choice(dim, nnz, replace=False)) for _ in range(rows)]).astype(np.int64)
    return ptr, idx, rng.normal(size=rows * nnz)


def best_of(fn, reps):
    fn()  # compile / warm caches
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernels(sv_counts, rows, vocab, reps, seed):
    rng = np.random.default_rng(seed)
    impls = _kernels.implementations()
    if "numba" not in impls:
        print("numba unavailable, timing the numpy fallback only")
    xs = csr(rng, rows, 25, vocab)
    ev = csr(rng, rows, 25, vocab)
    ci = rng.integers(rows, size=rows).astype(np.int64)
    ei = rng.integers(rows, size=rows).astype(np.int64)
    print(f"{'svs':>7} {'kernel':>6} " + " ".join(f"{n:>10}" for n in impls) + "   speedup  max|diff|")
    for n_sv in sv_counts:
        sv = csr(rng, n_sv, 12, 2 * vocab)
        alpha = rng.normal(size=n_sv)
        for kind in ("rows", "pairs"):
            res, secs = {}, {}
            for name, (rows_fn, pairs_fn) in impls.items():
                out = np.empty(rows)
                if kind == "rows":
                    call = lambda: rows_fn(*sv, alpha, 0.1, *xs, out)  # noqa: E731
                else:
                    call = lambda: pairs_fn(*sv, alpha, 0.1, *xs, *ev, ci, ei, vocab, out)  # noqa: E731
                secs[name] = best_of(call, reps)
                res[name] = out.copy()
            diff = max(float(np.max(np.abs(res[a] - res["numpy"]))) for a in res)
            speed = secs["numpy"] / secs["numba"] if "numba" in secs else 1.0
            print(f"{n_sv:>7} {kind:>6} " + " ".join(f"{secs[k] * 1e3:>8.2f}ms" for k in impls)
                  + f"   {speed:6.1f}x  {diff:.1e}")


def pipeline():
    for disabled in ("0", "1"):
        env = dict(os.environ, ARGPIPE_DISABLE_NUMBA=disabled)
        out = subprocess.run([sys.executable, "-c", PIPELINE_SNIPPET], env=env, capture_output=True, text=True,
                             check=True)
        backend, secs, links = out.stdout.split()
        print(f"pipeline {backend:>6}: {float(secs):.2f}s, {links} links")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sv", default="1000,7085,30363", help="comma separated support-vector counts")
    p.add_argument("--rows", type=int, default=200)
    p.add_argument("--vocab", type=int, default=2000)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pipeline", action="store_true", help="also time a full batch run per backend")
    args = p.parse_args()
    kernels([int(s) for s in args.sv.split(",")], args.rows, args.vocab, args.reps, args.seed)
    if args.pipeline:
        pipeline()


if __name__ == "__main__":
    main()
