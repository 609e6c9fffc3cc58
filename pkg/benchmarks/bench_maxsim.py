"""Compare the compiled MaxSim kernels with the numpy fallback.

    python3 benchmarks/bench_maxsim.py [--pages 500] [--dim 128] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from lingflow.retrieval import kernels


def make_corpus(rng, pages, rows, dim):
    mats = [rng.standard_normal((int(rng.integers(rows // 2, rows + 1)), dim)).astype(np.float32)
            for _ in range(pages)]
    offsets = np.zeros(pages + 1, dtype=np.int64)
    np.cumsum([m.shape[0] for m in mats], out=offsets[1:])
    return mats, np.ascontiguousarray(np.concatenate(mats)), offsets


def bench(label, fn, repeat):
    best = min(timeit.repeat(fn, number=1, repeat=repeat))
    print(f"  {label:<10} {best * 1e3:9.3f} ms")
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pages", type=int, default=500)
    ap.add_argument("--page-rows", type=int, default=64)
    ap.add_argument("--query-rows", type=int, default=16)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    mats, packed, offsets = make_corpus(rng, args.pages, args.page_rows, args.dim)
    q = rng.standard_normal((args.query_rows, args.dim)).astype(np.float32)
    backends = {"numpy": kernels.python_backend}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend
    else:
        print("compiled extension not available; timing the fallback only")

    print(f"{args.pages} pages x ~{args.page_rows} rows, query {args.query_rows} rows, dim {args.dim}")
    print("score whole index (packed):")
    packed_times = {}
    for name, mod in backends.items():
        packed_times[name] = bench(name, lambda m=mod: m.maxsim_packed(q, packed, offsets), args.repeat)
    print("page-by-page loop:")
    loop_times = {}
    for name, mod in backends.items():
        loop_times[name] = bench(name, lambda m=mod: [m.maxsim(q, p) for p in mats], args.repeat)

    if len(backends) == 2:
        ref = kernels.python_backend.maxsim_packed(q, packed, offsets)
        got = kernels.compiled_backend.maxsim_packed(q, packed, offsets)
        print(f"max |cython - numpy| = {np.max(np.abs(ref - got)):.2e}")
        print(f"speedup packed {packed_times['numpy'] / packed_times['cython']:.2f}x, "
              f"loop {loop_times['numpy'] / loop_times['cython']:.2f}x")


if __name__ == "__main__":
    main()
