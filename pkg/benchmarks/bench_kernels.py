"""Compare the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Every kernel is run once per backend before timing so JIT compilation is not
counted. Outputs are checked for agreement before any number is printed.
"""

import argparse
import json
import statistics
import time

import numpy as np

from prunelab.kernels import NUMBA_AVAILABLE, get_backend


def cases(rng):
    W = rng.standard_normal((4096, 256)).astype(np.float32)
    L = 128
    lo, hi = get_backend("numpy").block_minmax(W, L)
    a = (hi.astype(np.float64) - lo) / 15.0
    b = lo.astype(np.float64)
    codes = get_backend("numpy").quantize_blocks(W, a, b, L, 15.0)
    packed = get_backend("numpy").pack_nibbles(codes)
    x = rng.standard_normal((16, 4096))
    scores = rng.standard_normal((8, 4, 128, 128)).astype(np.float32)
    values = rng.standard_normal((50, 2000))
    return {
        "block_minmax": (W, L),
        "quantize_blocks": (W, a, b, L, 15.0),
        "dequantize_blocks": (codes, a, b),
        "pack_nibbles": (codes,),
        "unpack_nibbles": (packed, 4096, 256),
        "quant_matmul": (x, codes, a, b),
        "bessel_variance": (values,),
        "causal_softmax": (scores,),
    }


def timeit(fn, args, repeat):
    fn(*args)
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        runs.append(time.perf_counter() - t0)
    return statistics.median(runs)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if a.dtype.kind in "ui":
        return np.array_equal(a, b)
    return np.allclose(a, b, rtol=1e-5, atol=1e-6)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write results here as well")
    args = ap.parse_args(argv)

    if not NUMBA_AVAILABLE:
        print("numba is not importable; nothing to compare")
        return 1
    npb, nbb = get_backend("numpy"), get_backend("numba")
    rows = []
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, kargs in cases(np.random.default_rng(args.seed)).items():
        ref, out = getattr(npb, name)(*kargs), getattr(nbb, name)(*kargs)
        if not _same(ref, out):
            raise SystemExit(f"{name}: backends disagree")
        t_np = timeit(getattr(npb, name), kargs, args.repeat)
        t_nb = timeit(getattr(nbb, name), kargs, args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb})
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.2f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
