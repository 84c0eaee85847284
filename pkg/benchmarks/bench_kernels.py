"""Compare the compiled kernels with the numpy fallback.

Run ``python3 benchmarks/bench_kernels.py [--repeat N]``.  Inputs mirror the sizes a
T=100 sweep produces: grid laws of a few thousand bins convolved with block laws of
~100 atoms, and batches of Feinstein decoding for the T=8, M=(4,3,2) tree.
"""

import argparse
import timeit

import numpy as np

from emsbrq import _pykernels

try:
    from emsbrq import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    law = rng.random(20_000)
    idx = np.sort(rng.choice(8_000, 101, replace=False)).astype(np.int64)
    w = rng.random(101)
    mass = rng.random(50_000)
    M = np.array([4, 3, 2])
    pc = np.cumprod(M).astype(np.int64)
    starts = np.concatenate(([0], np.cumsum(pc)[:-1])).astype(np.int64)
    codes = rng.integers(0, 256, size=(4096, int(pc.sum())), dtype=np.uint32)
    y = rng.integers(0, 256, size=(4096, 3), dtype=np.uint32)
    table = rng.normal(size=(3, 9))
    return {
        "scatter_convolve": lambda m: m.scatter_convolve(law, idx, w, law.size + 8_000),
        "suffix_discount": lambda m: m.suffix_discount(mass, 0.99),
        "feinstein_batch": lambda m: m.feinstein_batch(codes, y, starts, pc, table, 3.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':<18}" + "".join(f"{name:>14}" for name, _ in backends) + "   speedup")
    for kernel, fn in cases(rng).items():
        outs = [fn(mod) for _, mod in backends]
        if len(outs) == 2 and not np.allclose(outs[0], outs[1], rtol=1e-12, atol=0):
            raise SystemExit(f"{kernel}: backends disagree")
        times = []
        for _, mod in backends:
            n, _ = timeit.Timer(lambda: fn(mod)).autorange()
            times.append(min(timeit.repeat(lambda: fn(mod), number=n, repeat=args.repeat)) / n)
        speed = f"{times[0] / times[1]:9.1f}x" if len(times) == 2 else "       n/a"
        print(f"{kernel:<18}" + "".join(f"{t * 1e3:11.3f} ms" for t in times) + speed)
    if _ckernels is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
