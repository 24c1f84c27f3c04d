"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--size 1024] [--repeat 5]

Outputs are checked for equality before timing, so a speedup is never
reported for a kernel that disagrees with its twin.
"""

import argparse
import time

import numpy as np

from adcds import kernels


def _cases(size: int, rng):
    img = rng.integers(0, 256, (size, size), dtype=np.uint8)
    blobs = rng.random((size, size)) < 0.3
    return {
        "box3_sum": (img,),
        "otsu_threshold": (img, 256),
        "label4": (blobs,),
        "majority_filter": (blobs, 2, 8),
        "rle_encode": (blobs,),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--size", type=int, default=1024)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if "numba" not in impls:
        print("numba unavailable; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    cases = _cases(args.size, rng)
    print(f"| kernel | numpy (ms) | numba (ms) | speedup |  ({args.size}^2)")
    print("|---|---|---|---|")
    for name, call_args in cases.items():
        ref = getattr(impls["numpy"], name)(*call_args)
        fast = getattr(impls["numba"], name)
        if not _same(ref, fast(*call_args)):  # also triggers compilation
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np = _best(getattr(impls["numpy"], name), call_args, args.repeat)
        t_nb = _best(fast, call_args, args.repeat)
        print(f"| {name} | {t_np:.2f} | {t_nb:.2f} | {t_np / t_nb:.1f}x |")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
