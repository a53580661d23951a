"""Time the compiled CRF kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py --length 40 --tags 17 --repeat 200
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from demoner import _kernels_py

try:
    from demoner import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def _case(rng, n, t):
    return rng.normal(size=(n, t)), rng.normal(size=(t + 2, t + 2))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=40)
    ap.add_argument("--tags", type=int, default=17)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    em, tr = _case(np.random.default_rng(args.seed), args.length, args.tags)
    backends = {"python": _kernels_py}
    if _compiled is not None:
        backends["compiled"] = _compiled
    else:
        print("compiled extension not available; timing the fallback only")

    print(f"n={args.length} tags={args.tags} repeat={args.repeat}")
    print(f"{'kernel':<13}" + "".join(f"{name:>14}" for name in backends) + ("   speedup" if len(backends) > 1 else ""))
    for kernel in ("forward", "expectations", "viterbi"):
        times = {}
        for name, mod in backends.items():
            fn = getattr(mod, kernel)
            times[name] = min(timeit.repeat(lambda: fn(em, tr), number=args.repeat, repeat=3)) / args.repeat
        line = f"{kernel:<13}" + "".join(f"{1e6 * t:>12.1f}us" for t in times.values())
        if len(times) > 1:
            line += f"   {times['python'] / times['compiled']:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
