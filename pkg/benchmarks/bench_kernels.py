"""Time the numba kernels against their numpy twins on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both paths are called directly, so the ADLLAB_DISABLE_NUMBA flag does not
matter here. The first numba call (compilation or cache load) is excluded.
"""
import argparse
import timeit

import numpy as np

from adllab import kernels


def cases(rng):
    x = rng.normal(size=(32, 34, 34, 16))  # padded block-2 sized input
    cols = kernels._im2col_numpy(x, 3, 1, 32, 32)
    fm = rng.normal(size=(32, 32, 32, 16))
    pooled, arg = kernels._maxpool_numpy(fm)
    g = rng.normal(size=pooled.shape)
    heat = rng.random((32, 32))
    fg = heat > 0.55
    return {
        "im2col": (lambda f: f(x, 3, 1, 32, 32), "_im2col"),
        "col2im": (lambda f: f(cols, 34, 34, 1), "_col2im"),
        "maxpool2x2": (lambda f: f(fm), "_maxpool"),
        "maxpool2x2_backward": (lambda f: f(g, arg, 32, 32), "_maxpool_backward"),
        "label_components": (lambda f: f(fg), "_label"),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if kernels.numba is None:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for name, (call, stem) in cases(rng).items():
        f_np = getattr(kernels, stem + "_numpy")
        f_nb = getattr(kernels, stem + "_numba")
        same = all(np.array_equal(a, b) for a, b in zip(_as_tuple(call(f_np)), _as_tuple(call(f_nb))))
        t_np = min(timeit.repeat(lambda: call(f_np), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: call(f_nb), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x  {same}")


def _as_tuple(v):
    return v if isinstance(v, tuple) else (v,)


if __name__ == "__main__":
    main()
