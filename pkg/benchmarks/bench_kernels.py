"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--size 512] [--repeat 5]

Both paths are called directly, so the ``BAVT_NUMBA`` switch does not matter
here.  The numba functions are compiled once before timing.
"""
import argparse
import timeit

import numpy as np

from bavt import imgproc, kernels


def edt_input(size, rng):
    mask = rng.random((size, size)) < 0.05
    return np.ascontiguousarray(np.where(mask, np.int64(0), kernels.EDT_INF))


def clahe_input(size, rng):
    img = rng.beta(2, 5, size=(size, size))
    hists, counts = imgproc.clahe_histograms(img, 2.0, 8)
    maps = np.cumsum(hists, axis=2) / counts[..., None]
    rows = imgproc._blend_axis(*imgproc.tile_bounds(size, 8), size)
    cols = imgproc._blend_axis(*imgproc.tile_bounds(size, 8), size)
    return (imgproc.quantize(img), maps, *rows, *cols)


def bench(fn, args, repeat):
    fn(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    n = args.size

    def raster(fn):
        def run():
            mask = np.zeros((n, n), np.uint8)
            for r0, c0, r1, c1 in rng_segments:
                fn(mask, r0, c0, r1, c1, 2.0)
        return run

    rng_segments = rng.uniform(0, n - 1, size=(50, 4))
    cases = [
        ("edt rows", (kernels.edt_sq_rows_nb, kernels.edt_sq_rows_np), (edt_input(n, rng),)),
        ("clahe blend", (kernels.clahe_blend_nb, kernels.clahe_blend_np), clahe_input(n, rng)),
        ("rasterize x50", (raster(kernels.rasterize_segment_nb), raster(kernels.rasterize_segment_np)), ()),
    ]
    print(f"{n}x{n} input, best of {args.repeat}")
    print(f"{'kernel':<16}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (nb, npy), inputs in cases:
        t_nb = bench(nb, inputs, args.repeat)
        t_np = bench(npy, inputs, args.repeat)
        print(f"{name:<16}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
