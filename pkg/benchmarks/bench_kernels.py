"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from animsyn.kernels import _fallback

try:
    from animsyn.kernels import _core
except ImportError:
    _core = None


def cases(rng):
    H = W = 128
    caps = np.column_stack([rng.uniform(0, W, 12), rng.uniform(0, H, 12), rng.uniform(0, W, 12),
                            rng.uniform(0, H, 12), rng.uniform(2, 10, 12)])
    colors = rng.uniform(0, 1, (12, 3))

    def raster(mod):
        rgb = np.zeros((H, W, 3))
        normal = np.zeros((H, W, 3))
        label = np.zeros((H, W), dtype=np.int32)
        mod.rasterize_capsules(caps, colors, rgb, normal, label)

    img = rng.uniform(0, 1, (256, 256))
    x = np.arange(11) - 5.0
    kernel = np.exp(-x * x / (2 * 1.5 ** 2))
    kernel /= kernel.sum()
    frames = rng.uniform(0, 1, (16, 64, 64, 3))
    return {
        "rasterize_capsules 128x128, 12 capsules": raster,
        "gaussian_filter_valid 256x256, K=11": lambda m: m.gaussian_filter_valid(img, kernel),
        "color_histogram 16x64x64x3, 8 bins": lambda m: m.color_histogram(frames, 8),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':42s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=args.number, repeat=args.repeat))
        t_py = 1e3 * t_py / args.number
        if _core is None:
            print(f"{name:42s} {t_py:10.3f} {'n/a':>12s} {'n/a':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_core), number=args.number, repeat=args.repeat))
        t_c = 1e3 * t_c / args.number
        print(f"{name:42s} {t_py:10.3f} {t_c:12.3f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
