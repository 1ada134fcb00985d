"""Compiled vs. numpy patch kernels on the default model's conv shapes.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per (shape, op) with the best-of-N time for each backend and
the speedup, then a whole training step under each backend.
"""

import argparse
import timeit

import numpy as np

from lgfd.config import RunConfig
from lgfd.data import generate_dataset, make_batches
from lgfd.model import LGFDModel
from lgfd.tensor import kernels
from lgfd.trainer import compute_losses

# (label, B, C, H, W, k, stride, pad) for 3x3 convs in the default model
SHAPES = [
    ("block1 64->32", 16, 1, 64, 64, 3, 2, 1),
    ("block2 32->16", 16, 16, 32, 32, 3, 2, 1),
    ("block3 16->8", 16, 32, 16, 16, 3, 2, 1),
    ("fpn P3 smooth", 16, 64, 16, 16, 3, 1, 1),
    ("head P3 conv", 16, 32, 16, 16, 3, 1, 1),
]


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_shapes(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, B, C, H, W, k, s, p in SHAPES:
        x = rng.normal(size=(B, C, H, W))
        oh, ow = (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1
        hp, wp = H + 2 * p, W + 2 * p
        cols = rng.normal(size=(B, C, k, k, oh, ow))
        times = {}
        for name in kernels.available_backends():
            kernels.use_backend(name)
            xp = kernels.pad2d(x, p)
            times[name] = {
                "pad2d": best(lambda: kernels.pad2d(x, p), repeat),
                "im2col": best(lambda: kernels.im2col(xp, k, s, oh, ow), repeat),
                "col2im": best(lambda: kernels.col2im(cols, hp, wp, s), repeat),
            }
        for op in ("pad2d", "im2col", "col2im"):
            rows.append((label, op, {n: t[op] for n, t in times.items()}))
    return rows


def bench_step(repeat):
    cfg = RunConfig()
    model = LGFDModel(cfg.model, seed=0)
    data = generate_dataset(cfg.data.scene_spec(cfg.model.image_size), 16)
    batch = next(make_batches(data, 16, 0, 0, train=True, encoder=model.encoder))

    def step():
        compute_losses(model, batch).total.backward()
        for prm in model.parameters():
            prm.grad = None

    out = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        step()
        out[name] = best(step, repeat)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels not built; only the numpy fallback is timed")
    start = kernels.backend_name()

    print(f"{'shape':<16}{'op':<8}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for label, op, t in bench_shapes(args.repeat):
        line = f"{label:<16}{op:<8}" + "".join(f"{1e3 * t[b]:>14.3f}" for b in backends)
        if "compiled" in t:
            line += f"{t['python'] / t['compiled']:>9.1f}x"
        print(line)

    step = bench_step(max(2, args.repeat // 2))
    line = f"{'train step':<16}{'b=16':<8}" + "".join(f"{1e3 * step[b]:>14.1f}" for b in backends)
    if "compiled" in step:
        line += f"{step['python'] / step['compiled']:>9.2f}x"
    print(line)
    kernels.use_backend(start)


if __name__ == "__main__":
    main()
