"""Benchmark the convolution kernels: compiled extension vs NumPy fallback.

Shapes mirror the training hot path (32x32 single-channel images through a
base-32 U-Net).  Also runs one end-to-end forward+backward step of the
default network under the active backend.
"""
from __future__ import annotations

import time

import numpy as np

from . import _kernels

SHAPES = [
    # (label, N, C, H, OC, k, stride, pad)
    ("stem 2->32 @32", 8, 2, 32, 32, 3, 1, 1),
    ("block 32->32 @32", 8, 32, 32, 32, 3, 1, 1),
    ("down 32->64 @32", 8, 32, 32, 64, 3, 2, 1),
    ("block 64->64 @16", 8, 64, 16, 64, 3, 1, 1),
    ("block 64->64 @8", 8, 64, 8, 64, 3, 1, 1),
    ("decoder 128->64 @16", 8, 128, 16, 64, 3, 1, 1),
]


def _time(fn, repeats):
    fn()  # warm up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(impl, repeats=5):
    rng = np.random.default_rng(0)
    rows = []
    for label, n, c, h, oc, k, stride, pad in SHAPES:
        x = rng.standard_normal((n, c, h, h)).astype(np.float32)
        w = rng.standard_normal((oc, c, k, k)).astype(np.float32)
        y = impl.conv2d_forward(x, w, stride, pad)
        gy = rng.standard_normal(y.shape).astype(np.float32)
        t_fwd = _time(lambda: impl.conv2d_forward(x, w, stride, pad), repeats)
        t_gi = _time(lambda: impl.conv2d_grad_input(gy, w, stride, pad, h, h), repeats)
        t_gw = _time(lambda: impl.conv2d_grad_weight(gy, x, stride, pad, k, k), repeats)
        rows.append((label, t_fwd, t_gi, t_gw))
    return rows


def bench_train_step(repeats=3):
    from . import gate as G
    from . import schedule as S
    from . import train as TR
    from .data import DatasetSpec, make_dataset
    from .network import NetConfig

    samples, _ = make_dataset(DatasetSpec(count=8, image_size=32, seed=0))
    cfg = TR.TrainConfig(steps=1, batch=4, net=NetConfig(), gate=G.GateConfig())
    net = TR.build_network(cfg.net, seed=0)
    opt = TR.AdamOptimizer(net.params, cfg.lr)
    sched = cfg.schedule()
    rng = np.random.default_rng(0)

    def one():
        TR.train_step(net, samples[:4], sched, cfg, opt, rng)

    return _time(one, repeats)


def run_benchmark(repeats: int = 5):
    impls = _kernels.implementations()
    print(f"active backend: {_kernels.BACKEND}")
    print(f"available: {', '.join(impls)}\n")
    results = {name: bench_backend(impl, repeats) for name, impl in impls.items()}
    header = f"{'conv shape':24s}" + "".join(f"{name + ' fwd/gi/gw (ms)':>28s}" for name in results)
    print(header)
    for i, (label, *_rest) in enumerate(results[next(iter(results))]):
        row = f"{label:24s}"
        for name in results:
            _, tf, tgi, tgw = results[name][i]
            row += f"{tf * 1e3:8.3f}/{tgi * 1e3:7.3f}/{tgw * 1e3:7.3f}    "
        print(row)
    if len(results) == 2:
        a, b = results["compiled"], results["numpy"]
        tot_a = sum(tf + tgi + tgw for _, tf, tgi, tgw in a)
        tot_b = sum(tf + tgi + tgw for _, tf, tgi, tgw in b)
        print(f"\ntotal compiled {tot_a * 1e3:.2f} ms vs numpy {tot_b * 1e3:.2f} ms "
              f"({tot_b / tot_a:.2f}x)")
    t_step = bench_train_step()
    print(f"\nfull train step (batch 4, default net, {_kernels.BACKEND} backend): {t_step * 1e3:.1f} ms")


if __name__ == "__main__":
    run_benchmark()
