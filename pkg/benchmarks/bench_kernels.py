#!/usr/bin/env python3
"""Benchmark the compiled convolution kernels against the NumPy fallback.

Times conv1d forward/backward at several shapes plus a full CNN-preset
forward+backward step, under every backend present in this build.

Usage: python3 benchmarks/bench_kernels.py [repeats]
"""

import sys
import time

import numpy as np

from shmrobust import autodiff as ad
from shmrobust import kernels, losses, nets


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(impl, rng, batch, cin, cout, length, kernel, repeats):
    x = rng.normal(size=(batch, cin, length)).astype(np.float32)
    w = rng.normal(size=(cout, cin, kernel)).astype(np.float32)
    gout = rng.normal(size=(batch, cout, length - kernel + 1)).astype(np.float32)
    return {
        "forward": _time(lambda: impl.conv1d_forward(x, w), repeats),
        "grad_input": _time(lambda: impl.conv1d_grad_input(gout, w, length), repeats),
        "grad_weight": _time(lambda: impl.conv1d_grad_weight(gout, x, kernel), repeats),
    }


def bench_cnn_step(rng, repeats):
    """Forward+backward of the CNN preset under the active backend."""
    net = nets.build_cnn((2, 128), 4, seed=0)
    x = rng.normal(size=(32, 2, 128)).astype(np.float32)
    labels = rng.integers(0, 4, size=32)

    def step():
        xt = ad.Tensor(x, requires_grad=True)
        tape = ad.Tape()
        with tape:
            loss = losses.cross_entropy(nets.forward_logits(net, xt), labels)
        ad.backward(tape, loss)
        net.zero_grad()

    return _time(step, repeats)


def main():
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 20
    rng = np.random.default_rng(0)
    impls = kernels.backends()
    print(f"backends available: {', '.join(impls)} (active: {kernels.BACKEND})")
    shapes = [
        (32, 2, 8, 128, 9),
        (64, 8, 16, 256, 9),
        (16, 4, 8, 1024, 17),
    ]
    print(f"\n{'shape (B,Cin,Cout,L,K)':28s} {'kernel':12s}" + "".join(f"{name:>12s}" for name in impls))
    for shape in shapes:
        rows = {name: bench_conv(impl, np.random.default_rng(0), *shape, repeats)
                for name, impl in impls.items()}
        for key in ("forward", "grad_input", "grad_weight"):
            cells = "".join(f"{rows[name][key] * 1e3:11.3f}m" for name in impls)
            print(f"{str(shape):28s} {key:12s}{cells}")

    print(f"\nCNN preset train step (batch 32), active backend [{kernels.BACKEND}]: "
          f"{bench_cnn_step(rng, max(3, repeats // 4)) * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
