#!/usr/bin/env python3
"""Compare the compiled kernel extension against the numpy reference kernels.

Times the three hot kernels (conv3d, max-pool, trilinear resize) at shapes the
network actually runs, plus one full forward+backward training step per
backend.  Run from the repo root:

    python3 benchmarks/bench_kernels.py [--reps 5]
"""

import argparse
import os
import time

import numpy as np

import fabricseg.kernels as kernels


def best_of(fn, reps):
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


CONV_CASES = [
    # (label, input shape, weight shape, stride, dilation)
    ("encoder 48^3 8ch", (1, 8, 50, 50, 50), (8, 8, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ("encoder 24^3 16ch", (1, 16, 26, 26, 26), (16, 16, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ("fabric 12^3 16ch dil2", (1, 16, 16, 16, 16), (16, 16, 3, 3, 3), (1, 1, 1), (2, 2, 2)),
    ("full-scale 32^3 64ch", (1, 64, 34, 34, 34), (64, 64, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
]


def bench_conv(backend, reps):
    rows = []
    rng = np.random.default_rng(0)
    for label, xs, ws, stride, dil in CONV_CASES:
        xp = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        eff = tuple((k - 1) * d + 1 for k, d in zip(ws[2:], dil))
        outsp = tuple((n - e) // s + 1 for n, e, s in zip(xs[2:], eff, stride))
        g = rng.normal(size=(xs[0], ws[0]) + outsp).astype(np.float32)
        fwd = best_of(lambda: backend.conv3d_forward(xp, w, stride, dil, outsp), reps)
        bwd = best_of(lambda: (backend.conv3d_backward_data(g, w, stride, dil, xs),
                               backend.conv3d_backward_weights(g, xp, ws, stride, dil)),
                      reps)
        rows.append((label, fwd, bwd))
    return rows


def bench_pool_resize(backend, reps):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 16, 48, 48, 48)).astype(np.float32)
    out, idx = backend.maxpool_forward(x, 2)
    g = rng.normal(size=out.shape).astype(np.float32)
    pool_f = best_of(lambda: backend.maxpool_forward(x, 2), reps)
    pool_b = best_of(lambda: backend.maxpool_backward(g, idx, x.shape), reps)
    small = rng.normal(size=(1, 16, 24, 24, 24)).astype(np.float32)
    up = backend.resize_trilinear_forward(small, 2)
    gu = rng.normal(size=up.shape).astype(np.float32)
    up_f = best_of(lambda: backend.resize_trilinear_forward(small, 2), reps)
    up_b = best_of(lambda: backend.resize_trilinear_backward(gu, 2, small.shape[2:]), reps)
    return [("maxpool 48^3 fwd", pool_f), ("maxpool 48^3 bwd", pool_b),
            ("resize x2 24->48 fwd", up_f), ("resize x2 24->48 bwd", up_b)]


def bench_training_step(reps):
    """Full network fwd+bwd step per backend (run in subprocesses so the
    backend selection happens at import)."""
    import subprocess
    import sys

    code = r"""
import numpy as np, time
from fabricseg.network import NetworkConfig, build
from fabricseg.fabric import FabricConfig
from fabricseg.tensor import Tensor5, GradTape, cross_entropy
from fabricseg.data import one_hot_labels
import fabricseg.kernels as K

cfg = NetworkConfig(in_channels=1, encoder_channels=(8, 16),
                    fabric=FabricConfig(width=2, depth=2, channels=16),
                    num_classes=3, dropout_rate=0.0)
net = build(cfg, seed=0)
rng = np.random.default_rng(0)
x = Tensor5(rng.normal(size=(1, 1, 40, 40, 40)).astype(np.float32))
t = Tensor5(one_hot_labels(rng.integers(0, 3, size=(40, 40, 40)), 3))
best = float("inf")
for _ in range(%d):
    t0 = time.perf_counter()
    net.zero_grads()
    with GradTape() as tape:
        loss = cross_entropy(net.forward(x, training=True, rng=rng), t)
    tape.backward(loss)
    best = min(best, time.perf_counter() - t0)
print(f"{K.backend_name} {best:.3f}")
""" % reps
    results = {}
    for backend in ("reference", "compiled"):
        env = dict(os.environ, FABRICSEG_KERNELS=backend)
        try:
            out = subprocess.run([sys.executable, "-c", code], env=env,
                                 capture_output=True, text=True, check=True)
            name, secs = out.stdout.split()
            results[name] = float(secs)
        except subprocess.CalledProcessError as e:
            results[backend] = None
            print(f"  ({backend} step benchmark failed: {e.stderr.strip()[:200]})")
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=5)
    args = parser.parse_args()

    if kernels.compiled is None:
        print("compiled extension not built; only the reference backend is available")
        print("build it with: pip install -e .  (or python3 setup.py build_ext --inplace)")
        return

    print(f"active backend at import: {kernels.backend_name}\n")
    print("conv3d (best of %d)" % args.reps)
    print(f"{'case':26s} {'ref fwd':>10s} {'fast fwd':>10s} {'ratio':>6s} "
          f"{'ref bwd':>10s} {'fast bwd':>10s} {'ratio':>6s}")
    ref_rows = bench_conv(kernels.reference, args.reps)
    fast_rows = bench_conv(kernels.compiled, args.reps)
    for (label, rf, rb), (_, ff, fb) in zip(ref_rows, fast_rows):
        print(f"{label:26s} {rf * 1e3:8.1f}ms {ff * 1e3:8.1f}ms {rf / ff:5.1f}x "
              f"{rb * 1e3:8.1f}ms {fb * 1e3:8.1f}ms {rb / fb:5.1f}x")

    print("\npool / resize")
    ref_pr = bench_pool_resize(kernels.reference, args.reps)
    fast_pr = bench_pool_resize(kernels.compiled, args.reps)
    for (label, rv), (_, fv) in zip(ref_pr, fast_pr):
        print(f"{label:26s} {rv * 1e3:8.1f}ms {fv * 1e3:8.1f}ms {rv / fv:5.1f}x")

    print("\nfull training step (40^3 volume, small config)")
    step = bench_training_step(max(2, args.reps // 2))
    for name in ("reference", "compiled"):
        if step.get(name) is not None:
            print(f"{name:26s} {step[name] * 1e3:8.1f}ms")
    if step.get("reference") and step.get("compiled"):
        print(f"{'speedup':26s} {step['reference'] / step['compiled']:7.2f}x")


if __name__ == "__main__":
    main()
