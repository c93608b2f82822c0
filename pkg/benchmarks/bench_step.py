"""Timing for the hot paths: fused kernels vs naive formulations, and the
full training step per arm (the enhanced-activation overhead view).

Run: python3 benchmarks/bench_step.py
"""

import time

import numpy as np

from ltdr._alloc import tune_runtime
from ltdr.autodiff import Tensor, gelu
from ltdr.config import config_from_dict
from ltdr.data import generate_batch
from ltdr.moe import _topk_batch, select_topk
from ltdr.train import MoEModel, make_optimizer, train_step

GELU_C0, GELU_C1 = 0.7978845608028654, 0.044715


def best_of(f, repeats=5, number=200):
    f()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(number):
            f()
        best = min(best, (time.perf_counter() - t0) / number)
    return best * 1e6  # us


def naive_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C0 * (x + GELU_C1 * x**3)))


def bench_gelu():
    x = np.random.default_rng(0).standard_normal((320, 128))
    t = Tensor(x)
    fused = best_of(lambda: gelu(t))
    naive = best_of(lambda: naive_gelu(x))
    print(f"gelu 320x128      fused {fused:8.1f} us   naive {naive:8.1f} us   ({naive/fused:.1f}x)")


def bench_topk():
    rng = np.random.default_rng(1)
    probs = rng.random((320, 4))
    counts = np.full(320, 2, dtype=np.int64)
    counts[:40] = 4
    allowed = np.ones((320, 4), dtype=bool)
    batched = best_of(lambda: _topk_batch(probs, counts, allowed))
    per_row = best_of(
        lambda: [select_topk(probs[i], int(counts[i])) for i in range(320)], number=20
    )
    print(f"topk 320 rows     batched {batched:6.1f} us   per-row {per_row:8.1f} us   ({per_row/batched:.0f}x)")


def bench_steps():
    for arm in ("baseline", "DAR", "EEA", "LTDR"):
        cfg = config_from_dict({"arm": arm, "steps": 0})
        world = cfg.build_world()
        model = MoEModel.build(cfg, np.random.default_rng(0))
        opt = make_optimizer("adam", model.parameters(), 1e-3)
        batches = [generate_batch(world, 256, 64, rng=s) for s in range(20)]
        for b in batches[:3]:
            train_step(model, b, cfg, opt)
        t0 = time.perf_counter()
        n = 60
        for i in range(n):
            train_step(model, batches[i % 20], cfg, opt)
        per_step = (time.perf_counter() - t0) / n * 1000
        print(f"train_step {arm:9s} {per_step:6.2f} ms   (2000 steps ~ {per_step*2:.0f}s)")


if __name__ == "__main__":
    tune_runtime()
    print("== kernels ==")
    bench_gelu()
    bench_topk()
    print("== full step by arm (default world) ==")
    bench_steps()
