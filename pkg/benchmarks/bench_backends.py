"""Timing comparison of the compiled and pure-Python compute backends.

Runs the batched forward and backward kernels on identical inputs and
reports per-call wall time plus the speedup ratio.

Usage: python benchmarks/bench_backends.py [--batch 32] [--repeats 50]
"""
import argparse
import time

import numpy as np

from alignlab._backend import get_backend
from alignlab.model import ModelConfig, forward_batch, init_params


def time_backend(backend, params, images, repeats):
    cfg = params.config
    d_logit = np.ones(images.shape[0])
    d_aligned = np.ones((images.shape[0], cfg.n_tokens))

    # warm-up, and grab a cache for the backward timing
    _, _, _, cache = forward_batch(params, images, 0, backend)

    t0 = time.perf_counter()
    for _ in range(repeats):
        forward_batch(params, images, 0, backend)
    fwd = (time.perf_counter() - t0) / repeats

    t0 = time.perf_counter()
    for _ in range(repeats):
        backend.backward_batch(cache, d_logit, d_aligned)
    bwd = (time.perf_counter() - t0) / repeats
    return fwd, bwd


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    cfg = ModelConfig()
    params = init_params(cfg, seed=0)
    images = np.random.default_rng(0).random(
        (args.batch, cfg.image_size, cfg.image_size))

    results = {}
    for name in ("pure", "fast"):
        try:
            backend = get_backend(name)
        except ImportError:
            print(f"{name:>5}: unavailable (compiled extension not built)")
            continue
        fwd, bwd = time_backend(backend, params, images, args.repeats)
        results[name] = (fwd, bwd)
        print(f"{name:>5}: forward {fwd * 1e3:8.3f} ms   "
              f"backward {bwd * 1e3:8.3f} ms   (batch={args.batch})")

    if len(results) == 2:
        f_ratio = results["pure"][0] / results["fast"][0]
        b_ratio = results["pure"][1] / results["fast"][1]
        print(f"speedup (pure/fast): forward {f_ratio:.2f}x, "
              f"backward {b_ratio:.2f}x")


if __name__ == "__main__":
    main()
