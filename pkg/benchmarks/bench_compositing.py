"""Benchmark the compositing backends: Cython kernel vs pure-torch fallback.

Usage: python benchmarks/bench_compositing.py [--repeats 20] [--dtype float32]
"""

import argparse
import time

import torch

from ctrl3d import compositing


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench(n_rays, n_samples, dtype, repeats):
    gen = torch.Generator().manual_seed(0)
    sigma = torch.rand(n_rays, n_samples, generator=gen, dtype=dtype)
    colors = torch.rand(n_rays, n_samples, 3, generator=gen, dtype=dtype)
    depths = torch.sort(torch.rand(n_rays, n_samples, generator=gen, dtype=dtype), dim=-1).values

    rows = []
    for backend in ("ext", "torch"):
        if backend == "ext" and not compositing.HAS_EXTENSION:
            continue

        def forward():
            compositing.composite(colors, sigma, depths, backend=backend)

        sigma_grad = sigma.clone().requires_grad_(True)
        colors_grad = colors.clone().requires_grad_(True)

        def forward_backward():
            res = compositing.composite(colors_grad, sigma_grad, depths, backend=backend)
            loss = res.rgb.sum() + res.depth.sum()
            sigma_grad.grad = colors_grad.grad = None
            loss.backward()

        forward()  # warmup
        forward_backward()
        rows.append((backend, time_call(forward, repeats), time_call(forward_backward, repeats)))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = parser.parse_args()
    dtype = getattr(torch, args.dtype)

    print(f"extension built: {compositing.HAS_EXTENSION}; dtype {args.dtype}; "
          f"threads {torch.get_num_threads()}")
    header = f"{'rays':>8} {'samples':>7} {'backend':>7} {'fwd ms':>9} {'fwd+bwd ms':>11}"
    print(header)
    print("-" * len(header))
    for n_rays, n_samples in [(1024, 24), (4096, 24), (16384, 24), (4096, 96)]:
        for backend, fwd, fwdbwd in bench(n_rays, n_samples, dtype, args.repeats):
            print(f"{n_rays:>8} {n_samples:>7} {backend:>7} "
                  f"{fwd * 1e3:>9.3f} {fwdbwd * 1e3:>11.3f}")


if __name__ == "__main__":
    main()
