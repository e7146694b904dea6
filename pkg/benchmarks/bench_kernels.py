"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes match the shipped benchmark: 5-way episodes with 10 queries per
class, 128-wide embeddings, and parameter blocks of 128x128. Each kernel is
warmed up once (so numba compilation is excluded) and then timed with
``timeit``; the table reports the best per-call time.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from modpool import _kernels as K


def cases(rng: np.random.Generator):
    f32 = np.float32
    q = rng.standard_normal((50, 128)).astype(f32)
    p = rng.standard_normal((5, 128)).astype(f32)
    g = rng.standard_normal((50, 5)).astype(f32)
    h = rng.standard_normal((75, 128)).astype(f32)
    y, inv = K.NUMPY_KERNELS["layernorm"](h, 1e-5)
    logits = rng.standard_normal((50, 5)).astype(f32)
    ls = K.NUMPY_KERNELS["log_softmax"](logits)
    w = rng.standard_normal((128, 128)).astype(f32)
    gw = rng.standard_normal((128, 128)).astype(f32)

    def adam_args():
        return (w.copy(), gw, np.zeros_like(w), np.zeros_like(w), 1e-3, 0.9, 0.999, 1e-8, 1)

    return {
        "sqdist": (q, p),
        "sqdist_grad": (g, q, p),
        "layernorm": (h, 1e-5),
        "layernorm_grad": (h, y, inv),
        "log_softmax": (logits,),
        "log_softmax_grad": (logits, ls),
        "adam_update": adam_args(),
    }


def best_time(func, args, repeat: int, number: int) -> float:
    func(*args)  # warm-up, triggers jit compilation
    return min(timeit.repeat(lambda: func(*args), repeat=repeat, number=number)) / number


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=200)
    args = parser.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    table = cases(np.random.default_rng(0))
    print(f"{'kernel':<18}{'numpy (us)':>12}{'numba (us)':>12}{'speed-up':>10}")
    for name, kargs in table.items():
        t_np = best_time(K.NUMPY_KERNELS[name], kargs, args.repeat, args.number)
        t_nb = best_time(K.NUMBA_KERNELS[name], kargs, args.repeat, args.number)
        print(f"{name:<18}{1e6 * t_np:>12.2f}{1e6 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
    print(f"active backend: {K.BACKEND}")


if __name__ == "__main__":
    main()
