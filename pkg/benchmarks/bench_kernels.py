"""Benchmark the compiled kernels against the numpy fallback.

Runs every kernel on representative shapes with both implementations,
reports wall times and the largest output difference. Integer outputs
must match exactly; floating-point outputs agree to rounding noise.

Usage:
    python3 benchmarks/bench_kernels.py [--rows N] [--repeats R]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from nmoe import kernels


def best_of(fn, repeats: int) -> float:
    fn()  # warm-up; first numba call pays the compile
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_case(name: str, np_fn, nb_fn, args: tuple, repeats: int,
               integer: bool = False) -> dict:
    np_out = np_fn(*args)
    nb_out = nb_fn(*args)
    if integer:
        agreement = 0.0 if np.array_equal(np_out, nb_out) else np.inf
    else:
        agreement = float(np.max(np.abs(np.asarray(np_out, dtype=np.float64)
                                        - np.asarray(nb_out,
                                                     dtype=np.float64))))
    return {
        "kernel": name,
        "numpy_s": best_of(lambda: np_fn(*args), repeats),
        "numba_s": best_of(lambda: nb_fn(*args), repeats),
        "max_diff": agreement,
    }


def build_cases(rows: int, rng: np.random.Generator) -> list[tuple]:
    latent, classes, experts, k = 32, 10, 10, 2
    x = rng.normal(size=(rows, latent))
    w = rng.normal(size=(latent, classes))
    b = rng.normal(size=classes)
    out = kernels._dense_forward_np(x, w, b, kernels.ACT_TANH)
    dout = rng.normal(size=out.shape)
    logits = rng.normal(size=(rows, experts))
    idx = kernels._topk_indices_np(logits, k)
    weights = rng.random(size=idx.shape)
    all_logits = rng.normal(size=(experts, rows, classes))
    return [
        ("dense_forward(tanh)", kernels._dense_forward_np,
         kernels._dense_forward_nb, (x, w, b, kernels.ACT_TANH), False),
        ("dense_forward(relu)", kernels._dense_forward_np,
         kernels._dense_forward_nb, (x, w, b, kernels.ACT_RELU), False),
        ("dense_backward(tanh)", kernels._dense_backward_np,
         kernels._dense_backward_nb, (x, w, out, dout, kernels.ACT_TANH),
         False),
        ("softmax_rows", kernels._softmax_rows_np,
         kernels._softmax_rows_nb, (logits,), False),
        ("topk_indices(k=2)", kernels._topk_indices_np,
         kernels._topk_indices_nb, (logits, k), True),
        ("combine_topk", kernels._combine_topk_np,
         kernels._combine_topk_nb, (all_logits, idx, weights), False),
    ]


def bench_dense_backward_tuple(np_fn, nb_fn, args, repeats):
    """dense_backward returns three arrays; compare them part by part."""
    np_out = np_fn(*args)
    nb_out = nb_fn(*args)
    diff = max(float(np.max(np.abs(a - b)))
               for a, b in zip(np_out, nb_out))
    return {
        "kernel": "dense_backward(tanh)",
        "numpy_s": best_of(lambda: np_fn(*args), repeats),
        "numba_s": best_of(lambda: nb_fn(*args), repeats),
        "max_diff": diff,
    }


def main() -> int:
    parser = argparse.ArgumentParser(
        description="Compare the compiled kernels with the numpy fallback.")
    parser.add_argument("--rows", type=int, default=4096,
                        help="batch rows per kernel call (default 4096)")
    parser.add_argument("--repeats", type=int, default=20,
                        help="timed repetitions, best run counts")
    args = parser.parse_args()

    if not kernels.NUMBA_AVAILABLE:
        print("numba is not importable; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    results = []
    for name, np_fn, nb_fn, fn_args, integer in build_cases(args.rows, rng):
        if name.startswith("dense_backward"):
            results.append(bench_dense_backward_tuple(np_fn, nb_fn, fn_args,
                                                      args.repeats))
        else:
            results.append(bench_case(name, np_fn, nb_fn, fn_args,
                                      args.repeats, integer))

    print(f"rows={args.rows} repeats={args.repeats} (best run)")
    header = f"{'kernel':<22} {'numpy':>10} {'numba':>10} " \
             f"{'speedup':>8} {'max |diff|':>11}"
    print(header)
    print("-" * len(header))
    for r in results:
        speedup = r["numpy_s"] / r["numba_s"] if r["numba_s"] > 0 else np.inf
        print(f"{r['kernel']:<22} {r['numpy_s'] * 1e3:>9.3f}ms "
              f"{r['numba_s'] * 1e3:>9.3f}ms {speedup:>7.2f}x "
              f"{r['max_diff']:>11.3e}")
    worst = max(r["max_diff"] for r in results)
    print(f"\nlargest disagreement across kernels: {worst:.3e}")
    return 0 if worst < 1e-9 else 2


if __name__ == "__main__":
    raise SystemExit(main())
