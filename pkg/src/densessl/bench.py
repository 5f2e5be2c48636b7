"""Benchmark the JIT conv kernels against the pure-numpy fallback.

Run via ``densessl bench`` or ``python benchmarks/bench_kernels.py``.
Training selects between the two implementations with
the DENSESSL_NO_NUMBA environment variable; this script times both in one
process.
"""

import time

import numpy as np

from densessl import kernels


def _time(fn, *args, repeat=30):
    fn(*args)  # warm up / trigger compilation
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmark():
    if not kernels.USE_NUMBA:
        print("DENSESSL_NO_NUMBA is set; only the numpy path is available.")
        return
    rng = np.random.default_rng(0)
    cases = [
        ("conv 32x32  3->16", (32, 32, 3, 16)),
        ("conv 16x16 16->16", (16, 16, 16, 16)),
        ("conv  8x8  16->16", (8, 8, 16, 16)),
    ]
    print(f"{'case':<22}{'numba fwd':>12}{'numpy fwd':>12}"
          f"{'numba bwd':>12}{'numpy bwd':>12}")
    for name, (h, w, cin, cout) in cases:
        x = rng.standard_normal((h, w, cin))
        wgt = rng.standard_normal((3, 3, cin, cout))
        b = rng.standard_normal(cout)
        gy = rng.standard_normal((h, w, cout))

        y_nb = kernels.conv3x3_forward(x, wgt, b)
        y_np = kernels._conv3x3_forward_np(x, wgt, b)
        np.testing.assert_allclose(y_nb, y_np, rtol=1e-12, atol=1e-12)
        g_nb = kernels.conv3x3_backward(x, wgt, gy)
        g_np = kernels._conv3x3_backward_np(x, wgt, gy)
        for a, c in zip(g_nb, g_np):
            np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)

        t_fwd_nb = _time(kernels.conv3x3_forward, x, wgt, b)
        t_fwd_np = _time(kernels._conv3x3_forward_np, x, wgt, b)
        t_bwd_nb = _time(kernels.conv3x3_backward, x, wgt, gy)
        t_bwd_np = _time(kernels._conv3x3_backward_np, x, wgt, gy)
        print(f"{name:<22}{t_fwd_nb * 1e6:>10.1f}us{t_fwd_np * 1e6:>10.1f}us"
              f"{t_bwd_nb * 1e6:>10.1f}us{t_bwd_np * 1e6:>10.1f}us")


if __name__ == "__main__":
    run_benchmark()
