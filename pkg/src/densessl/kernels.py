"""Numeric kernels for the detector trunk.

The 3x3 convolutions dominate training time, so they are JIT-compiled
with numba by default. Setting the environment variable
``DENSESSL_NO_NUMBA=1`` before import selects a pure-numpy fallback that
computes identical results (used for debugging and as a benchmark
reference; see benchmarks/bench_kernels.py).

All kernels work on float64 arrays in HWC layout:
    x: (H, W, Cin), w: (3, 3, Cin, Cout), b: (Cout,)
Convolutions are stride 1 with symmetric zero padding 1, so the output
spatial size equals the input's. Downsampling is done by 2x2 mean
pooling, which keeps the whole trunk exactly mirror-symmetric.
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("DENSESSL_NO_NUMBA", "") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------

def _conv3x3_forward_np(x, w, b):
    h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.zeros((h + 2, wd + 2, cin), dtype=x.dtype)
    xp[1:-1, 1:-1] = x
    y = np.empty((h, wd, cout), dtype=x.dtype)
    y[:] = b
    for di in range(3):
        for dj in range(3):
            y += xp[di:di + h, dj:dj + wd] @ w[di, dj]
    return y


def _conv3x3_backward_np(x, w, gy):
    h, wd, cin = x.shape
    gb = gy.sum(axis=(0, 1))
    xp = np.zeros((h + 2, wd + 2, cin), dtype=x.dtype)
    xp[1:-1, 1:-1] = x
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            patch = xp[di:di + h, dj:dj + wd]
            gw[di, dj] = np.tensordot(patch, gy, axes=([0, 1], [0, 1]))
            gxp[di:di + h, dj:dj + wd] += gy @ w[di, dj].T
    return gxp[1:-1, 1:-1], gw, gb


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if USE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _conv3x3_forward_nb(x, w, b):
        h, wd, cin = x.shape
        cout = w.shape[3]
        y = np.empty((h, wd, cout), dtype=x.dtype)
        for i in range(h):
            for j in range(wd):
                for co in range(cout):
                    acc = b[co]
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= wd:
                                continue
                            for ci in range(cin):
                                acc += x[ii, jj, ci] * w[di, dj, ci, co]
                    y[i, j, co] = acc
        return y

    @njit(cache=True)
    def _conv3x3_backward_nb(x, w, gy):
        h, wd, cin = x.shape
        cout = w.shape[3]
        gx = np.zeros_like(x)
        gw = np.zeros_like(w)
        gb = np.zeros(cout, dtype=x.dtype)
        for i in range(h):
            for j in range(wd):
                for co in range(cout):
                    g = gy[i, j, co]
                    gb[co] += g
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= wd:
                                continue
                            for ci in range(cin):
                                gw[di, dj, ci, co] += x[ii, jj, ci] * g
                                gx[ii, jj, ci] += w[di, dj, ci, co] * g
        return gx, gw, gb

    conv3x3_forward = _conv3x3_forward_nb
    conv3x3_backward = _conv3x3_backward_nb
else:
    conv3x3_forward = _conv3x3_forward_np
    conv3x3_backward = _conv3x3_backward_np


# ---------------------------------------------------------------------------
# pooling (cheap; numpy in both modes)
# ---------------------------------------------------------------------------

def avgpool2_forward(x):
    """2x2 mean pooling, stride 2. Spatial dims must be even."""
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def avgpool2_backward(gy, in_shape):
    """Gradient of avgpool2_forward: spread each output grad over its 2x2 window."""
    h, w, _ = in_shape
    gx = np.empty(in_shape, dtype=gy.dtype)
    gx.reshape(h // 2, 2, w // 2, 2, in_shape[2])[:] = (
        gy[:, None, :, None, :] * 0.25
    )
    return gx


def warmup():
    """Trigger JIT compilation so timing and training loops start hot."""
    x = np.zeros((4, 4, 2))
    w = np.zeros((3, 3, 2, 2))
    b = np.zeros(2)
    y = conv3x3_forward(x, w, b)
    conv3x3_backward(x, w, y)
