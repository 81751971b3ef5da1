"""numba versions of the hot loops. Imported only when numba is available."""

import numpy as np
from numba import njit


@njit(cache=True)
def quantize_blocks(W, a, b, n_blocks, levels):
    d_in, d_out = W.shape
    rows = d_in // n_blocks
    codes = np.empty((d_in, d_out), dtype=np.uint8)
    for g in range(n_blocks):
        for c in range(d_out):
            ag = np.float64(a[g, c])
            bg = np.float64(b[g, c])
            for r in range(g * rows, (g + 1) * rows):
                q = np.rint((np.float64(W[r, c]) - bg) / ag)
                if q < 0.0:
                    q = 0.0
                elif q > levels:
                    q = levels
                codes[r, c] = np.uint8(q)
    return codes


@njit(cache=True)
def block_minmax(W, n_blocks):
    d_in, d_out = W.shape
    rows = d_in // n_blocks
    lo = np.empty((n_blocks, d_out), dtype=W.dtype)
    hi = np.empty((n_blocks, d_out), dtype=W.dtype)
    for g in range(n_blocks):
        r0 = g * rows
        for c in range(d_out):
            lo[g, c] = W[r0, c]
            hi[g, c] = W[r0, c]
        for r in range(r0 + 1, r0 + rows):
            for c in range(d_out):
                v = W[r, c]
                if v < lo[g, c]:
                    lo[g, c] = v
                if v > hi[g, c]:
                    hi[g, c] = v
    return lo, hi


@njit(cache=True)
def dequantize_blocks(codes, a, b):
    d_in, d_out = codes.shape
    n_blocks = a.shape[0]
    rows = d_in // n_blocks
    out = np.empty((d_in, d_out), dtype=a.dtype)
    for r in range(d_in):
        g = r // rows
        for c in range(d_out):
            out[r, c] = a[g, c] * codes[r, c] + b[g, c]
    return out


@njit(cache=True)
def pack_nibbles(codes):
    d_in, d_out = codes.shape
    half = (d_in + 1) // 2
    out = np.zeros(d_out * half, dtype=np.uint8)
    for c in range(d_out):
        for r in range(d_in):
            v = codes[r, c] & 0x0F
            k = c * half + r // 2
            if r % 2 == 0:
                out[k] |= v
            else:
                out[k] |= v << 4
    return out


@njit(cache=True)
def unpack_nibbles(packed, d_in, d_out):
    half = (d_in + 1) // 2
    codes = np.empty((d_in, d_out), dtype=np.uint8)
    for c in range(d_out):
        for r in range(d_in):
            byte = packed[c * half + r // 2]
            if r % 2 == 0:
                codes[r, c] = byte & 0x0F
            else:
                codes[r, c] = byte >> 4
    return codes


@njit(cache=True)
def quant_matmul(x, codes, a, b):
    n, d_in = x.shape
    d_out = codes.shape[1]
    n_blocks = a.shape[0]
    rows = d_in // n_blocks
    y = np.zeros((n, d_out), dtype=x.dtype)
    acc = np.empty(d_out, dtype=x.dtype)
    for i in range(n):
        for g in range(n_blocks):
            acc[:] = 0.0
            xs = 0.0
            for r in range(g * rows, (g + 1) * rows):
                xv = x[i, r]
                xs += xv
                for c in range(d_out):
                    acc[c] += xv * codes[r, c]
            for c in range(d_out):
                y[i, c] += acc[c] * a[g, c] + xs * b[g, c]
    return y


@njit(cache=True)
def bessel_variance(values):
    n, m = values.shape
    out = np.empty(m, dtype=np.float64)
    for j in range(m):
        s = 0.0
        for i in range(n):
            s += values[i, j]
        mean = s / n
        ss = 0.0
        for i in range(n):
            d = values[i, j] - mean
            ss += d * d
        out[j] = ss / (n - 1)
    return out


@njit(cache=True)
def _causal_softmax_2d(x, out):
    n, T = x.shape
    for row in range(n):
        i = row % T
        m = x[row, 0]
        for j in range(1, i + 1):
            if x[row, j] > m:
                m = x[row, j]
        s = 0.0
        for j in range(i + 1):
            e = np.exp(x[row, j] - m)
            out[row, j] = e
            s += e
        inv = 1.0 / s
        for j in range(i + 1):
            out[row, j] *= inv
        for j in range(i + 1, T):
            out[row, j] = 0.0


def causal_softmax(scores):
    T = scores.shape[-1]
    x = np.ascontiguousarray(scores).reshape(-1, T)
    out = np.empty_like(x)
    _causal_softmax_2d(x, out)
    return out.reshape(scores.shape)
