"""Pure-numpy reference kernels. Same signatures as the numba versions."""

import numpy as np


def quantize_blocks(W, a, b, n_blocks, levels):
    """Codes for ``W`` given per-(block, column) scale ``a`` and offset ``b``."""
    d_in, d_out = W.shape
    rows = d_in // n_blocks
    Wb = W.astype(np.float64).reshape(n_blocks, rows, d_out)
    q = np.rint((Wb - b.astype(np.float64)[:, None, :]) / a.astype(np.float64)[:, None, :])
    return np.clip(q, 0, levels).astype(np.uint8).reshape(d_in, d_out)


def block_minmax(W, n_blocks):
    d_in, d_out = W.shape
    Wb = W.reshape(n_blocks, d_in // n_blocks, d_out)
    return Wb.min(axis=1), Wb.max(axis=1)


def dequantize_blocks(codes, a, b):
    d_in, d_out = codes.shape
    n_blocks = a.shape[0]
    cb = codes.reshape(n_blocks, d_in // n_blocks, d_out).astype(a.dtype)
    return (cb * a[:, None, :] + b[:, None, :]).reshape(d_in, d_out)


def pack_nibbles(codes):
    # column-major; each column padded to an even count; low nibble = even row
    d_in, d_out = codes.shape
    half = (d_in + 1) // 2
    cm = np.zeros((d_out, 2 * half), dtype=np.uint8)
    cm[:, :d_in] = codes.T
    return ((cm[:, 0::2] & 0x0F) | ((cm[:, 1::2] & 0x0F) << 4)).reshape(-1)


def unpack_nibbles(packed, d_in, d_out):
    half = (d_in + 1) // 2
    p = packed.reshape(d_out, half)
    cm = np.empty((d_out, 2 * half), dtype=np.uint8)
    cm[:, 0::2] = p & 0x0F
    cm[:, 1::2] = p >> 4
    return np.ascontiguousarray(cm[:, :d_in].T)


def quant_matmul(x, codes, a, b):
    """x @ (a*q + b) per block without building the dense weight.

    For block g: x_g @ (a_g * q_g + b_g) = (x_g @ q_g) * a_g + sum(x_g) * b_g.
    """
    n, d_in = x.shape
    n_blocks = a.shape[0]
    rows = d_in // n_blocks
    xb = x.reshape(n, n_blocks, rows)
    qb = codes.reshape(n_blocks, rows, -1).astype(x.dtype)
    xq = np.einsum("ngr,grc->ngc", xb, qb)
    xs = xb.sum(axis=2)
    return np.einsum("ngc,gc->nc", xq, a) + xs @ b


def bessel_variance(values):
    """Column-wise variance with the 1/(D-1) correction (two-pass)."""
    mean = values.mean(axis=0)
    dev = values - mean
    return (dev * dev).sum(axis=0) / (values.shape[0] - 1)


def causal_softmax(scores):
    """Softmax over the last axis with keys after the query masked out."""
    T = scores.shape[-1]
    x = np.where(np.tri(T, dtype=bool), scores, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(scores.dtype)
