"""Grouped low-bit quantization with grouped low-rank adapters.

A ``D_in x D_out`` weight is split along its input rows into ``L`` contiguous
blocks of equal height. Every (block, column) segment gets its own scale ``a``
and offset ``b``::

    a = (max - min) / (2**N - 1),  b = min,  q = round((w - b) / a),  w_hat = a*q + b

Adapters share one row of ``A`` per block, so the update ``s * E @ A @ B`` is
constant inside each segment and can be folded into the offsets exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .model import Model, byte_tokenize, layer_names, loss_on_tape
from .train import AdamW, clip_grads, lr_at, random_batch


class QuantError(ValueError):
    pass


@dataclass
class QuantGroupedMatrix:
    """Packed codes plus per-(block, column) scale and offset.

    For N <= 4 codes are packed two per byte, column-major, each column padded
    to an even length, low nibble holding the even row. For N > 4 each code
    takes a byte, same order.
    """

    packed: np.ndarray
    shape: tuple[int, int]
    n_blocks: int
    bits: int
    scale: np.ndarray   # (L, D_out)
    offset: np.ndarray  # (L, D_out)
    _codes: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        d_in, d_out = self.shape
        if self.n_blocks <= 0 or d_in % self.n_blocks:
            raise QuantError(f"L={self.n_blocks} does not divide D_in={d_in}")
        if self.scale.shape != (self.n_blocks, d_out) or self.offset.shape != (self.n_blocks, d_out):
            raise QuantError("scale/offset must have shape (L, D_out)")

    @property
    def rows_per_block(self) -> int:
        return self.shape[0] // self.n_blocks

    @property
    def block_map(self) -> np.ndarray:
        return np.arange(self.shape[0]) // self.rows_per_block

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def codes(self) -> np.ndarray:
        if self._codes is None:
            d_in, d_out = self.shape
            if self.bits <= 4:
                self._codes = kernels.unpack_nibbles(self.packed, d_in, d_out)
            else:
                self._codes = np.ascontiguousarray(self.packed.reshape(d_out, d_in).T)
        return self._codes

    def copy(self) -> "QuantGroupedMatrix":
        return QuantGroupedMatrix(self.packed.copy(), self.shape, self.n_blocks, self.bits,
                                  self.scale.copy(), self.offset.copy())

    def as_array_for_hash(self) -> np.ndarray:
        meta = np.array([*self.shape, self.n_blocks, self.bits], dtype=np.int64)
        parts = [meta, self.packed, self.scale, self.offset]
        return np.concatenate([np.ascontiguousarray(p).reshape(-1).view(np.uint8) for p in parts])


def _pack(codes: np.ndarray, bits: int) -> np.ndarray:
    if bits <= 4:
        return kernels.pack_nibbles(np.ascontiguousarray(codes))
    return np.ascontiguousarray(codes.T).reshape(-1).copy()


def quantize_grouped(W: np.ndarray, L: int = 32, N: int = 4) -> QuantGroupedMatrix:
    W = np.asarray(W)
    if W.ndim != 2:
        raise QuantError("quantize_grouped expects a matrix")
    if not 2 <= N <= 8:
        raise QuantError("bits N must lie in [2, 8]")
    d_in, d_out = W.shape
    if L <= 0 or d_in % L:
        raise QuantError(f"L={L} does not divide D_in={d_in}")
    if not np.all(np.isfinite(W)):
        raise QuantError("weights must be finite")
    W = np.ascontiguousarray(W)
    if W.dtype not in (np.float32, np.float64):
        W = W.astype(np.float64)
    levels = (1 << N) - 1
    lo, hi = kernels.block_minmax(W, L)
    # scales and offsets are kept in f64 so merged offsets add no f32 rounding
    a = (hi.astype(np.float64) - lo.astype(np.float64)) / levels
    a[a == 0] = 1  # constant segment: any scale works, codes are all zero
    b = lo.astype(np.float64)
    codes = kernels.quantize_blocks(W, a, b, L, float(levels))
    q = QuantGroupedMatrix(_pack(codes, N), (d_in, d_out), L, N, a, b)
    q._codes = codes
    return q


def dequantize(Q: QuantGroupedMatrix) -> np.ndarray:
    codes = Q.codes
    if Q.bits < 8 and codes.size and int(codes.max()) > Q.levels:
        raise QuantError(f"code {int(codes.max())} out of range for N={Q.bits}")
    return kernels.dequantize_blocks(codes, Q.scale, Q.offset)


@dataclass
class AdapterPair:
    A: np.ndarray  # (L, D_int)
    B: np.ndarray  # (D_int, D_out)
    s: float

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise QuantError(f"adapter shapes {self.A.shape} and {self.B.shape} do not chain")
        if not self.s >= 0:
            raise QuantError("adapter scale s must be non-negative")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def copy(self) -> "AdapterPair":
        return AdapterPair(self.A.copy(), self.B.copy(), self.s)


def init_adapter(L: int, d_out: int, rank: int = 8, alpha: float = 16.0,
                 rng: np.random.Generator | None = None, dtype=np.float32) -> AdapterPair:
    """A = 0, B scaled uniform: the initial update is exactly zero."""
    rng = rng or np.random.default_rng(0)
    bound = 1.0 / math.sqrt(rank)
    B = rng.uniform(-bound, bound, size=(rank, d_out)).astype(dtype)
    return AdapterPair(np.zeros((L, rank), dtype=dtype), B, alpha / rank)


def block_indicator(d_in: int, L: int, dtype=np.float32) -> np.ndarray:
    """E with E[i, i // (d_in / L)] = 1."""
    if d_in % L:
        raise QuantError(f"L={L} does not divide D_in={d_in}")
    E = np.zeros((d_in, L), dtype=dtype)
    E[np.arange(d_in), np.arange(d_in) // (d_in // L)] = 1
    return E


def adapter_delta(adapters: AdapterPair, d_in: int) -> np.ndarray:
    """s * E @ A @ B, with rows repeated inside each block."""
    L = adapters.A.shape[0]
    if d_in % L:
        raise QuantError(f"adapter has {L} blocks, which does not divide D_in={d_in}")
    small = adapters.s * (adapters.A.astype(np.float64) @ adapters.B.astype(np.float64))
    return np.repeat(small, d_in // L, axis=0).astype(adapters.A.dtype)


def _block_sums(x: np.ndarray, L: int) -> np.ndarray:
    n, d_in = x.shape
    return x.reshape(n, L, d_in // L).sum(axis=2, dtype=np.float64)


def quantized_linear_forward(Q: QuantGroupedMatrix, adapters: AdapterPair | None, x) -> np.ndarray:
    """x @ (W_hat + delta) using the block kernel; W_hat is never built."""
    x = np.asarray(x)
    vec = x.ndim == 1
    X = np.ascontiguousarray(x[None, :] if vec else x.reshape(-1, x.shape[-1]))
    if X.shape[1] != Q.shape[0]:
        raise QuantError(f"input has {X.shape[1]} features, matrix expects {Q.shape[0]}")
    y = kernels.quant_matmul(X.astype(np.float64), Q.codes, Q.scale.astype(np.float64),
                             Q.offset.astype(np.float64))
    if adapters is not None:
        if adapters.A.shape[0] != Q.n_blocks or adapters.B.shape[1] != Q.shape[1]:
            raise QuantError("adapter block structure does not match the quantized matrix")
        y = y + adapters.s * (_block_sums(X, Q.n_blocks) @ adapters.A) @ adapters.B
    return y[0] if vec else y.reshape(*x.shape[:-1], Q.shape[1])


def merge_adapters(Q: QuantGroupedMatrix, adapters: AdapterPair) -> QuantGroupedMatrix:
    """Fold the adapter update into the offsets: b' = b + s * A @ B; codes and scales unchanged."""
    if adapters.A.shape[0] != Q.n_blocks or adapters.B.shape[1] != Q.shape[1]:
        raise QuantError("adapter block structure does not match the quantized matrix")
    out = Q.copy()
    out._codes = Q._codes
    if adapters.s == 0:
        return out
    delta = adapters.s * (adapters.A.astype(np.float64) @ adapters.B.astype(np.float64))
    out.offset = Q.offset + delta
    return out


def effective_blocks(d_in: int, L: int) -> int:
    """Smallest divisor of ``d_in`` that is >= ``L`` (``d_in`` itself when L >= d_in)."""
    if L >= d_in:
        return d_in
    for cand in range(L, d_in + 1):
        if d_in % cand == 0:
            return cand
    return d_in


class QuantLinear:
    """Frozen quantized base with an optional grouped adapter; drop-in model parameter."""

    def __init__(self, q: QuantGroupedMatrix, adapter: AdapterPair | None = None,
                 dtype=np.float32):
        self.q = q
        self.dtype = np.dtype(dtype)
        self.adapter = adapter
        self._dense: np.ndarray | None = None
        self._E: np.ndarray | None = None
        self._bound: tuple | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.q.shape

    def num_params(self) -> int:
        return self.q.shape[0] * self.q.shape[1] + (self.adapter.num_params if self.adapter else 0)

    def copy(self) -> "QuantLinear":
        return QuantLinear(self.q.copy(), self.adapter.copy() if self.adapter else None, self.dtype)

    def as_array_for_hash(self) -> np.ndarray:
        parts = [self.q.as_array_for_hash()]
        if self.adapter is not None:
            for arr in (self.adapter.A, self.adapter.B, np.array([self.adapter.s])):
                parts.append(np.ascontiguousarray(arr).reshape(-1).view(np.uint8))
        return np.concatenate(parts)

    def dense(self) -> np.ndarray:
        # dequantized once; the base is frozen
        if self._dense is None:
            self._dense = dequantize(self.q).astype(self.dtype)
        return self._dense

    def effective_weight(self) -> np.ndarray:
        W = self.dense()
        if self.adapter is None:
            return W
        return (W + adapter_delta(self.adapter, W.shape[0])).astype(W.dtype)

    def bind(self, tape: ad.Tape | None, name: str) -> None:
        if tape is None or self.adapter is None:
            self._bound = None
            return
        A = tape.param(name + ".adapter_A", self.adapter.A)
        B = tape.param(name + ".adapter_B", self.adapter.B)
        self._bound = (A, B)

    def apply(self, x) -> ad.Tensor:
        W = self.dense()
        base = ad.matmul(x, ad.Tensor(W))
        if self.adapter is None:
            return base
        if self._bound is not None:
            A, B = self._bound
        else:
            A, B = ad.Tensor(self.adapter.A), ad.Tensor(self.adapter.B)
        if self._E is None:
            self._E = block_indicator(W.shape[0], self.q.n_blocks, W.dtype)
        xe = ad.matmul(x, ad.Tensor(self._E))
        delta = ad.matmul(ad.matmul(xe, A), B)
        s = ad.Tensor(np.array(self.adapter.s, dtype=W.dtype))
        return ad.add(base, ad.mul(delta, s))


LINEAR_KEYS = ("q", "k", "v", "o", "gate", "up", "down")


def linear_names(model: Model) -> list[str]:
    cfg = model.config
    return [layer_names(cfg, l)[k] for l in range(cfg.n_layers) for k in LINEAR_KEYS]


@dataclass
class QuantConfig:
    L: int = 32
    N: int = 4
    rank: int = 8
    alpha: float = 16.0
    grouped: bool = True  # False: one block per row (dense low-rank adapter)
    seed: int = 0


def quantize_model(model: Model, qc: QuantConfig | None = None, adapters: bool = True) -> Model:
    """Replace every linear weight with a quantized base (plus a zero-delta adapter)."""
    qc = qc or QuantConfig()
    rng = np.random.default_rng(qc.seed)
    params = dict(model.params)
    for name in linear_names(model):
        W = params[name]
        if isinstance(W, QuantLinear):
            raise QuantError(f"{name} is already quantized")
        d_in, d_out = W.shape
        L = effective_blocks(d_in, qc.L) if qc.grouped else d_in
        q = quantize_grouped(W, L, qc.N)
        ad_pair = init_adapter(L, d_out, qc.rank, qc.alpha, rng, W.dtype) if adapters else None
        params[name] = QuantLinear(q, ad_pair, W.dtype)
    out = Model(model.config, params, dict(model.meta))
    out.meta["quant"] = {"L": qc.L, "N": qc.N, "rank": qc.rank, "alpha": qc.alpha,
                         "grouped": qc.grouped}
    return out


def merge_model(model: Model) -> Model:
    """Fold every adapter into its quantized base."""
    params = {}
    for name, val in model.params.items():
        if isinstance(val, QuantLinear) and val.adapter is not None:
            params[name] = QuantLinear(merge_adapters(val.q, val.adapter), dtype=val.dtype)
        else:
            params[name] = val
    return Model(model.config, params, dict(model.meta))


@dataclass
class RecoveryConfig:
    lr: float = 1e-4
    warmup: int = 1000
    batch_size: int = 128
    seq_len: int | None = None
    steps: int = 300
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.warmup < 0 or self.steps < 0:
            raise ValueError("recovery hyperparameters must be positive")


class RecoveryError(RuntimeError):
    pass


def finetune_recovery(model: Model, data, rc: RecoveryConfig | None = None) -> Model:
    """Train only the adapters of a quantized model; base codes never change.

    Returns a new model; the loss curve is in ``meta["recovery_losses"]``.
    """
    rc = rc or RecoveryConfig()
    out = Model(model.config, {k: (v.copy() if isinstance(v, (np.ndarray, QuantLinear)) else v)
                               for k, v in model.params.items()}, dict(model.meta))
    adapters = {n: v.adapter for n, v in out.params.items()
                if isinstance(v, QuantLinear) and v.adapter is not None}
    if not adapters:
        raise RecoveryError("model has no adapters to train")
    if rc.steps == 0:
        return out
    tokens = data if isinstance(data, np.ndarray) else byte_tokenize(data)
    seq = min(rc.seq_len or model.config.max_seq_len, model.config.max_seq_len)
    if len(tokens) < seq + 1:
        raise RecoveryError(f"recovery data has {len(tokens)} tokens, need at least {seq + 1}")
    train = {}
    for n, a in adapters.items():
        train[n + ".adapter_A"] = a.A
        train[n + ".adapter_B"] = a.B
    opt = AdamW(train, rc.lr, (0.9, 0.999), 1e-8, rc.weight_decay)
    rng = np.random.default_rng(rc.seed)
    losses = []
    for step in range(rc.steps):
        batch = random_batch(tokens, rc.batch_size, seq + 1, rng)
        with ad.Tape() as tape:
            loss = loss_on_tape(out, batch, tape, trainable=set())
        value = float(loss.data)
        if not math.isfinite(value):
            raise RecoveryError(f"recovery loss diverged at step {step}")
        grads = ad.backward(tape, loss)
        clip_grads(grads, rc.grad_clip)
        opt.step(grads, lr_at(step, rc.steps, rc.lr, rc.warmup, 0.0 if rc.warmup else 1.0))
        losses.append(value)
    out.meta["recovery_losses"] = losses
    return out
