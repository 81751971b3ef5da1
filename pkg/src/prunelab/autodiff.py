"""Tape-based reverse-mode autodiff over numpy arrays.

Only what the decoder needs is here. Every primitive records a node on the
active :class:`Tape` when at least one input is tracked; otherwise it is a
plain numpy computation with no bookkeeping (inference path).

Adjoint rules are written next to each primitive.  ``g`` denotes the upstream
gradient dL/dy of the primitive's output ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


_ACTIVE: list["Tape"] = []


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...]
    dtype: np.dtype


@dataclass
class Tape:
    """Ordered op records plus a parameter registry (name -> node id)."""

    nodes: list[_Node] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _push(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value: np.ndarray) -> "Tensor":
        if name in self.params:
            raise AutodiffError(f"parameter {name!r} registered twice")
        arr = np.asarray(value)
        nid = self._push(_Node("param", (), None, arr.shape, arr.dtype))
        self.params[name] = nid
        return Tensor(arr, self, nid)

    def leaf(self, value: np.ndarray) -> "Tensor":
        """Tracked input that is not a named parameter (used by gradient checks)."""
        arr = np.asarray(value)
        nid = self._push(_Node("leaf", (), None, arr.shape, arr.dtype))
        return Tensor(arr, self, nid)


class Tensor:
    """Immutable array, optionally bound to a node on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64) and arr.dtype.kind == "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # sugar used by tests and small experiments
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tapes = {id(t.tape): t.tape for t in inputs if t.tracked}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise AutodiffError(f"{op}: inputs live on different tapes")
    tape = next(iter(tapes.values()))
    # untracked inputs are constants: mark with -1 so backward skips them
    parents = tuple(t.node if t.tracked else -1 for t in inputs)
    nid = tape._push(_Node(op, parents, vjp, out.shape, out.dtype))
    return Tensor(out, tape, nid)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (leading dims and size-1 dims)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_rowwise(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # allowed: identical shapes, scalar, or b matching a's trailing axes
    # (bias vector, or a per-position table repeated over the batch)
    if a.shape == b.shape or b.ndim == 0:
        return
    if 1 <= b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    # y = a @ b ; ga = g @ b^T ; gb = a^T @ g (summed over batch dims if b is 2-D)
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul: need >=2-D operands, got {A.shape} and {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {A.shape} @ {B.shape}")
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {A.shape} @ {B.shape}")
    out = np.matmul(A, B)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(B, -1, -2))
        if B.ndim == 2:
            gb = np.matmul(A.reshape(-1, A.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        else:
            gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def add(a, b) -> Tensor:
    # y = a + b ; ga = g ; gb = g summed to b's shape (bias-add)
    a, b = as_tensor(a), as_tensor(b)
    _check_rowwise(a.data, b.data, "add")
    out = a.data + b.data
    bshape = b.shape
    return _record("add", out, (a, b), lambda g: (g, _unbroadcast(g, bshape)))


def mul(a, b) -> Tensor:
    # y = a * b ; ga = g * b ; gb = g * a (summed to b's shape when row-wise)
    a, b = as_tensor(a), as_tensor(b)
    _check_rowwise(a.data, b.data, "mul")
    A, B = a.data, b.data
    out = A * B
    return _record("mul", out, (a, b), lambda g: (g * B, _unbroadcast(g * A, B.shape)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(x, kind: str = "silu") -> Tensor:
    x = as_tensor(x)
    X = x.data
    if kind == "silu":
        # y = x*s(x) ; gx = g * (s + x*s*(1-s))
        s = _sigmoid(X)
        out = X * s
        dydx = s * (1.0 + X * (1.0 - s))
    elif kind == "gelu":
        # tanh approximation; gx = g * d/dx [0.5 x (1 + tanh(u))], u = c (x + 0.044715 x^3)
        c = math.sqrt(2.0 / math.pi)
        u = c * (X + 0.044715 * X**3)
        t = np.tanh(u)
        out = 0.5 * X * (1.0 + t)
        dydx = 0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * X**2)
    elif kind == "relu":
        # gx = g * [x > 0]
        out = np.maximum(X, 0)
        dydx = (X > 0).astype(X.dtype)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    out = out.astype(X.dtype, copy=False)
    dydx = dydx.astype(X.dtype, copy=False)
    return _record(f"act:{kind}", out, (x,), lambda g: (g * dydx,))


def softmax(x, causal: bool = False) -> Tensor:
    """Row-wise softmax over the last axis.

    With ``causal`` the last two axes are (query, key) and keys after the
    query position get zero probability.
    """
    # y = exp(x - max) / sum ; gx = y * (g - sum(g * y))
    x = as_tensor(x)
    X = x.data
    if causal:
        T, S = X.shape[-2:]
        if T != S:
            raise ShapeError(f"softmax: causal mask needs square scores, got {X.shape}")
        y = kernels.causal_softmax(X)
    else:
        m = X.max(axis=-1, keepdims=True)
        e = np.exp(X - m)
        y = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.dtype, copy=False)

    def vjp(g):
        dot = np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64).astype(y.dtype)
        return (y * (g - dot),)

    return _record("softmax", y, (x,), vjp)


def rmsnorm(x, weight, eps: float = 1e-5) -> Tensor:
    # n = x * r, r = (mean(x^2) + eps)^-1/2 ; y = n * w
    # gw = sum over rows of g * n ; gx = r * (gw_ - n * mean(gw_ * n)), gw_ = g * w
    x, weight = as_tensor(x), as_tensor(weight)
    X, W = x.data, weight.data
    if W.shape != (X.shape[-1],):
        raise ShapeError(f"rmsnorm: weight {W.shape} vs input {X.shape}")
    ms = np.mean(np.square(X, dtype=np.float64), axis=-1, keepdims=True)
    r = (1.0 / np.sqrt(ms + eps)).astype(X.dtype)
    n = X * r
    out = n * W

    def vjp(g):
        gn = g * W
        proj = np.mean(gn * n, axis=-1, keepdims=True, dtype=np.float64).astype(X.dtype)
        gx = r * (gn - n * proj)
        gw = (g * n).reshape(-1, W.shape[0]).sum(axis=0, dtype=np.float64).astype(W.dtype)
        return gx, gw

    return _record("rmsnorm", out, (x, weight), vjp)


def layernorm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    # n = (x - mu) * r ; y = n * w + b
    # gx = r * (gn - mean(gn) - n * mean(gn * n)), gn = g * w
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    X, W = x.data, weight.data
    if W.shape != (X.shape[-1],) or bias.shape != W.shape:
        raise ShapeError(f"layernorm: weight/bias {W.shape}/{bias.shape} vs input {X.shape}")
    mu = np.mean(X, axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean(np.square(X - mu), axis=-1, keepdims=True, dtype=np.float64)
    r = (1.0 / np.sqrt(var + eps)).astype(X.dtype)
    n = (X - mu.astype(X.dtype)) * r
    out = n * W + bias.data

    def vjp(g):
        gn = g * W
        m1 = np.mean(gn, axis=-1, keepdims=True, dtype=np.float64).astype(X.dtype)
        m2 = np.mean(gn * n, axis=-1, keepdims=True, dtype=np.float64).astype(X.dtype)
        gx = r * (gn - m1 - n * m2)
        flat_g = g.reshape(-1, W.shape[0])
        gw = (flat_g * n.reshape(-1, W.shape[0])).sum(axis=0, dtype=np.float64).astype(W.dtype)
        gb = flat_g.sum(axis=0, dtype=np.float64).astype(W.dtype)
        return gx, gw, gb

    return _record("layernorm", out, (x, weight, bias), vjp)


def embedding(table, ids) -> Tensor:
    # y = table[ids] ; gtable = scatter-add of g rows at ids
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise ShapeError(f"embedding: index out of range for table of {V} rows")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", out, (table,), vjp)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood over all rows of ``logits``."""
    # L = mean(logsumexp(z) - z[t]) ; gz = (softmax(z) - onehot(t)) / N
    logits = as_tensor(logits)
    Z = logits.data.reshape(-1, logits.shape[-1])
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != Z.shape[0]:
        raise ShapeError(f"cross_entropy: {Z.shape[0]} rows but {t.shape[0]} targets")
    if t.size == 0:
        raise ShapeError("cross_entropy: no targets")
    if t.min() < 0 or t.max() >= Z.shape[1]:
        raise ShapeError("cross_entropy: target out of range")
    Z64 = Z.astype(np.float64)
    m = Z64.max(axis=1, keepdims=True)
    e = np.exp(Z64 - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    N = Z.shape[0]
    loss = np.array(np.mean(lse - Z64[np.arange(N), t]), dtype=logits.dtype)
    shape = logits.shape

    def vjp(g):
        p = e / s
        p[np.arange(N), t] -= 1.0
        return ((p * (float(g) / N)).astype(logits.dtype).reshape(shape),)

    return _record("cross_entropy", loss, (logits,), vjp)


# layout ops: no arithmetic, adjoint is the inverse permutation / reshape


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _record("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


_PRIMITIVES = {
    "matmul": "y = a @ b (batched over leading dims); ga = g b^T, gb = a^T g",
    "add": "y = a + b (b same shape, scalar or last-axis bias); gb reduced to b's shape",
    "mul": "y = a * b (same shape, scalar or last-axis row-wise); ga = g b, gb = g a",
    "activation": "silu | gelu | relu elementwise; gx = g * f'(x)",
    "softmax": "row-wise, max-subtracted, optional causal mask; gx = y (g - <g, y>)",
    "rmsnorm": "x / rms(x) * w; gx = r (gw - n <gw, n>/d)",
    "layernorm": "(x - mean) / std * w + b",
    "embedding": "table[ids]; gtable = scatter-add",
    "cross_entropy": "mean NLL over rows; gz = (p - onehot) / N",
}
_LAYOUT = {"reshape": "view reshape", "transpose": "axis permutation"}


def primitive_set() -> dict[str, dict[str, str]]:
    """Catalogue of differentiable primitives and layout ops."""
    return {"primitives": dict(_PRIMITIVES), "layout": dict(_LAYOUT)}


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for every registered parameter.

    Parameters not reached from ``loss`` get zero gradients. Extra tracked
    tensors in ``wrt`` are returned under the key ``"#<node id>"``.
    """
    if loss.tape is not tape or loss.node is None:
        raise AutodiffError("loss is not a node of this tape")
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    n = len(tape.nodes)
    if loss.node >= n:
        raise AutodiffError(f"dangling loss node {loss.node}")
    grads: list[np.ndarray | None] = [None] * n
    grads[loss.node] = np.ones(loss.shape, dtype=loss.dtype)
    for i in range(loss.node, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        pg = node.vjp(g)
        for p, gp in zip(node.parents, pg):
            if p < 0 or gp is None:
                continue
            if p >= i:
                raise AutodiffError(f"dangling parent {p} of node {i} ({node.op})")
            # never accumulate in place: vjps may return views of their input
            grads[p] = gp if grads[p] is None else grads[p] + gp
        if node.op != "param":
            grads[i] = None  # free intermediate adjoints early
    out: dict[str, np.ndarray] = {}
    for name, nid in tape.params.items():
        node = tape.nodes[nid]
        g = grads[nid]
        out[name] = np.zeros(node.shape, node.dtype) if g is None else np.array(g, dtype=node.dtype)
    for t in wrt:
        g = grads[t.node]
        out[f"#{t.node}"] = np.zeros(t.shape, t.dtype) if g is None else np.array(g, dtype=t.dtype)
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x))
        flat[i] = old - eps
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
