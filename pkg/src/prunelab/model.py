"""Desk-scale pre-norm decoder with gated MLP and learned positions."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 80
    n_layers: int = 12
    n_heads: int = 4
    d_mlp: int = 224
    vocab_size: int = 256
    max_seq_len: int = 128
    norm: str = "rmsnorm"
    activation: str = "silu"
    tie_embeddings: bool = False
    bias: bool = False
    dtype: str = "float32"
    # per-layer widths after structural pruning; None means uniform
    layer_heads: tuple[int, ...] | None = None
    layer_mlp: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for name, val in (("layer_heads", self.layer_heads), ("layer_mlp", self.layer_mlp)):
            if val is not None:
                object.__setattr__(self, name, tuple(int(v) for v in val))
                if len(getattr(self, name)) != self.n_layers:
                    raise ConfigError(f"{name} must have one entry per layer")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def heads(self, layer: int) -> int:
        return self.n_heads if self.layer_heads is None else self.layer_heads[layer]

    def mlp(self, layer: int) -> int:
        return self.d_mlp if self.layer_mlp is None else self.layer_mlp[layer]

    def validate(self) -> "ModelConfig":
        """Checks required of a trainable model (stricter than layout arithmetic)."""
        if self.n_layers < 2:
            raise ConfigError("n_layers must be >= 2")
        if self.d_mlp < 4:
            raise ConfigError("d_mlp must be >= 4")
        if self.norm not in ("rmsnorm", "layernorm"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.activation not in ("silu", "gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if self.vocab_size < 256:
            raise ConfigError("byte vocabulary needs vocab_size >= 256")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2")
        for l in range(self.n_layers):
            if self.heads(l) < 1 or self.mlp(l) < 1:
                raise ConfigError(f"layer {l} has no heads or no mlp channels")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("layer_heads", "layer_mlp"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def layer_names(cfg: ModelConfig, l: int) -> dict[str, str]:
    p = f"layers.{l}"
    return {
        "q": f"{p}.attn.q", "k": f"{p}.attn.k", "v": f"{p}.attn.v", "o": f"{p}.attn.o",
        "gate": f"{p}.mlp.gate", "up": f"{p}.mlp.up", "down": f"{p}.mlp.down",
        "attn_norm": f"{p}.attn_norm", "mlp_norm": f"{p}.mlp_norm",
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of a model with this layout, in a fixed order."""
    d, V = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d), "pos_emb": (cfg.max_seq_len, d)}

    def norm(prefix):
        shapes[f"{prefix}.weight"] = (d,)
        if cfg.norm == "layernorm":
            shapes[f"{prefix}.bias"] = (d,)

    for l in range(cfg.n_layers):
        n = layer_names(cfg, l)
        hd = cfg.heads(l) * cfg.d_head
        m = cfg.mlp(l)
        norm(n["attn_norm"])
        for key in ("q", "k", "v"):
            shapes[n[key]] = (d, hd)
        shapes[n["o"]] = (hd, d)
        norm(n["mlp_norm"])
        shapes[n["gate"]] = (d, m)
        shapes[n["up"]] = (d, m)
        shapes[n["down"]] = (m, d)
        if cfg.bias:
            for key in ("q", "k", "v"):
                shapes[n[key] + "_bias"] = (hd,)
            shapes[n["o"] + "_bias"] = (d,)
            shapes[n["gate"] + "_bias"] = (m,)
            shapes[n["up"] + "_bias"] = (m,)
            shapes[n["down"] + "_bias"] = (d,)
    norm("final_norm")
    if not cfg.tie_embeddings:
        shapes["lm_head"] = (d, V)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def num_params(self) -> int:
        return sum(int(np.asarray(v).size) if isinstance(v, np.ndarray) else v.num_params()
                   for v in self.params.values())

    def hash(self) -> str:
        return params_hash(self.params)


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        if not isinstance(arr, np.ndarray):
            arr = arr.as_array_for_hash()
        arr = np.ascontiguousarray(arr)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    """Scaled-uniform matrices, ones/zeros for norms, zeros for biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    params: dict[str, np.ndarray] = {}
    resid_scale = 1.0 / math.sqrt(2 * config.n_layers)
    for name, shape in param_shapes(config).items():
        if name.endswith(("_norm.weight",)) or name == "final_norm.weight":
            arr = np.ones(shape)
        elif name.endswith("_bias") or name.endswith("norm.bias"):
            arr = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            arr = rng.uniform(-0.05, 0.05, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            if name.endswith((".attn.o", ".mlp.down")):
                bound *= resid_scale
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dt)
    return Model(config, params)


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------

BOS_ID = 256


def byte_tokenize(text: bytes | str, bos: bool = False) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    ids = np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)
    if bos:
        ids = np.concatenate([[BOS_ID], ids])
    return ids


def byte_detokenize(ids: Iterable[int]) -> bytes:
    return bytes(int(i) for i in ids if int(i) != BOS_ID)


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


class _Weights:
    """Resolves parameter names to tensors, registering them on a tape if asked."""

    def __init__(self, model: Model, tape: ad.Tape | None, trainable: set[str] | None):
        self.model = model
        self.tape = tape
        self.trainable = trainable
        self._cache: dict[str, object] = {}

    def __call__(self, name: str):
        if name in self._cache:
            return self._cache[name]
        w = self.model.params[name]
        if not isinstance(w, np.ndarray):
            # quantized/adapter linear: binds its own trainable factors
            w.bind(self.tape, name)
            out = w
        elif self.tape is not None and (self.trainable is None or name in self.trainable):
            out = self.tape.param(name, w)
        else:
            out = ad.Tensor(w)
        self._cache[name] = out
        return out


def _linear(W: _Weights, name: str, x, bias: bool):
    w = W(name)
    y = w.apply(x) if hasattr(w, "apply") else ad.matmul(x, w)
    if bias:
        y = ad.add(y, W(name + "_bias"))
    return y


def _norm(cfg: ModelConfig, W: _Weights, prefix: str, x):
    if cfg.norm == "rmsnorm":
        return ad.rmsnorm(x, W(prefix + ".weight"))
    return ad.layernorm(x, W(prefix + ".weight"), W(prefix + ".bias"))


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id outside the vocabulary")
    return tokens


def forward(model: Model, tokens, tape: ad.Tape | None = None,
            trainable: set[str] | None = None, weights: _Weights | None = None) -> ad.Tensor:
    """Logits of shape (B, T, V). Parameters go on ``tape`` when one is given."""
    cfg = model.config
    toks = _check_tokens(cfg, tokens)
    B, T = toks.shape
    W = weights or _Weights(model, tape, trainable)
    dh = cfg.d_head
    pos = ad.embedding(W("pos_emb"), np.arange(T))
    x = ad.add(ad.embedding(W("tok_emb"), toks), pos)
    scale = ad.Tensor(np.array(1.0 / math.sqrt(dh), dtype=cfg.dtype))
    for l in range(cfg.n_layers):
        n = layer_names(cfg, l)
        h = cfg.heads(l)
        a = _norm(cfg, W, n["attn_norm"], x)

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, T, h, dh)), (0, 2, 1, 3))

        q = heads(_linear(W, n["q"], a, cfg.bias))
        k = ad.transpose(ad.reshape(_linear(W, n["k"], a, cfg.bias), (B, T, h, dh)), (0, 2, 3, 1))
        v = heads(_linear(W, n["v"], a, cfg.bias))
        att = ad.softmax(ad.mul(ad.matmul(q, k), scale), causal=True)
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, h * dh))
        x = ad.add(x, _linear(W, n["o"], o, cfg.bias))
        m = _norm(cfg, W, n["mlp_norm"], x)
        gate = ad.activation(_linear(W, n["gate"], m, cfg.bias), cfg.activation)
        up = _linear(W, n["up"], m, cfg.bias)
        x = ad.add(x, _linear(W, n["down"], ad.mul(gate, up), cfg.bias))
    x = _norm(cfg, W, "final_norm", x)
    if cfg.tie_embeddings:
        head = ad.transpose(W("tok_emb"), (1, 0))
    else:
        head = W("lm_head")
    return ad.matmul(x, head)


def forward_logits(model: Model, tokens) -> np.ndarray:
    """Inference-only logits; (T, V) for a 1-D sequence, (B, T, V) for a batch."""
    out = forward(model, tokens).data
    return out[0] if np.asarray(tokens).ndim == 1 else out


def _as_batches(batch) -> list[np.ndarray]:
    if isinstance(batch, np.ndarray) and batch.ndim == 2:
        seqs = [batch]
    else:
        seqs = [np.asarray(s, dtype=np.int64) for s in batch]
        if not seqs:
            raise ValueError("empty batch")
        by_len: dict[int, list[np.ndarray]] = {}
        for s in seqs:
            if s.ndim != 1:
                raise ValueError("each sequence must be 1-D")
            by_len.setdefault(len(s), []).append(s)
        seqs = [np.stack(v) for _, v in sorted(by_len.items())]
    for s in seqs:
        if s.shape[0] == 0:
            raise ValueError("empty batch")
        if s.shape[1] < 2:
            raise ValueError("each sequence needs at least 2 tokens")
    return seqs


def loss_on_tape(model: Model, batch, tape: ad.Tape | None = None,
                 trainable: set[str] | None = None) -> ad.Tensor:
    """Mean next-token NLL over all predicted positions, as a (possibly tracked) scalar."""
    groups = _as_batches(batch)
    W = _Weights(model, tape, trainable)
    if len(groups) == 1:
        toks = groups[0]
        return ad.cross_entropy(forward(model, toks[:, :-1], weights=W), toks[:, 1:])
    # mixed lengths: weight each length bucket by its number of predictions
    total = sum(g.shape[0] * (g.shape[1] - 1) for g in groups)
    loss = None
    for g in groups:
        frac = np.array(g.shape[0] * (g.shape[1] - 1) / total, dtype=model.config.dtype)
        part = ad.mul(ad.cross_entropy(forward(model, g[:, :-1], weights=W), g[:, 1:]), frac)
        loss = part if loss is None else ad.add(loss, part)
    return loss


def nll_loss(model: Model, batch: Sequence) -> float:
    return float(loss_on_tape(model, batch).data)


def with_config(model: Model, **changes) -> Model:
    return Model(replace(model.config, **changes), dict(model.params), dict(model.meta))
