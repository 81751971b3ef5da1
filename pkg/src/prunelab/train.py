"""AdamW training loop for the desk model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Model, byte_tokenize, loss_on_tape


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-3
    min_lr_frac: float = 0.1
    warmup: int = 50
    batch_size: int = 8
    seq_len: int | None = None  # defaults to the model's max_seq_len
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50


class AdamW:
    """Decoupled weight decay Adam over a dict of numpy arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, decay: set[str] | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.decay = set(params) if decay is None else decay
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = grads[name].astype(np.float64)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and name in self.decay:
                upd = upd + self.wd * p
            p -= (lr * upd).astype(p.dtype)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def lr_at(step: int, total: int, cfg_lr: float, warmup: int, min_frac: float) -> float:
    """Linear warmup then cosine decay to ``min_frac * lr``."""
    if warmup and step < warmup:
        return cfg_lr * (step + 1) / warmup
    span = max(1, total - warmup)
    prog = min(1.0, (step - warmup) / span)
    return cfg_lr * (min_frac + (1 - min_frac) * 0.5 * (1 + math.cos(math.pi * prog)))


def random_batch(tokens: np.ndarray, batch: int, length: int, rng: np.random.Generator) -> np.ndarray:
    starts = rng.integers(0, len(tokens) - length + 1, size=batch)
    return np.stack([tokens[s:s + length] for s in starts])


def train_steps(model: Model, corpus: bytes | str | np.ndarray, steps: int,
                hparams: TrainConfig | None = None) -> Model:
    """Train a copy of ``model`` for ``steps`` AdamW steps on random corpus windows.

    The loss history lands in ``result.meta["train_losses"]``.
    """
    hp = hparams or TrainConfig()
    cfg = model.config
    tokens = corpus if isinstance(corpus, np.ndarray) else byte_tokenize(corpus)
    if len(tokens) < 10 * cfg.max_seq_len:
        raise TrainingError(
            f"corpus has {len(tokens)} tokens; need at least 10 * max_seq_len = {10 * cfg.max_seq_len}")
    out = model.copy()
    out.meta = dict(model.meta)
    if steps <= 0:
        return out
    seq = min(hp.seq_len or cfg.max_seq_len, cfg.max_seq_len)
    rng = np.random.default_rng(hp.seed)
    decay = {k for k, v in out.params.items() if v.ndim == 2 and k not in ("tok_emb", "pos_emb")}
    opt = AdamW(out.params, hp.lr, (hp.beta1, hp.beta2), hp.eps, hp.weight_decay, decay)
    losses = []
    for step in range(steps):
        batch = random_batch(tokens, hp.batch_size, seq + 1, rng)
        with ad.Tape() as tape:
            loss = loss_on_tape(out, batch, tape)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"loss diverged at step {step}")
        grads = ad.backward(tape, loss)
        clip_grads(grads, hp.grad_clip)
        opt.step(grads, lr_at(step, steps, hp.lr, hp.warmup, hp.min_lr_frac))
        losses.append(value)
    out.meta["train_losses"] = losses
    out.meta["train_steps"] = int(model.meta.get("train_steps", 0)) + steps
    out.meta["final_loss"] = losses[-1]
    return out
