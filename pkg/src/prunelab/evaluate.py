"""Perplexity, generation throughput and stage comparison reports."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Model, byte_tokenize, forward_logits

STAGES = ("base", "pruned", "recovered")
SCHEMA_VERSION = 1


class EvalError(ValueError):
    pass


def _tokens(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        return corpus.astype(np.int64, copy=False)
    return byte_tokenize(corpus)


def token_nll(model: Model, corpus, batch: int = 8) -> np.ndarray:
    """Next-token NLL of every predicted position.

    The corpus is cut into windows of ``max_seq_len + 1`` tokens with stride
    ``max_seq_len`` so each target token is predicted exactly once. A shorter
    final window is scored on its own.
    """
    toks = _tokens(corpus)
    if len(toks) < 2:
        raise EvalError("corpus needs at least 2 tokens")
    T = model.config.max_seq_len
    starts = list(range(0, len(toks) - 1, T))
    full = [s for s in starts if s + T + 1 <= len(toks)]
    tail = [s for s in starts if s + T + 1 > len(toks)]
    out = []
    for i in range(0, len(full), batch):
        win = np.stack([toks[s:s + T + 1] for s in full[i:i + batch]])
        out.append(_window_nll(model, win).ravel())
    for s in tail:
        out.append(_window_nll(model, toks[s:][None, :]).ravel())
    return np.concatenate(out)


def _window_nll(model: Model, win: np.ndarray) -> np.ndarray:
    logits = forward_logits(model, win[:, :-1]).astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
    tgt = np.take_along_axis(logits, win[:, 1:, None], axis=-1)[..., 0]
    return lse - tgt


def perplexity(model: Model, corpus) -> float:
    """exp(mean next-token NLL) over non-overlapping windows."""
    nll = token_nll(model, corpus)
    return math.exp(float(nll.mean()))


def generate(model: Model, prompt, length: int) -> np.ndarray:
    """Greedy decoding; the context is recomputed each step and clipped to max_seq_len."""
    if length <= 0:
        raise EvalError("generation length must be positive")
    seq = list(np.asarray(prompt, dtype=np.int64).ravel())
    if not seq:
        raise EvalError("prompt must contain at least one token")
    T = model.config.max_seq_len
    for _ in range(length):
        ctx = np.array(seq[-T:], dtype=np.int64)
        logits = forward_logits(model, ctx)
        seq.append(int(np.argmax(logits[-1])))
    return np.array(seq[-length:], dtype=np.int64)


@dataclass
class Throughput:
    median: float
    runs: list[float]
    dispersion: float  # (max - min) / median
    gen_length: int


def default_prompt(length: int = 64) -> np.ndarray:
    from .data import load_tokens
    return load_tokens("eval")[:length]


def throughput(model: Model, gen_length: int = 64, k: int = 5, prompt=None,
               clock=time.perf_counter) -> Throughput:
    """Median tokens/s of ``k`` greedy generations after one excluded warmup run."""
    if k < 3:
        raise EvalError("throughput needs k >= 3 timed runs")
    if gen_length <= 0:
        raise EvalError("generation length must be positive")
    if prompt is None:
        prompt = default_prompt()
    generate(model, prompt, gen_length)  # warmup
    runs = []
    for _ in range(k):
        t0 = clock()
        generate(model, prompt, gen_length)
        runs.append(gen_length / max(clock() - t0, 1e-12))
    med = statistics.median(runs)
    return Throughput(med, runs, (max(runs) - min(runs)) / med, gen_length)


@dataclass
class EvalReport:
    stage: str
    perplexity: float
    mean_nll: float
    token_count: int
    params: int
    tokens_per_s: float | None = None
    tps_dispersion: float | None = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise EvalError(f"stage tag must be one of {STAGES}, got {self.stage!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("version") != SCHEMA_VERSION:
            raise EvalError(f"unsupported report version {d.get('version')}")
        if "stage" not in d:
            raise EvalError("report has no stage tag")
        return cls(**d)


def evaluate(model: Model, corpus, stage: str, gen_length: int | None = None,
             k: int = 5) -> EvalReport:
    """Perplexity report, plus throughput when ``gen_length`` is given."""
    nll = token_nll(model, corpus)
    mean = float(nll.mean())
    tps = disp = None
    if gen_length:
        t = throughput(model, gen_length, k)
        tps, disp = t.median, t.dispersion
    return EvalReport(stage, math.exp(mean), mean, int(nll.size), model.num_params(), tps, disp,
                      lineage_hash(model))


def lineage_hash(model: Model) -> str:
    """Config hash of the unpruned ancestor, so base/pruned/recovered compare as one run."""
    return model.meta.get("base_config_hash") or model.config.hash()


COLUMNS = ("stage", "params", "perplexity", "tokens_per_s", "d_params", "d_perplexity",
           "d_tokens_per_s", "rel_tokens_per_s")


def compare(reports) -> dict:
    """Table of each report against the first one, columns in ``COLUMNS`` order."""
    reps = [r if isinstance(r, EvalReport) else EvalReport.from_dict(r) for r in reports]
    if len(reps) < 2:
        raise EvalError("compare needs at least 2 reports")
    ref = reps[0]
    rows = []
    for r in reps:
        tps = r.tokens_per_s
        rows.append({
            "stage": r.stage, "params": r.params, "perplexity": r.perplexity,
            "tokens_per_s": tps,
            "d_params": r.params - ref.params,
            "d_perplexity": r.perplexity - ref.perplexity,
            "d_tokens_per_s": None if tps is None or ref.tokens_per_s is None else tps - ref.tokens_per_s,
            "rel_tokens_per_s": None if tps is None or not ref.tokens_per_s else tps / ref.tokens_per_s,
        })
    hashes = sorted({r.config_hash for r in reps})
    by_stage = {r.stage: r for r in reps}
    checks = {}
    if {"pruned", "recovered"} <= by_stage.keys():
        checks["recovered_below_pruned"] = by_stage["recovered"].perplexity < by_stage["pruned"].perplexity
    if {"base", "pruned"} <= by_stage.keys():
        checks["params_monotone"] = by_stage["pruned"].params <= by_stage["base"].params
    return {"version": SCHEMA_VERSION, "columns": list(COLUMNS), "rows": rows,
            "mixed_configs": len(hashes) > 1, "config_hashes": hashes, "checks": checks}


def comparison_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table["columns"])
    for row in table["rows"]:
        w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                    for c in table["columns"]])
    return buf.getvalue()
