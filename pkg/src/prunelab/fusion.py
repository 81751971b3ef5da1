"""Uncertainty-weighted fusion, fluctuation indicator, standardization and planning."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .groups import GroupGraph, group_sq_norm
from .importance import SampleScores
from .model import Model
from .prune import MIN_HEADS, MIN_MLP, _resolve_layers

EPS = 1e-12
LAMBDA_MODES = ("layer-mle", "global-mle", "fixed", "per-group-mle")
POPULATIONS = ("layer-kind", "layer", "global")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class FusionPolicy:
    mode: str = "layer-mle"
    fixed: tuple[float, float] = (1.0, 1.0)  # (lambda_V, lambda_E) for mode="fixed"
    eps: float = EPS

    def __post_init__(self):
        if self.mode not in LAMBDA_MODES:
            raise ValueError(f"unknown lambda mode {self.mode!r}; expected one of {LAMBDA_MODES}")
        if self.mode == "fixed" and min(l * l for l in self.fixed) < self.eps:
            raise ValueError("fixed lambdas must satisfy lambda**2 >= eps")


@dataclass
class Lambdas:
    """Squared noise scales per group (columns of the score matrices)."""

    vector_sq: np.ndarray
    element_sq: np.ndarray
    by_population: dict[str, tuple[float, float]]
    mode: str


def fit_lambdas(scores: SampleScores, policy: FusionPolicy, graph: GroupGraph | None = None) -> Lambdas:
    """Closed-form noise scales.

    For a population sharing one lambda, the summed objective
    ``sum I / (2 lambda**2) + log lambda`` is minimized at ``lambda**2 = mean(I)``.
    """
    D, G = scores.shape
    if D == 0 or G == 0:
        raise ValueError("empty score matrices")
    if policy.mode == "fixed":
        lv, le = policy.fixed
        return Lambdas(np.full(G, lv * lv), np.full(G, le * le), {"all": (lv * lv, le * le)}, "fixed")
    if policy.mode == "per-group-mle":
        v = np.maximum(policy.eps, scores.vector.mean(axis=0))
        e = np.maximum(policy.eps, scores.element.mean(axis=0))
        return Lambdas(v, e, {}, policy.mode)
    if policy.mode == "global-mle":
        keys = np.zeros(G, dtype=np.int64)
    else:
        if graph is None:
            raise ValueError("layer-mle needs the group graph")
        keys = np.array([graph[gid].layer for gid in scores.group_ids], dtype=np.int64)
    v = np.empty(G)
    e = np.empty(G)
    pops = {}
    for k in np.unique(keys):
        cols = keys == k
        if not cols.any():
            raise ValueError(f"empty population {k}")
        lv = max(policy.eps, float(scores.vector[:, cols].mean()))
        le = max(policy.eps, float(scores.element[:, cols].mean()))
        v[cols], e[cols] = lv, le
        pops[str(int(k)) if policy.mode == "layer-mle" else "global"] = (lv, le)
    return Lambdas(v, e, pops, policy.mode)


@dataclass
class FusedScores:
    values: np.ndarray  # (D, G)
    lambdas: Lambdas
    group_ids: list[int]


def fuse(scores: SampleScores, lambdas: Lambdas) -> FusedScores:
    """I_V / (2 lv^2) + I_E / (2 le^2) + log(lv * le), entrywise."""
    lv, le = lambdas.vector_sq, lambdas.element_sq
    vals = scores.vector / (2 * lv) + scores.element / (2 * le) + 0.5 * np.log(lv * le)
    if not np.all(np.isfinite(vals)):
        raise ValueError("fused scores are not finite")
    return FusedScores(vals, lambdas, list(scores.group_ids))


def weighted_sum(scores: SampleScores, w_vector: float = 0.5, w_element: float = 0.5) -> FusedScores:
    """Plain linear weighting (the fixed-weight ablation)."""
    vals = w_vector * scores.vector + w_element * scores.element
    G = vals.shape[1]
    lam = Lambdas(np.full(G, np.nan), np.full(G, np.nan), {}, "weighted")
    return FusedScores(vals, lam, list(scores.group_ids))


def group_norms(model: Model, graph: GroupGraph, group_ids=None) -> np.ndarray:
    ids = range(len(graph)) if group_ids is None else group_ids
    return np.array([group_sq_norm(model, graph[i]) for i in ids])


def fluctuation_from(values: np.ndarray, sq_norms: np.ndarray) -> np.ndarray:
    """Bessel-corrected variance of each column times its squared weight norm."""
    if values.shape[0] < 2:
        raise ValueError("fluctuation needs D >= 2 samples (divisor D - 1)")
    var = kernels.bessel_variance(np.ascontiguousarray(values, dtype=np.float64))
    return var * sq_norms


def fluctuation(fused: FusedScores, model: Model, graph: GroupGraph) -> np.ndarray:
    return fluctuation_from(fused.values, group_norms(model, graph, fused.group_ids))


def population_keys(graph: GroupGraph, how: str = "layer-kind") -> list:
    if how == "global":
        return [0] * len(graph)
    if how == "layer":
        return [g.layer for g in graph.groups]
    if how == "layer-kind":
        return [(g.layer, g.kind) for g in graph.groups]
    raise ValueError(f"unknown population {how!r}; expected one of {POPULATIONS}")


def standardize(M, population=None) -> np.ndarray:
    """z-score within each population using the population (1/n) standard deviation.

    A population with zero spread maps to all zeros.
    """
    M = np.asarray(M, dtype=np.float64)
    keys = [0] * len(M) if population is None else list(population)
    if len(keys) != len(M):
        raise ValueError("population labels must match the number of values")
    out = np.zeros_like(M)
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    for idx in groups.values():
        idx = np.array(idx)
        vals = M[idx]
        if np.all(vals == vals[0]):
            continue
        mu = vals.mean()
        dev = vals - mu
        sd = math.sqrt(float(np.mean(dev * dev)))
        if sd > 0:
            out[idx] = dev / sd
    return out


# --------------------------------------------------------------------------
# planning
# --------------------------------------------------------------------------


@dataclass
class PlanOptions:
    mode: str = "proportional"  # or "uplift"
    uplift_ratio: float | None = None  # default 1.25 * ratio in uplift mode
    min_heads: int = MIN_HEADS
    min_mlp: int = MIN_MLP


@dataclass
class PruningPlan:
    ratio: float
    protected_layers: list[int]
    budgets: dict[int, float]
    selected: list[dict]
    achieved_ratio: float
    config_hash: str = ""
    mode: str = "proportional"
    shortfall: dict[int, float] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    version: int = 1

    @property
    def selected_ids(self) -> list[int]:
        return [s["id"] for s in self.selected]

    def to_dict(self) -> dict:
        return {"version": self.version, "config_hash": self.config_hash, "ratio": self.ratio,
                "mode": self.mode, "protected_layers": list(self.protected_layers),
                "budgets": {str(k): v for k, v in self.budgets.items()},
                "selected": self.selected, "achieved_ratio": self.achieved_ratio,
                "shortfall": {str(k): v for k, v in self.shortfall.items()},
                "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        d = json.loads(text)
        if d.get("version") != 1:
            raise PlanError(f"unsupported plan version {d.get('version')}")
        return cls(d["ratio"], list(d["protected_layers"]),
                   {int(k): v for k, v in d["budgets"].items()}, list(d["selected"]),
                   d["achieved_ratio"], d.get("config_hash", ""), d.get("mode", "proportional"),
                   {int(k): v for k, v in d.get("shortfall", {}).items()}, d.get("provenance", {}))


def rank_order(priority: np.ndarray, tiebreak: np.ndarray | None = None) -> np.ndarray:
    """Group indices by descending priority, then ascending tiebreak, then ascending id."""
    n = len(priority)
    tb = np.zeros(n) if tiebreak is None else np.asarray(tiebreak, dtype=np.float64)
    # lexsort: last key is primary
    return np.lexsort((np.arange(n), tb, -np.asarray(priority, dtype=np.float64)))


def plan_pruning(asi, graph: GroupGraph, ratio: float, protection=(0, 1, 2, -1),
                 options: PlanOptions | None = None, tiebreak=None,
                 provenance: dict | None = None) -> PruningPlan:
    """Select groups to remove, most volatile (highest ``asi``) first, layer by layer.

    Each unprotected layer receives a parameter budget, shared between heads
    and channels by their parameter counts. Within a layer and kind,
    candidates are visited in rank order and taken while they fit the
    remaining budget and leave the survivor minimums intact.
    """
    opts = options or PlanOptions()
    if not 0 <= ratio < 1:
        raise PlanError("ratio must lie in [0, 1)")
    asi = np.asarray(asi, dtype=np.float64)
    if asi.shape != (len(graph),):
        raise PlanError(f"need one priority per group ({len(graph)}), got {asi.shape}")
    cfg = graph.config
    protected = _resolve_layers(protection, cfg.n_layers)
    free = [l for l in range(cfg.n_layers) if l not in protected]
    if not free:
        raise PlanError("protection leaves no prunable layer")
    layer_total = {l: graph.layer_params(l) for l in free}
    free_total = sum(layer_total.values())
    if opts.mode == "proportional":
        target = ratio * graph.prunable_total
        budgets = {l: target * layer_total[l] / free_total for l in free}
    elif opts.mode == "uplift":
        per = 1.25 * ratio if opts.uplift_ratio is None else opts.uplift_ratio
        budgets = {l: per * layer_total[l] for l in free}
    else:
        raise PlanError(f"unknown budget mode {opts.mode!r}")

    order = rank_order(asi, tiebreak)
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    selected: list[int] = []
    shortfall = {}
    for l in free:
        ids = graph.by_layer[l]
        heads = [i for i in ids if graph[i].kind == "attn-head"]
        chans = [i for i in ids if graph[i].kind != "attn-head"]
        keep_min = (opts.min_heads * (graph[heads[0]].param_count if heads else 0)
                    + opts.min_mlp * (graph[chans[0]].param_count if chans else 0))
        if budgets[l] > layer_total[l] - keep_min + 1e-9:
            raise PlanError(
                f"ratio {ratio:g} is infeasible: layer {l} budget {budgets[l]:.0f} exceeds the "
                f"{layer_total[l] - keep_min} removable parameters left by survivor minimums")
        # the layer budget is split across kinds by their parameter share; what the
        # coarse head granularity leaves unused is carried over to the channels
        head_total = sum(graph[i].param_count for i in heads)
        kind_budget = budgets[l] * head_total / layer_total[l] if layer_total[l] else 0.0
        used = 0
        for members, minimum in ((heads, opts.min_heads), (chans, opts.min_mlp)):
            if members is chans:
                kind_budget = budgets[l] - used
            left, spent = len(members) - minimum, 0
            for gid in sorted(members, key=lambda i: rank[i]):
                if left <= 0:
                    break
                if spent + graph[gid].param_count > kind_budget + 1e-9:
                    continue
                selected.append(gid)
                left -= 1
                spent += graph[gid].param_count
            used += spent
        shortfall[l] = budgets[l] - used
    selected.sort(key=lambda i: rank[i])
    removed = sum(graph[i].param_count for i in selected)
    entries = [{"id": int(i), "name": graph[i].name, "layer": graph[i].layer,
                "kind": graph[i].kind, "asi": float(asi[i]), "param_count": graph[i].param_count}
               for i in selected]
    return PruningPlan(ratio, protected, budgets, entries,
                       removed / graph.prunable_total if graph.prunable_total else 0.0,
                       cfg.hash(), opts.mode, shortfall, dict(provenance or {}))
