"""Structural removal of planned groups and parameter accounting."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .groups import ATTN, MLP, GroupGraph, discover_groups
from .model import Model, ModelConfig, param_shapes

MIN_HEADS = 1
MIN_MLP = 4


class PruneError(ValueError):
    pass


def remove_groups(model: Model, graph: GroupGraph, group_ids) -> Model:
    """Copy of ``model`` without the given groups; no survivor policy is applied."""
    cfg = model.config
    ids = sorted(set(int(i) for i in group_ids))
    if not ids:
        return model.copy()
    drop: dict[tuple[str, int], set[int]] = {}
    heads = [cfg.heads(l) for l in range(cfg.n_layers)]
    mlp = [cfg.mlp(l) for l in range(cfg.n_layers)]
    for gid in ids:
        if gid < 0 or gid >= len(graph):
            raise PruneError(f"group id {gid} is not in the graph")
        g = graph[gid]
        if g.kind == ATTN:
            heads[g.layer] -= 1
        else:
            mlp[g.layer] -= 1
        for s in g.slices:
            drop.setdefault((s.tensor, s.axis), set()).update(range(s.start, s.stop))
    params = {}
    for name, arr in model.params.items():
        out = arr
        for axis in range(arr.ndim):
            rows = drop.get((name, axis))
            if rows:
                if max(rows) >= arr.shape[axis]:
                    raise PruneError(f"group slice out of bounds for {name} {arr.shape}")
                keep = np.setdiff1d(np.arange(out.shape[axis]), np.fromiter(rows, int))
                out = np.take(out, keep, axis=axis)
        params[name] = out.copy() if out is arr else np.ascontiguousarray(out)
    new_cfg = replace(cfg, layer_heads=tuple(heads), layer_mlp=tuple(mlp))
    for name, shape in param_shapes(new_cfg).items():
        if params[name].shape != shape:
            raise PruneError(f"{name}: shape {params[name].shape} after removal, expected {shape}")
    return Model(new_cfg, params, dict(model.meta))


@dataclass
class PruneReport:
    params_before: int
    params_after: int
    removed_by_layer: dict[int, dict[str, int]]
    achieved_ratio: float
    shape_diffs: dict[str, list[list[int]]]
    wall_time: float
    removed_param_count: int = 0
    version: int = 1

    def to_dict(self) -> dict:
        return {"version": self.version, "params_before": self.params_before,
                "params_after": self.params_after,
                "removed_param_count": self.removed_param_count,
                "achieved_ratio": self.achieved_ratio,
                "removed_by_layer": {str(k): v for k, v in self.removed_by_layer.items()},
                "shape_diffs": self.shape_diffs, "wall_time": self.wall_time}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def apply_plan(model: Model, graph: GroupGraph, plan) -> tuple[Model, PruneReport]:
    """Remove the plan's groups, enforcing survivor minimums per layer."""
    t0 = time.perf_counter()
    cfg = model.config
    if discover_groups(cfg).to_json() != graph.to_json():
        raise PruneError("group graph does not match the model's layout")
    if plan.config_hash and plan.config_hash != cfg.hash():
        raise PruneError(f"plan was made for config {plan.config_hash}, model is {cfg.hash()}")
    ids = [s["id"] for s in plan.selected]
    if len(set(ids)) != len(ids):
        raise PruneError("plan selects a group twice")
    removed: dict[int, dict[str, int]] = {}
    count = 0
    for gid in ids:
        if gid < 0 or gid >= len(graph):
            raise PruneError(f"plan references unknown group {gid}")
        g = graph[gid]
        if g.layer in plan.protected_layers:
            raise PruneError(f"plan selects {g.name} in protected layer {g.layer}")
        r = removed.setdefault(g.layer, {ATTN: 0, MLP: 0})
        r[g.kind] += 1
        count += g.param_count
    for layer, r in removed.items():
        if cfg.heads(layer) - r[ATTN] < MIN_HEADS or cfg.mlp(layer) - r[MLP] < MIN_MLP:
            raise PruneError(f"layer {layer} would keep fewer than {MIN_HEADS} head / {MIN_MLP} channels")
    before = count_params(model)
    pruned = remove_groups(model, graph, ids)
    after = count_params(pruned)
    diffs = {}
    for name, arr in model.params.items():
        new = pruned.params[name]
        if new.shape != arr.shape:
            diffs[name] = [list(arr.shape), list(new.shape)]
    report = PruneReport(before, after, dict(sorted(removed.items())),
                         count / graph.prunable_total if graph.prunable_total else 0.0,
                         diffs, time.perf_counter() - t0, count)
    if report.params_after != report.params_before - count:
        raise PruneError("parameter accounting mismatch after removal")
    pruned.meta.setdefault("base_config_hash", cfg.hash())
    pruned.meta["prune_plan"] = {"ratio": plan.ratio, "selected": len(ids)}
    return pruned, report


def count_params(model: Model) -> int:
    return model.num_params()


def ratio_accounting(layout: ModelConfig, ratio: float = 0.0, protected=(),
                     mode: str = "proportional", uplift_ratio: float | None = None,
                     include_embeddings: bool = True, include_norms: bool = True) -> dict:
    """Projected parameter counts for a plan on ``layout``, from shapes alone.

    The prunable base is the sum of group parameters. ``mode='proportional'``
    spreads ``ratio`` of that base over unprotected layers by size;
    ``mode='uplift'`` removes ``uplift_ratio`` (default ``1.25 * ratio``) of
    every unprotected layer.
    """
    shapes = param_shapes(layout)
    total = 0
    for name, shp in shapes.items():
        n = int(np.prod(shp, dtype=np.int64))
        is_emb = name in ("tok_emb", "pos_emb", "lm_head")
        is_norm = "norm" in name
        if (is_emb and not include_embeddings) or (is_norm and not include_norms):
            continue
        total += n
    per_layer = {}
    for l in range(layout.n_layers):
        hd = layout.heads(l) * layout.d_head
        per_layer[l] = 4 * layout.d_model * hd + 3 * layout.d_model * layout.mlp(l)
        if layout.bias:
            per_layer[l] += 3 * hd + 2 * layout.mlp(l)
    prunable = sum(per_layer.values())
    protected = set(_resolve_layers(protected, layout.n_layers))
    free = [l for l in per_layer if l not in protected]
    if mode == "proportional":
        free_total = sum(per_layer[l] for l in free)
        removed = ratio * prunable if free_total else 0.0
        layer_ratio = removed / free_total if free_total else 0.0
    elif mode == "uplift":
        layer_ratio = 1.25 * ratio if uplift_ratio is None else uplift_ratio
        removed = layer_ratio * sum(per_layer[l] for l in free)
    else:
        raise ValueError(f"unknown budget mode {mode!r}")
    return {"base_total": total, "prunable_base": prunable, "layer_ratio": layer_ratio,
            "projected_removed": removed, "projected_total": total - removed,
            "protected_layers": sorted(protected)}


def _resolve_layers(layers, n_layers: int) -> list[int]:
    out = []
    for l in layers:
        l = int(l)
        if l < 0:
            l += n_layers
        if not 0 <= l < n_layers:
            raise ValueError(f"layer index {l} out of range for {n_layers} layers")
        out.append(l)
    return sorted(set(out))


def llama7b_layout() -> ModelConfig:
    """LLaMA-7B shapes (learned positions stand in for rotary embeddings)."""
    return ModelConfig(d_model=4096, n_layers=32, n_heads=32, d_mlp=11008, vocab_size=32000,
                       max_seq_len=2048)
