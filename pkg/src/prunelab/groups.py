"""Coupled structures of the decoder: attention heads and MLP channels.

A head owns ``d_head`` columns of Q, K and V and the matching rows of O. An
MLP channel owns one column of gate and up and one row of down. Biases, when
the model has them, follow their owning columns. Embeddings, norms and the
output head belong to no group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import Model, ModelConfig, forward_logits, layer_names, param_shapes

ATTN = "attn-head"
MLP = "mlp-channel"
KINDS = (ATTN, MLP)


class GroupError(ValueError):
    pass


@dataclass(frozen=True)
class Slice:
    tensor: str
    axis: int
    start: int
    stop: int

    def index(self, ndim: int) -> tuple:
        idx = [slice(None)] * ndim
        idx[self.axis] = slice(self.start, self.stop)
        return tuple(idx)


@dataclass(frozen=True)
class CoupledGroup:
    id: int
    layer: int
    kind: str
    index: int
    slices: tuple[Slice, ...]
    param_count: int

    @property
    def name(self) -> str:
        short = "head" if self.kind == ATTN else "mlp"
        return f"L{self.layer}.{short}{self.index}"

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "layer": self.layer, "kind": self.kind,
                "index": self.index, "param_count": self.param_count,
                "slices": [[s.tensor, s.axis, s.start, s.stop] for s in self.slices]}


@dataclass
class GroupGraph:
    config: ModelConfig
    groups: list[CoupledGroup]
    by_layer: dict[int, list[int]] = field(default_factory=dict)

    @property
    def prunable_total(self) -> int:
        return sum(g.param_count for g in self.groups)

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, gid: int) -> CoupledGroup:
        return self.groups[gid]

    def layer_params(self, layer: int) -> int:
        return sum(self.groups[i].param_count for i in self.by_layer.get(layer, []))

    def to_json(self) -> str:
        return json.dumps({"version": 1, "config_hash": self.config.hash(),
                           "prunable_total": self.prunable_total,
                           "groups": [g.to_dict() for g in self.groups]}, indent=1)


def discover_groups(config: ModelConfig) -> GroupGraph:
    """All groups of ``config`` ordered by (layer, kind, index); ids follow that order."""
    if config.n_heads <= 0 or config.d_model % config.n_heads:
        raise GroupError("head dimension does not divide d_model")
    shapes = param_shapes(config)
    dh = config.d_head
    groups: list[CoupledGroup] = []
    by_layer: dict[int, list[int]] = {}

    def emit(layer, kind, index, slices):
        count = 0
        for s in slices:
            shp = shapes[s.tensor]
            other = int(np.prod([n for i, n in enumerate(shp) if i != s.axis], dtype=np.int64))
            count += (s.stop - s.start) * other
        gid = len(groups)
        groups.append(CoupledGroup(gid, layer, kind, index, tuple(slices), count))
        by_layer.setdefault(layer, []).append(gid)

    for l in range(config.n_layers):
        n = layer_names(config, l)
        for h in range(config.heads(l)):
            a, b = h * dh, (h + 1) * dh
            sl = [Slice(n["q"], 1, a, b), Slice(n["k"], 1, a, b), Slice(n["v"], 1, a, b),
                  Slice(n["o"], 0, a, b)]
            if config.bias:
                sl += [Slice(n[k] + "_bias", 0, a, b) for k in ("q", "k", "v")]
            emit(l, ATTN, h, sl)
        for c in range(config.mlp(l)):
            sl = [Slice(n["gate"], 1, c, c + 1), Slice(n["up"], 1, c, c + 1),
                  Slice(n["down"], 0, c, c + 1)]
            if config.bias:
                sl += [Slice(n[k] + "_bias", 0, c, c + 1) for k in ("gate", "up")]
            emit(l, MLP, c, sl)
    return GroupGraph(config, groups, by_layer)


def group_weights(model: Model, group: CoupledGroup) -> list[np.ndarray]:
    out = []
    for s in group.slices:
        arr = model.params[s.tensor]
        if s.stop > arr.shape[s.axis]:
            raise GroupError(f"slice {s} out of bounds for {s.tensor} {arr.shape}")
        out.append(arr[s.index(arr.ndim)])
    return out


def group_sq_norm(model: Model, group: CoupledGroup) -> float:
    """Squared L2 norm over every weight slice the group owns."""
    return float(sum(np.sum(np.square(w, dtype=np.float64)) for w in group_weights(model, group)))


def mask_groups(model: Model, groups) -> Model:
    """Copy of ``model`` with every slice of ``groups`` set to zero."""
    out = model.copy()
    for g in groups:
        for s in g.slices:
            arr = out.params[s.tensor]
            if s.stop > arr.shape[s.axis]:
                raise GroupError(f"slice {s} out of bounds for {s.tensor} {arr.shape}")
            arr[s.index(arr.ndim)] = 0
    return out


def mask_group(model: Model, group: CoupledGroup) -> Model:
    return mask_groups(model, [group])


def save_slices(model: Model, group: CoupledGroup) -> list[np.ndarray]:
    return [w.copy() for w in group_weights(model, group)]


def restore_slices(model: Model, group: CoupledGroup, saved: list[np.ndarray]) -> Model:
    out = model.copy()
    for s, w in zip(group.slices, saved):
        arr = out.params[s.tensor]
        arr[s.index(arr.ndim)] = w
    return out


@dataclass
class IndependenceReport:
    checked: list[dict]
    max_abs_diff: float
    tol: float

    @property
    def ok(self) -> bool:
        return all(c["max_abs_diff"] <= self.tol for c in self.checked)


def verify_group_independence(model: Model, graph: GroupGraph, probe_tokens, k: int = 8,
                              seed: int = 0, tol: float = 1e-5,
                              group_ids=None) -> IndependenceReport:
    """Masked forward vs structural removal for ``k`` sampled groups (or ``group_ids``).

    Raises :class:`GroupError` naming the first group whose outputs differ by
    more than ``tol``.
    """
    from .prune import remove_groups

    probe = np.asarray(probe_tokens)
    if group_ids is None:
        rng = np.random.default_rng(seed)
        # always cover both kinds, then fill randomly
        picks = []
        for kind in KINDS:
            ids = [g.id for g in graph.groups if g.kind == kind]
            if ids:
                picks.append(int(rng.choice(ids)))
        rest = [g.id for g in graph.groups if g.id not in picks]
        extra = max(0, min(k - len(picks), len(rest)))
        picks += [int(i) for i in rng.choice(rest, size=extra, replace=False)] if extra else []
        group_ids = picks
    checked = []
    worst = 0.0
    for gid in group_ids:
        g = graph[gid]
        masked = forward_logits(mask_group(model, g), probe)
        removed = forward_logits(remove_groups(model, graph, [gid]), probe)
        diff = float(np.max(np.abs(masked.astype(np.float64) - removed)))
        worst = max(worst, diff)
        checked.append({"group": g.name, "id": gid, "kind": g.kind, "max_abs_diff": diff})
        if diff > tol:
            raise GroupError(f"mask/removal mismatch for group {g.name}: {diff:.3e} > {tol:g}")
    return IndependenceReport(checked, worst, tol)
