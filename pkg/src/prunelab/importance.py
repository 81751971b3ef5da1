"""Per-sample Taylor importance of every group.

For a group with weights w and per-sample gradient g (elementwise product
p = g * w):

* vector score  ``|sum(p)|``, optionally ``|s - s**2 / 2|`` with s = sum(p)
  when the second-order (Fisher-approximated) term is switched on;
* element score ``sum(|p - p**2 / 2|)``, the single-sample Fisher form.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import CalibrationSet
from .groups import CoupledGroup, GroupGraph
from .model import Model, loss_on_tape


class ImportanceError(RuntimeError):
    pass


def per_sample_gradients(model: Model, sample) -> dict[str, np.ndarray]:
    """Gradient of the sample's mean next-token NLL for every parameter."""
    toks = np.asarray(sample, dtype=np.int64)
    if toks.ndim == 1:
        toks = toks[None, :]
    with ad.Tape() as tape:
        loss = loss_on_tape(model, toks, tape)
    grads = ad.backward(tape, loss)
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise ImportanceError(f"non-finite gradient in tensor {name!r}")
    return grads


def _products(grads, model, group: CoupledGroup) -> list[np.ndarray]:
    if not group.slices:
        raise ImportanceError(f"group {group.name} has no slices")
    out = []
    for s in group.slices:
        w = model.params[s.tensor]
        g = grads[s.tensor]
        if g.shape != w.shape:
            raise ImportanceError(f"gradient/weight shape mismatch for {s.tensor}")
        idx = s.index(w.ndim)
        out.append(g[idx].astype(np.float64) * w[idx].astype(np.float64))
    return out


def vector_score(grads, model: Model, group: CoupledGroup, order: int = 1) -> float:
    s = float(sum(p.sum() for p in _products(grads, model, group)))
    if order == 2:
        return abs(s - 0.5 * s * s)
    return abs(s)


def _elem(p: np.ndarray) -> np.ndarray:
    return np.abs(p - 0.5 * p * p)


def element_score(grads, model: Model, group: CoupledGroup, aggregate: str = "sum") -> float:
    vals = np.concatenate([_elem(p).ravel() for p in _products(grads, model, group)])
    return float(_aggregate(vals, aggregate))


def _aggregate(vals: np.ndarray, how: str) -> float:
    if how == "sum":
        return vals.sum()
    if how == "mean":
        return vals.mean()
    if how == "max":
        return vals.max()
    if how == "prod":
        return np.prod(vals)
    raise ValueError(f"unknown aggregation {how!r}")


class _SliceIndex:
    """Prefix-sum gather of per-group sums over contiguous slices, one tensor axis at a time."""

    def __init__(self, graph: GroupGraph):
        self.n = len(graph)
        by_key: dict[tuple[str, int], list[tuple[int, int, int]]] = {}
        for g in graph.groups:
            for s in g.slices:
                by_key.setdefault((s.tensor, s.axis), []).append((g.id, s.start, s.stop))
        self.keys = {k: tuple(np.array(col) for col in zip(*v)) for k, v in sorted(by_key.items())}

    def group_sums(self, per_tensor: dict[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.float64)
        for (name, axis), (gid, start, stop) in self.keys.items():
            arr = per_tensor[name]
            other = tuple(i for i in range(arr.ndim) if i != axis)
            line = arr.sum(axis=other) if other else arr
            prefix = np.concatenate([[0.0], np.cumsum(line, dtype=np.float64)])
            np.add.at(out, gid, prefix[stop] - prefix[start])
        return out


@dataclass
class SampleScores:
    vector: np.ndarray   # (D, G)
    element: np.ndarray  # (D, G)
    group_ids: list[int]
    sample_ids: list[int]
    version: int = 1

    def __post_init__(self):
        if self.vector.shape != self.element.shape:
            raise ValueError("vector and element score matrices differ in shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.vector.shape

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "group_ids": self.group_ids,
                           "sample_ids": self.sample_ids, "vector": self.vector.tolist(),
                           "element": self.element.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SampleScores":
        d = json.loads(text)
        if d.get("version") != 1:
            raise ValueError(f"unsupported scores version {d.get('version')}")
        return cls(np.array(d["vector"], dtype=np.float64), np.array(d["element"], dtype=np.float64),
                   list(d["group_ids"]), list(d["sample_ids"]))

    def to_csv(self, which: str = "vector") -> str:
        mat = self.vector if which == "vector" else self.element
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample"] + [str(g) for g in self.group_ids])
        for sid, row in zip(self.sample_ids, mat):
            w.writerow([sid] + [repr(float(v)) for v in row])
        return buf.getvalue()


def scores_from_grads(grads, model: Model, graph: GroupGraph, index: _SliceIndex | None = None,
                      vector_order: int = 1, aggregate: str = "sum") -> tuple[np.ndarray, np.ndarray]:
    """(vector, element) scores for all groups from one gradient map."""
    index = index or _SliceIndex(graph)
    names = {k[0] for k in index.keys}
    prods = {n: grads[n].astype(np.float64) * model.params[n].astype(np.float64) for n in names}
    s = index.group_sums(prods)
    vec = np.abs(s - 0.5 * s * s) if vector_order == 2 else np.abs(s)
    if aggregate in ("sum", "mean"):
        elem = index.group_sums({n: _elem(p) for n, p in prods.items()})
        if aggregate == "mean":
            elem = elem / np.array([max(1, g.param_count) for g in graph.groups])
    else:
        elem = np.array([element_score(grads, model, g, aggregate) for g in graph.groups])
    return vec, elem


def estimate(model: Model, graph: GroupGraph, calib: CalibrationSet, vector_order: int = 1,
             aggregate: str = "sum") -> SampleScores:
    """Fill the D x G vector and element score matrices, one gradient pass per sample."""
    if calib.count < 2:
        raise ImportanceError("need at least 2 calibration samples")
    index = _SliceIndex(graph)
    D, G = calib.count, len(graph)
    vec = np.zeros((D, G))
    elem = np.zeros((D, G))
    for d in range(D):
        grads = per_sample_gradients(model, calib.samples[d])
        vec[d], elem[d] = scores_from_grads(grads, model, graph, index, vector_order, aggregate)
    return SampleScores(vec, elem, [g.id for g in graph.groups], list(range(D)))


def pooled_scores(model: Model, graph: GroupGraph, calib: CalibrationSet) -> tuple[np.ndarray, np.ndarray]:
    """Dataset-level scores: gradient of the pooled loss, Fisher term summed over samples.

    Element score per weight: ``|gbar*w - 1/2 * sum_j (g_j*w)**2|``.
    """
    index = _SliceIndex(graph)
    names = sorted({k[0] for k in index.keys})
    gsum = {n: np.zeros(model.params[n].shape) for n in names}
    fisher = {n: np.zeros(model.params[n].shape) for n in names}
    for d in range(calib.count):
        grads = per_sample_gradients(model, calib.samples[d])
        for n in names:
            p = grads[n].astype(np.float64) * model.params[n]
            gsum[n] += grads[n]
            fisher[n] += p * p
    D = calib.count
    prods = {n: gsum[n] / D * model.params[n] for n in names}
    vec = np.abs(index.group_sums(prods))
    elem = index.group_sums({n: np.abs(prods[n] - 0.5 * fisher[n]) for n in names})
    return vec, elem
