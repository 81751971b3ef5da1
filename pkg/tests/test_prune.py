import numpy as np
import pytest

from prunelab.fusion import PruningPlan, plan_pruning
from prunelab.groups import ATTN, discover_groups, mask_groups
from prunelab.model import ModelConfig, forward_logits, init_model
from prunelab.prune import (PruneError, apply_plan, count_params, llama7b_layout,
                            ratio_accounting, remove_groups)

from conftest import perturbed

CFG = ModelConfig(d_model=32, n_layers=6, n_heads=4, d_mlp=48, max_seq_len=16)


def _plan(graph, ids, protected=()):
    sel = [{"id": i, "layer": graph[i].layer, "kind": graph[i].kind, "asi": 0.0,
            "param_count": graph[i].param_count} for i in ids]
    return PruningPlan(0.0, list(protected), {}, sel, 0.0, graph.config.hash())


def test_empty_plan_identical():
    model = init_model(CFG, 0)
    graph = discover_groups(CFG)
    pruned, rep = apply_plan(model, graph, _plan(graph, []))
    assert pruned.hash() == model.hash()
    assert rep.params_after == rep.params_before


def test_remove_one_head_shapes():
    model = init_model(CFG, 0)
    graph = discover_groups(CFG)
    head = next(g for g in graph.groups if g.layer == 2 and g.kind == ATTN and g.index == 1)
    pruned, rep = apply_plan(model, graph, _plan(graph, [head.id]))
    dh = CFG.d_head
    for t in ("q", "k", "v"):
        assert pruned.params[f"layers.2.attn.{t}"].shape == (32, 32 - dh)
    assert pruned.params["layers.2.attn.o"].shape == (32 - dh, 32)
    assert pruned.params["layers.1.attn.o"].shape == (32, 32)
    assert pruned.config.heads(2) == 3 and pruned.config.heads(1) == 4
    assert set(rep.shape_diffs) == {f"layers.2.attn.{t}" for t in "qkvo"}
    # surviving head columns keep their values
    np.testing.assert_array_equal(pruned.params["layers.2.attn.q"][:, :dh],
                                  model.params["layers.2.attn.q"][:, :dh])
    np.testing.assert_array_equal(pruned.params["layers.2.attn.q"][:, dh:],
                                  model.params["layers.2.attn.q"][:, 2 * dh:])


def test_full_plan_equals_masked_model_and_accounting():
    model = perturbed(init_model(CFG, 1))
    graph = discover_groups(CFG)
    asi = np.random.default_rng(0).standard_normal(len(graph))
    plan = plan_pruning(asi, graph, 0.2, (0, 1, 2, -1))
    pruned, rep = apply_plan(model, graph, plan)
    masked = mask_groups(model, [graph[i] for i in plan.selected_ids])
    probes = np.random.default_rng(1).integers(0, 256, (32, CFG.max_seq_len))
    diff = np.abs(forward_logits(pruned, probes) - forward_logits(masked, probes)).max()
    assert diff <= 1e-5
    removed = sum(graph[i].param_count for i in plan.selected_ids)
    assert rep.params_after == rep.params_before - removed == count_params(pruned)
    assert rep.removed_param_count == removed
    for name, arr in model.params.items():
        if name.startswith(("layers.0.", "layers.1.", "layers.2.", "layers.5.")) or not name.startswith("layers."):
            assert pruned.params[name].tobytes() == arr.tobytes(), name
    # the pruned graph can be pruned again
    graph2 = discover_groups(pruned.config)
    again = remove_groups(pruned, graph2, [graph2.by_layer[3][0]])
    assert again.config.heads(3) == pruned.config.heads(3) - 1


def test_plan_mismatch_errors():
    model = init_model(CFG, 0)
    graph = discover_groups(CFG)
    head_ids = [g.id for g in graph.groups if g.layer == 3 and g.kind == ATTN]
    with pytest.raises(PruneError, match="fewer"):
        apply_plan(model, graph, _plan(graph, head_ids))
    with pytest.raises(PruneError, match="protected"):
        apply_plan(model, graph, _plan(graph, [head_ids[0]], protected=[3]))
    with pytest.raises(PruneError, match="twice"):
        apply_plan(model, graph, _plan(graph, [head_ids[0], head_ids[0]]))
    other = discover_groups(ModelConfig(**{**CFG.to_dict(), "d_mlp": 40}))
    with pytest.raises(PruneError, match="layout"):
        apply_plan(model, other, _plan(other, []))
    bad = _plan(graph, [])
    bad.config_hash = "0" * 16
    with pytest.raises(PruneError, match="config"):
        apply_plan(model, graph, bad)


def test_llama_parameter_counts():
    base = ratio_accounting(llama7b_layout())
    assert abs(base["base_total"] - 6.74e9) <= 0.05 * 6.74e9
    assert base["projected_total"] == base["base_total"]
    up = ratio_accounting(llama7b_layout(), 0.2, (0, 1, 2, -1), mode="uplift")
    assert up["layer_ratio"] == 0.25
    assert abs(up["projected_total"] - 5.26e9) <= 0.05 * 5.26e9


def test_ratio_accounting_matches_real_count():
    model = init_model(CFG, 0)
    acc = ratio_accounting(CFG)
    assert acc["base_total"] == count_params(model)
    assert acc["prunable_base"] == discover_groups(CFG).prunable_total
    no_emb = ratio_accounting(CFG, include_embeddings=False)
    assert no_emb["base_total"] == count_params(model) - sum(
        model.params[k].size for k in ("tok_emb", "pos_emb", "lm_head"))
