"""Stage functions behind the CLI: train, discover, estimate, prune, finetune, eval.

Every stage reads its inputs from and writes its artifacts to one output
directory. JSON artifacts carry the schema version, the run config hash and
the seeds; :func:`write_manifest` hashes all of them with timing fields left
out, so two runs of the same config can be compared file by file.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import calibration_set, load_tokens
from .evaluate import EvalReport, compare, comparison_csv, evaluate
from .fusion import (FusionPolicy, PlanOptions, PruningPlan, fit_lambdas, fluctuation,
                     fluctuation_from, fuse, group_norms, plan_pruning, population_keys,
                     standardize, weighted_sum)
from .groups import GroupGraph, discover_groups
from .importance import SampleScores, estimate
from .model import Model, init_model
from .prune import apply_plan
from .quant import QuantConfig, RecoveryConfig, finetune_recovery, merge_model, quantize_model
from .train import TrainConfig, train_steps

ARTIFACT_VERSION = 1
# fields that depend on wall-clock time and are left out of artifact hashes
VOLATILE = {"wall_time", "tokens_per_s", "tps_dispersion", "d_tokens_per_s",
            "rel_tokens_per_s", "created", "timings"}


class StageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# artifact plumbing
# --------------------------------------------------------------------------


def _stamp(cfg: RunConfig, payload: dict, stage: str) -> dict:
    return {"version": ARTIFACT_VERSION, "stage": stage, "config_hash": cfg.hash(),
            "seed": cfg["seed"], **payload}


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_artifact(path: Path, stage: str) -> dict:
    if not path.is_file():
        raise StageError(f"missing input {path.name}: run the {stage!r} stage first")
    d = json.loads(path.read_text())
    if d.get("version") != ARTIFACT_VERSION:
        raise StageError(f"{path.name}: unsupported artifact version {d.get('version')}")
    return d


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k not in VOLATILE}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


def artifact_hash(path: Path) -> str:
    """sha256 of a file; JSON and CSV files are hashed without their timing fields."""
    data = path.read_bytes()
    if path.suffix == ".json":
        data = json.dumps(_strip(json.loads(data)), sort_keys=True).encode()
    elif path.suffix == ".csv":
        lines = data.decode().splitlines()
        if lines:
            cols = lines[0].split(",")
            keep = [i for i, c in enumerate(cols) if c not in VOLATILE]
            data = "\n".join(",".join(row.split(",")[i] for i in keep) for row in lines).encode()
    return hashlib.sha256(data).hexdigest()


def write_manifest(cfg: RunConfig, out: Path) -> dict:
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    body = {k: v for k, v in cfg.data.items() if k != "out"}
    man = _stamp(cfg, {"config": body, "artifacts": {p.name: artifact_hash(p) for p in files},
                       "created": time.strftime("%Y-%m-%dT%H:%M:%S")}, "manifest")
    write_json(out / "manifest.json", man)
    return man


def out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def stage_train(cfg: RunConfig) -> Model:
    """Base model: load ``model.checkpoint`` or train one from scratch."""
    out = out_dir(cfg)
    ck = cfg["model.checkpoint"]
    if ck is not None:
        model = load_checkpoint(cfg.path(ck))
    else:
        t = cfg["train"]
        init = init_model(cfg.model_config(), t["seed"])
        hp = TrainConfig(lr=t["lr"], warmup=t["warmup"], batch_size=t["batch_size"], seed=t["seed"])
        model = train_steps(init, load_tokens(cfg.corpus("train")), t["steps"], hp)
    save_checkpoint(model, out / "base.ckpt")
    write_json(out / "base.json", _stamp(cfg, {
        "params": model.num_params(), "model_config": model.config.to_dict(),
        "model_hash": model.hash(), "final_loss": model.meta.get("final_loss"),
        "train_steps": model.meta.get("train_steps", 0)}, "train"))
    return model


def _base(cfg: RunConfig) -> Model:
    path = Path(cfg["out"]) / "base.ckpt"
    if not path.is_file():
        raise StageError(f"missing input {path.name}: run the 'train' stage first")
    return load_checkpoint(path)


def stage_discover(cfg: RunConfig, model: Model | None = None) -> GroupGraph:
    out = out_dir(cfg)
    layout = model.config if model is not None else (
        _base(cfg).config if (out / "base.ckpt").is_file() else cfg.model_config())
    graph = discover_groups(layout)
    doc = json.loads(graph.to_json())
    write_json(out / "groups.json", _stamp(cfg, {"graph": doc}, "discover"))
    return graph


def stage_estimate(cfg: RunConfig, model: Model | None = None) -> SampleScores:
    out = out_dir(cfg)
    model = model or _base(cfg)
    graph = discover_groups(model.config)
    c = cfg["calibration"]
    calib = calibration_set(cfg.corpus("calib"), c["count"], c["seq_len"], c["seed"])
    imp = cfg["importance"]
    scores = estimate(model, graph, calib, imp["vector_order"], imp["aggregate"])
    write_json(out / "scores.json", _stamp(cfg, {
        "model_hash": model.hash(), "calibration": c, "scores": json.loads(scores.to_json())},
        "estimate"))
    (out / "scores_vector.csv").write_text(scores.to_csv("vector"))
    (out / "scores_element.csv").write_text(scores.to_csv("element"))
    return scores


def _load_scores(out: Path) -> SampleScores:
    d = read_artifact(out / "scores.json", "estimate")
    return SampleScores.from_json(json.dumps(d["scores"]))


def priorities(method: str, scores: SampleScores, model: Model, graph: GroupGraph,
               policy: FusionPolicy, population: str = "layer-kind",
               seed: int = 0) -> tuple[np.ndarray, np.ndarray | None, dict]:
    """Pruning priority per group (higher is removed first), a tiebreak key, and details.

    Ties in priority go to the group with the lower mean fused importance.
    """
    pop = population_keys(graph, population)
    info: dict = {"method": method, "population": population}
    if method == "random":
        return np.random.default_rng(seed).standard_normal(len(graph)), None, info
    if method == "separate-cal":
        norms = group_norms(model, graph, scores.group_ids)
        mv = fluctuation_from(scores.vector, norms)
        me = fluctuation_from(scores.element, norms)
        tb = (scores.vector + scores.element).mean(axis=0)
        return standardize(mv, pop) + standardize(me, pop), tb, info
    if method == "weighted-fusion":
        fused = weighted_sum(scores, 0.5, 0.5)
    else:
        lam = fit_lambdas(scores, policy, graph)
        fused = fuse(scores, lam)
        info["lambdas"] = {k: list(v) for k, v in lam.by_population.items()}
    mean = fused.values.mean(axis=0)
    if method == "no-asi":
        # least important on average goes first
        return -mean, None, info
    if method not in ("saap", "weighted-fusion"):
        raise ValueError(f"unknown ranking method {method!r}")
    M = fluctuation(fused, model, graph)
    info["fluctuation"] = M.tolist()
    return standardize(M, pop), mean, info


def stage_prune(cfg: RunConfig, model: Model | None = None,
                scores: SampleScores | None = None) -> tuple[Model, PruningPlan]:
    out = out_dir(cfg)
    model = model or _base(cfg)
    graph = discover_groups(model.config)
    pr = cfg["prune"]
    if pr["ratio"] == 0:
        asi, tb, info = np.zeros(len(graph)), None, {"method": cfg["method"]}
    else:
        scores = scores or _load_scores(out)
        if scores.shape[1] != len(graph):
            raise StageError("scores.json does not match the model's groups; rerun 'estimate'")
        policy = FusionPolicy(cfg["fusion.mode"], tuple(cfg["fusion.fixed"]))
        asi, tb, info = priorities(cfg["method"], scores, model, graph, policy, cfg["population"],
                               cfg["seed"])
    opts = PlanOptions(pr["uplift_mode"], pr["uplift_ratio"])
    prov = {"config_hash": cfg.hash(), "seed": cfg["seed"], "method": cfg["method"],
            "model_hash": model.hash()}
    plan = plan_pruning(asi, graph, pr["ratio"], pr["protect"], opts, tb, prov)
    pruned, report = apply_plan(model, graph, plan)
    (out / "plan.json").write_text(plan.to_json() + "\n")
    write_json(out / "asi.json", _stamp(cfg, {"asi": asi.tolist(), **info}, "prune"))
    write_json(out / "prune_report.json", _stamp(cfg, report.to_dict(), "prune"))
    save_checkpoint(pruned, out / "pruned.ckpt")
    return pruned, plan


def _pruned(cfg: RunConfig) -> Model:
    path = Path(cfg["out"]) / "pruned.ckpt"
    if not path.is_file():
        raise StageError(f"missing input {path.name}: run the 'prune' stage first")
    return load_checkpoint(path)


def recovery_config(cfg: RunConfig) -> RecoveryConfig:
    r = cfg["recovery"]
    return RecoveryConfig(lr=r["lr"], warmup=r["warmup"], batch_size=r["batch_size"],
                          seq_len=r["seq_len"], steps=r["steps"], seed=r["seed"])


def stage_finetune(cfg: RunConfig, pruned: Model | None = None) -> Model:
    """Quantize the pruned model, train its adapters, then merge them into the offsets."""
    out = out_dir(cfg)
    pruned = pruned or _pruned(cfg)
    q = cfg["quant"]
    qc = QuantConfig(q["L"], q["N"], q["rank"], q["alpha"], q["grouped"], cfg["recovery.seed"])
    qm = quantize_model(pruned, qc)
    tuned = finetune_recovery(qm, load_tokens(cfg.corpus("finetune")), recovery_config(cfg))
    merged = merge_model(tuned)
    save_checkpoint(merged, out / "recovered.ckpt")
    write_json(out / "recovery.json", _stamp(cfg, {
        "quant": q, "recovery": cfg["recovery"],
        "losses": tuned.meta.get("recovery_losses", []), "model_hash": merged.hash()}, "finetune"))
    return merged


def stage_eval(cfg: RunConfig, models: dict[str, Model] | None = None) -> dict:
    """Reports for every stage checkpoint present, plus the comparison table."""
    out = out_dir(cfg)
    if models is None:
        models = {}
        for stage, name in (("base", "base.ckpt"), ("pruned", "pruned.ckpt"),
                            ("recovered", "recovered.ckpt")):
            if (out / name).is_file():
                models[stage] = load_checkpoint(out / name)
        if not models:
            raise StageError("no checkpoints to evaluate: run 'train' first")
    ev = cfg["eval"]
    toks = load_tokens(cfg.corpus("eval"))[: ev["max_tokens"]]
    reports = {}
    for stage, m in models.items():
        rep = evaluate(m, toks, stage, ev["gen_length"] if ev["throughput"] else None, ev["runs"])
        rep.extra = {"config_hash_run": cfg.hash(), "seed": cfg["seed"]}
        write_json(out / f"report_{stage}.json", rep.to_dict())
        reports[stage] = rep
    result = {"reports": reports}
    if len(reports) >= 2:
        table = compare(list(reports.values()))
        write_json(out / "comparison.json", _stamp(cfg, table, "eval"))
        (out / "comparison.csv").write_text(comparison_csv(table))
        result["comparison"] = table
    return result


def stage_bench(cfg: RunConfig) -> dict:
    """Throughput only, for every stage checkpoint present."""
    from .evaluate import throughput

    out = out_dir(cfg)
    ev = cfg["eval"]
    res = {}
    for stage, name in (("base", "base.ckpt"), ("pruned", "pruned.ckpt"),
                        ("recovered", "recovered.ckpt")):
        if (out / name).is_file():
            t = throughput(load_checkpoint(out / name), ev["gen_length"], ev["runs"])
            res[stage] = {"tokens_per_s": t.median, "tps_dispersion": t.dispersion}
    if not res:
        raise StageError("no checkpoints to benchmark: run 'train' first")
    write_json(out / "bench.json", _stamp(cfg, {"gen_length": ev["gen_length"], "runs": ev["runs"],
                                                "timings": res}, "bench"))
    return res


def run_pipeline(cfg: RunConfig) -> dict:
    """All stages in order; returns the manifest."""
    base = stage_train(cfg)
    stage_discover(cfg, base)
    scores = stage_estimate(cfg, base) if cfg["prune.ratio"] > 0 else None
    pruned, _ = stage_prune(cfg, base, scores)
    recovered = stage_finetune(cfg, pruned)
    stage_eval(cfg, {"base": base, "pruned": pruned, "recovered": recovered})
    return write_manifest(cfg, out_dir(cfg))


def load_reports(out: Path) -> list[EvalReport]:
    reps = []
    for stage in ("base", "pruned", "recovered"):
        p = out / f"report_{stage}.json"
        if p.is_file():
            reps.append(EvalReport.from_dict(json.loads(p.read_text())))
    return reps
