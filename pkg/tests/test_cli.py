import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from prunelab import cli
from prunelab.checkpoint import load_checkpoint
from prunelab.config import PRESETS, ConfigError, RunConfig


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_pipeline_golden_run_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("pipeline", "--config", "tiny", "--out", a) == 0
    assert run("pipeline", "--config", "tiny", "--out", b) == 0
    ma, mb = manifest(a), manifest(b)
    assert ma["artifacts"] == mb["artifacts"]
    assert (a / "recovered.ckpt").read_bytes() == (b / "recovered.ckpt").read_bytes()
    for stage in ("base", "pruned", "recovered"):
        rep = json.loads((a / f"report_{stage}.json").read_text())
        assert rep["stage"] == stage and rep["version"] == 1
    table = json.loads((a / "comparison.json").read_text())
    assert [r["stage"] for r in table["rows"]] == ["base", "pruned", "recovered"]
    assert not table["mixed_configs"]
    assert table["checks"]["params_monotone"]
    run_hash = ma["config_hash"]
    for name in ("scores.json", "groups.json", "recovery.json", "asi.json", "base.json"):
        d = json.loads((a / name).read_text())
        assert d["config_hash"] == run_hash and d["seed"] == 0 and d["version"] == 1
    plan = json.loads((a / "plan.json").read_text())
    assert plan["provenance"]["config_hash"] == run_hash and plan["provenance"]["seed"] == 0
    rep = json.loads((a / "report_pruned.json").read_text())
    assert rep["extra"]["config_hash_run"] == run_hash


def test_single_stages_and_missing_inputs(tmp_path, capsys):
    out = tmp_path / "s"
    assert run("prune", "--config", "tiny", "--out", out) == 3
    assert "train" in capsys.readouterr().err
    assert run("train", "--config", "tiny", "--out", out) == 0
    assert run("prune", "--config", "tiny", "--out", out) == 3
    assert "estimate" in capsys.readouterr().err
    assert run("finetune", "--config", "tiny", "--out", out) == 3
    for stage in ("discover", "estimate", "prune", "finetune", "eval"):
        assert run(stage, "--config", "tiny", "--out", out) == 0, stage
    assert (out / "report_recovered.json").exists()
    assert "artifacts" in manifest(out)


def test_ratio_zero_copies_model(tmp_path):
    out = tmp_path / "z"
    assert run("pipeline", "--config", "tiny", "--out", out, "--ratio", 0) == 0
    plan = json.loads((out / "plan.json").read_text())
    assert plan["selected"] == []
    assert load_checkpoint(out / "pruned.ckpt").hash() == load_checkpoint(out / "base.ckpt").hash()


def test_calibration_count_one_cites_bessel(tmp_path, capsys):
    code = run("estimate", "--config", "tiny", "--out", tmp_path, "calibration.count=1")
    assert code == 2
    err = capsys.readouterr().err
    assert "calibration.count" in err and "Bessel" in err


def test_validation_errors_name_key(tmp_path, capsys):
    assert run("prune", "--config", "tiny", "--out", tmp_path, "prune.ratio=1.5") == 2
    assert "prune.ratio" in capsys.readouterr().err
    assert run("prune", "--config", "tiny", "--out", tmp_path, "nosuch.key=1") == 2
    assert run("prune", "--config", "tiny", "--out", tmp_path, "corpus.eval=/nope.txt") == 2
    assert "corpus.eval" in capsys.readouterr().err
    assert run("prune", "--config", "/nope.yaml") == 2


def test_flags_and_overrides(tmp_path):
    cfg = cli.load_config(*cli.build_parser().parse_known_args(
        ["prune", "--config", "tiny", "--ratio", "0.3", "--protect", "0,1,-1", "--fusion", "global-mle",
         "--population", "layer", "--groups-L", "8", "--bits-N", "3", "--steps", "7",
         "--uplift-mode", "uplift", "recovery.lr=0.5", "--seed=4"]))
    assert cfg["prune.ratio"] == 0.3 and cfg["prune.protect"] == [0, 1, -1]
    assert cfg["fusion.mode"] == "global-mle" and cfg["population"] == "layer"
    assert cfg["quant.L"] == 8 and cfg["quant.N"] == 3 and cfg["recovery.steps"] == 7
    assert cfg["prune.uplift_mode"] == "uplift" and cfg["recovery.lr"] == 0.5 and cfg["seed"] == 4


def test_presets():
    for name, overlay in PRESETS.items():
        cfg = RunConfig.load("tiny", preset=name)
        for k, v in overlay.items():
            if isinstance(v, dict):
                for k2, v2 in v.items():
                    assert cfg[f"{k}.{k2}"] == v2
            else:
                assert cfg[k] == v
    with pytest.raises(ConfigError):
        RunConfig.load("tiny", preset="nope")


def test_hash_ignores_out_dir():
    a = RunConfig.load("tiny", ["out=x"])
    b = RunConfig.load("tiny", ["out=y"])
    c = RunConfig.load("tiny", ["seed=1"])
    assert a.hash() == b.hash() != c.hash()


@pytest.mark.parametrize("method", ["separate-cal", "weighted-fusion", "no-asi", "random"])
def test_ablation_methods_run(tmp_path, method):
    out = tmp_path / method
    assert run("pipeline", "--config", "tiny", "--out", out, "--method", method, "--steps", 1) == 0
    asi = json.loads((out / "asi.json").read_text())
    assert asi["method"] == method
    assert json.loads((out / "plan.json").read_text())["selected"]


def test_console_script(tmp_path):
    exe = shutil.which("prunelab")
    cmd = [exe] if exe else [sys.executable, "-m", "prunelab.cli"]
    out = subprocess.run(cmd + ["estimate", "--config", "tiny", "--out", str(tmp_path),
                                "calibration.count=1"], capture_output=True, text=True)
    assert out.returncode == 2
