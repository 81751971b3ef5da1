"""prunelab command line.

Exit codes: 0 success, 2 config/validation error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline as pl
from .checkpoint import CheckpointError
from .config import FLAG_KEYS, PRESETS, RunConfig
from .model import ConfigError

log = logging.getLogger("prunelab")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _protect(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--protect expects comma-separated layer indices, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (file path or bundled name: desk, tiny)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="ablation preset overlay")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--ratio", type=float, help="target pruning ratio of prunable parameters")
    common.add_argument("--protect", type=_protect, help="protected layers, e.g. 0,1,2,-1")
    common.add_argument("--uplift-mode", dest="uplift_mode", choices=("proportional", "uplift"))
    common.add_argument("--fusion", choices=("layer-mle", "global-mle", "fixed", "per-group-mle"))
    common.add_argument("--population", choices=("layer-kind", "layer", "global"))
    common.add_argument("--method", choices=("saap", "separate-cal", "weighted-fusion", "no-asi", "random"))
    common.add_argument("--groups-L", dest="groups_L", type=int, help="quantization row blocks")
    common.add_argument("--bits-N", dest="bits_N", type=int, help="quantization bits")
    common.add_argument("--steps", type=int, help="recovery fine-tuning steps")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prunelab", description="Structured pruning lab for a small decoder.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train or load the base model"),
                        ("discover", "write the coupled group graph"),
                        ("estimate", "per-sample importance scores"),
                        ("prune", "rank groups and remove the planned ones"),
                        ("finetune", "quantize, train adapters, merge"),
                        ("eval", "perplexity (and throughput) reports"),
                        ("bench", "generation throughput only"),
                        ("pipeline", "all stages in order")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted config overrides, e.g. prune.ratio=0.3")
    return p


def load_config(args: argparse.Namespace, extra: list[str]) -> RunConfig:
    overrides: list = []
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append((key, val))
    overrides += list(args.overrides) + extra
    return RunConfig.load(args.config, overrides, args.preset)


STAGES = {
    "train": pl.stage_train,
    "discover": pl.stage_discover,
    "estimate": pl.stage_estimate,
    "prune": pl.stage_prune,
    "finetune": pl.stage_finetune,
    "eval": pl.stage_eval,
    "bench": pl.stage_bench,
    "pipeline": pl.run_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    bad = [e for e in extra if not (e.startswith("--") and "=" in e)]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args, extra)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        STAGES[args.command](cfg)
    except (ConfigError,) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (pl.StageError, CheckpointError, ValueError, RuntimeError, FileNotFoundError) as e:
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return EXIT_STAGE
    if args.command != "pipeline":
        pl.write_manifest(cfg, pl.out_dir(cfg))
    print(json.dumps({"command": args.command, "out": str(cfg["out"]), "config_hash": cfg.hash()}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
