"""Command-line bench harness.

Subcommands mirror the pipeline stages (gen-tasks, pretrain, finetune,
sample, merge, eval), plus `ablate` for sweeps and `report` to rebuild
reports from persisted artifacts. Every config key is also a flag
(`--family.num_tasks 4`); the CALMKIT_WORKDIR environment variable sets the
default working directory.

Exit codes: 0 success, 1 configuration error, 2 runtime/stage failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from ..nn import ContractError, bind
from .config import (
    CONFIG_KEYS,
    ConfigError,
    ExperimentConfig,
    SUITES,
    build_config,
    config_text,
    default_config_text,
    parse_entries,
)
from .formats import FormatError, load_checkpoint, load_tasks
from .runner import (
    CHECKPOINTS_FILE,
    CREDIBLE_FILE,
    DATASETS_FILE,
    MERGED_FILE,
    PRETRAINED_FILE,
    StageError,
    ablation_suite,
    recompute_report,
    stage_evaluate,
    stage_finetune,
    stage_generate,
    stage_merge,
    stage_pretrain,
    stage_sample,
)

STAGE_COMMANDS = ("gen-tasks", "pretrain", "finetune", "sample", "merge", "eval",
                  "ablate", "report")


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None,
                        help="experiment config file (key = value lines)")
    parser.add_argument("--workdir", type=Path,
                        default=Path(os.environ.get("CALMKIT_WORKDIR", "calm_runs")),
                        help="artifact directory (default: $CALMKIT_WORKDIR or ./calm_runs)")
    for key in CONFIG_KEYS:
        parser.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None,
                            help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calm-bench",
        description=("Reproducible desk-scale model merging benchmark. Any config key "
                     "can be passed as a flag, e.g. --seed 3 --family.num_tasks 4."),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "gen-tasks": "generate the synthetic task family and persist the dataset file",
        "pretrain": "train the shared pretrained model on the pooled train splits",
        "finetune": "fine-tune one model per task from the pretrained model",
        "sample": "score unlabeled pools and select credible sets",
        "merge": "merge the fine-tuned models with the configured method",
        "eval": "evaluate the merged model on every task's held-out test set",
        "ablate": "run an ablation suite (one swept axis, shared pipeline)",
        "report": "recompute reports from persisted artifacts",
    }
    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=descriptions[name])
        _add_common(p)
        if name == "ablate":
            p.add_argument("--suite", required=True,
                           help=f"one of: {', '.join(SUITES)}")
        if name == "report":
            p.add_argument("--defaults", action="store_true",
                           help="print the annotated default config and exit")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    entries: dict[str, str] = {}
    if args.config is not None:
        entries.update(parse_entries(Path(args.config).read_text()))
    for key in CONFIG_KEYS:
        value = getattr(args, f"cfg:{key}", None)
        if value is not None:
            entries[key] = value
    return build_config(entries)


def _load_stage_inputs(workdir: Path, need: tuple[str, ...]):
    out = {}
    if "tasks" in need:
        family, tasks = load_tasks(workdir / DATASETS_FILE)
        out["family"], out["tasks"] = family, tasks
    if "checkpoints" in need:
        from ..tasks import Checkpoints

        spec, vectors = load_checkpoint(workdir / CHECKPOINTS_FILE)
        pretrained = bind(spec, vectors["pretrained"])
        count = sum(1 for name in vectors if name.startswith("finetuned_"))
        finetuned = tuple(bind(spec, vectors[f"finetuned_{t:02d}"]) for t in range(count))
        out["ckpt"] = Checkpoints(spec=spec, pretrained=pretrained, finetuned=finetuned)
    return out


def _run_command(args: argparse.Namespace) -> int:
    if args.command == "report" and args.defaults:
        sys.stdout.write(default_config_text())
        return 0
    config = resolve_config(args)
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    if args.command == "gen-tasks":
        stage_generate(config, workdir)
        print(f"wrote {workdir / DATASETS_FILE}")
    elif args.command == "pretrain":
        loaded = _load_stage_inputs(workdir, ("tasks",))
        stage_pretrain(config, workdir, loaded["tasks"])
        print(f"wrote {workdir / PRETRAINED_FILE}")
    elif args.command == "finetune":
        loaded = _load_stage_inputs(workdir, ("tasks",))
        spec, vectors = load_checkpoint(workdir / PRETRAINED_FILE)
        theta_pre = bind(spec, vectors["pretrained"])
        stage_finetune(config, workdir, loaded["tasks"], theta_pre)
        print(f"wrote {workdir / CHECKPOINTS_FILE}")
    elif args.command == "sample":
        loaded = _load_stage_inputs(workdir, ("tasks", "checkpoints"))
        stage_sample(config, workdir, loaded["tasks"], loaded["ckpt"])
        print(f"wrote {workdir / CREDIBLE_FILE}")
    elif args.command == "merge":
        loaded = _load_stage_inputs(workdir, ("tasks", "checkpoints"))
        credible = stage_sample(config, workdir, loaded["tasks"], loaded["ckpt"])
        stage_merge(config, workdir, loaded["tasks"], loaded["ckpt"], credible)
        print(f"wrote {workdir / MERGED_FILE}")
    elif args.command == "eval":
        loaded = _load_stage_inputs(workdir, ("tasks", "checkpoints"))
        spec, merged_vectors = load_checkpoint(workdir / MERGED_FILE)
        merged = bind(spec, merged_vectors["merged"])
        bundle = stage_evaluate(config, workdir, loaded["tasks"], loaded["ckpt"],
                                merged, None)
        print((workdir / "report.txt").read_text(), end="")
        print(f"average accuracy: {bundle.average_accuracy:.4f}")
    elif args.command == "ablate":
        records = ablation_suite(config, args.suite, workdir)
        accs = np.array([r["average_accuracy"] for r in records])
        print((workdir / "summary.csv").read_text(), end="")
        print(f"{len(records)} points, mean accuracy {accs.mean():.4f}")
    elif args.command == "report":
        bundle = recompute_report(config, workdir)
        print((workdir / "report.txt").read_text(), end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run_command(args)
    except (ConfigError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
