"""Command-line front end: generate, train, eval, inspect-buffer.

Exit codes are a stable contract: 0 success, 2 configuration error,
3 missing or unreadable input, 4 numerical failure. Every flag has a
config-file equivalent and explicit flags win over file values; the
effective configuration is echoed into each run's report and manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import buro, data, hit, metrics
from .harness import (
    NonFiniteLossError,
    TaskSequence,
    TrainConfig,
    evaluate,
    run_sequence,
)
from .hit import HitConfig
from .tensor import ConfigurationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

PRESETS = {
    "finetune": {"alpha": 0.0, "beta": 0.0, "lambda_pt": 1.0, "buffer_capacity": 0},
    "conslide": {},
    "conslide-no-buro": {"replay_whole_bags": True},
    "conslide-no-cssl": {"beta": 0.0},
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{p}: file not found", EXIT_IO)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"{p}: invalid JSON ({e})", EXIT_CONFIG)


def _tree_hash(root) -> str:
    """Content hash over every file under root, order-independent of walk."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_run_manifest(out_dir, command, config_echo, input_hash, outputs):
    manifest = {
        "command": command,
        "config": config_echo,
        "input_hash": input_hash,
        "outputs": sorted(outputs),
    }
    Path(out_dir, "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _effective_config(args) -> dict:
    """defaults <- preset <- config file <- explicit flags."""
    cfg = {"data": {}, "model": {}, "train": {}}
    if args.config:
        file_cfg = _load_json(args.config)
        if not isinstance(file_cfg, dict):
            raise CliError(f"{args.config}: config must be a JSON object", EXIT_CONFIG)
        for key in ("data", "model", "train"):
            section = file_cfg.get(key, {})
            if not isinstance(section, dict):
                raise CliError(f"{args.config}: section {key!r} must be an object", EXIT_CONFIG)
            cfg[key].update(section)
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})", EXIT_CONFIG)
        cfg["train"].update(PRESETS[preset])
        cfg["train"]["preset"] = preset
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
        cfg["data"].setdefault("seed", args.seed)
    if getattr(args, "workers", None) is not None:
        cfg["train"]["eval_workers"] = args.workers
    return cfg


def _build_train_config(section: dict) -> TrainConfig:
    known = {k: v for k, v in section.items() if k != "preset"}
    try:
        return TrainConfig(**known)
    except (TypeError, ConfigurationError) as e:
        raise CliError(f"invalid train config: {e}", EXIT_CONFIG)


def _build_model_config(section: dict, num_classes: int) -> HitConfig:
    merged = dict(section)
    merged.setdefault("num_classes_total", num_classes)
    try:
        return HitConfig(**merged)
    except (TypeError, ConfigurationError) as e:
        raise CliError(f"invalid model config: {e}", EXIT_CONFIG)


def cmd_generate(args) -> int:
    cfg = _effective_config(args)
    section = dict(cfg["data"])
    section.pop("dataset_dir", None)
    if "m_range" in section:
        section["m_range"] = tuple(section["m_range"])
    try:
        spec = data.SyntheticSpec(**section)
    except (TypeError, ConfigurationError) as e:
        raise CliError(f"invalid generator spec: {e}", EXIT_CONFIG)
    out = Path(args.out)
    meta = data.write_dataset(spec, out)
    outputs = [str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()]
    _write_run_manifest(out, "generate", {"data": section}, _tree_hash(out), outputs)
    print(f"wrote {len(meta['class_names'])}-class dataset to {out}")
    print(f"tree hash: {_tree_hash(out)}")
    return EXIT_OK


def _load_sequence(dataset_dir) -> tuple:
    try:
        train, test, meta = data.load_dataset(dataset_dir)
    except FileNotFoundError as e:
        raise CliError(str(e), EXIT_IO)
    except (data.BagFormatError, ValueError) as e:
        raise CliError(f"failed to load dataset: {e}", EXIT_IO)
    return TaskSequence.from_bags(train, test, meta), meta


def _print_metric_table(final: dict):
    rows = [
        ("AUC", final["auc"]),
        ("ACC", final["acc"]),
        ("Masked ACC", final["masked_acc"]),
        ("BWT", final["bwt"]),
        ("Forgetting", final["forgetting"]),
    ]
    width = max(len(name) for name, _ in rows)
    print("final metrics")
    for name, value in rows:
        shown = "n/a" if value is None else f"{value:.4f}"
        print(f"  {name:<{width}}  {shown}")


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    dataset_dir = cfg["data"].get("dataset_dir") or args.dataset
    if not dataset_dir:
        raise CliError("no dataset: pass --dataset or set data.dataset_dir", EXIT_CONFIG)
    seq, meta = _load_sequence(dataset_dir)
    train_cfg = _build_train_config(cfg["train"])
    model_cfg = _build_model_config(cfg["model"], len(meta["class_names"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = run_sequence(seq, train_cfg, model_cfg, out_dir=out)
    except NonFiniteLossError as e:
        print(f"numerical failure: {e} (task {e.task_id}, sample {e.sample_id})", file=sys.stderr)
        return EXIT_NUMERIC
    config_echo = {
        "data": {"dataset_dir": str(dataset_dir)},
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "preset": cfg["train"].get("preset"),
    }
    outputs = [str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()]
    _write_run_manifest(out, "train", config_echo, _tree_hash(Path(dataset_dir)), outputs)
    _print_metric_table(result.final_metrics)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, projector, meta = hit.load_checkpoint(args.checkpoint)
    except FileNotFoundError as e:
        raise CliError(str(e), EXIT_IO)
    except data.BagFormatError as e:
        raise CliError(f"bad checkpoint: {e}", EXIT_IO)
    seq, ds_meta = _load_sequence(args.dataset)
    class_map = seq.class_map
    seen = int(meta.get("seen_classes", model.config.num_classes_total))
    seen_classes = list(range(seen))
    if args.task is not None:
        tasks = [t for t in seq if t.task_id == args.task]
        if not tasks:
            raise CliError(f"task {args.task} not present in dataset", EXIT_CONFIG)
    else:
        tasks = list(seq)
    bags = [bag for t in tasks for bag in t.test_bags]
    ev = evaluate(model, bags, args.scenario, seen_classes, class_map, args.workers or 1)
    report = {
        "checkpoint": str(args.checkpoint),
        "scenario": args.scenario,
        "num_samples": len(bags),
        "seen_classes": seen,
        "acc": metrics.accuracy(ev.predictions, ev.labels),
        "per_task_acc": {},
    }
    for t in tasks:
        sel = ev.task_ids == t.task_id
        if sel.any():
            report["per_task_acc"][str(t.task_id)] = metrics.accuracy(
                ev.predictions[sel], ev.labels[sel]
            )
    present = sorted({int(y) for y in ev.labels})
    if len(present) >= 2:
        sliced = ev.probabilities[:, seen_classes]
        auc, per_class = metrics.auc_ovr(sliced, ev.labels)
        report["auc"] = auc
        report["per_class_auc"] = {str(c): per_class[c] for c in per_class}
    if args.rollout:
        lines = ["sample_id,region_index,score"]
        for bag in bags:
            scores = hit.attention_rollout(model, bag)
            lines.extend(f"{bag.sample_id},{i},{repr(float(s))}" for i, s in enumerate(scores))
        Path(args.rollout).write_text("\n".join(lines) + "\n")
        report["rollout_csv"] = str(args.rollout)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_inspect_buffer(args) -> int:
    try:
        capacity, records = buro.load_buffer_records(args.snapshot)
    except FileNotFoundError as e:
        raise CliError(str(e), EXIT_IO)
    except data.BagFormatError as e:
        raise CliError(f"bad snapshot: {e}", EXIT_IO)
    counts = {}
    for r in records:
        counts[(r.task_id, r.label)] = counts.get((r.task_id, r.label), 0) + 1
    print(f"capacity {capacity}, stored {len(records)} records")
    print("task,label,count")
    for (task, label), count in sorted(counts.items()):
        print(f"{task},{label},{count}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conslide", description="continual feature-bag analysis runs"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    gen.add_argument("--config", help="JSON config with a data section")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--seed", type=int, help="generator seed override")
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", help="run the continual training sequence")
    train.add_argument("--config", help="JSON config (data/model/train sections)")
    train.add_argument("--dataset", help="dataset directory (overrides config)")
    train.add_argument("--out", required=True, help="output directory for reports")
    train.add_argument("--preset", choices=sorted(PRESETS), help="named parameter preset")
    train.add_argument("--seed", type=int, help="training seed override")
    train.add_argument("--workers", type=int, help="evaluation worker count")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--scenario", choices=["class-incremental", "task-incremental"],
                    default="class-incremental")
    ev.add_argument("--task", type=int, help="restrict to one task id")
    ev.add_argument("--rollout", help="write per-region rollout scores to this CSV")
    ev.add_argument("--out", help="write the metrics JSON here as well")
    ev.add_argument("--workers", type=int, help="evaluation worker count")
    ev.set_defaults(func=cmd_eval)

    insp = sub.add_parser("inspect-buffer", help="summarize a buffer snapshot")
    insp.add_argument("--snapshot", required=True)
    insp.set_defaults(func=cmd_inspect_buffer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_IO
    except data.BagFormatError as e:
        print(f"unreadable input: {e}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteLossError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
