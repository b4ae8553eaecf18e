"""Command-line entry points: stage1, stage2, ablate, evaluate, report.

Configuration is a flat JSON file; any key can be overridden by an
environment variable with the LEUDA_ prefix (upper-cased key, JSON-parsed
value), and the common keys again by command-line flags. Nested configs use
key prefixes: stage1_* for translation, seg_* for the segmenter, phantom_*
for the dataset generator; all remaining keys belong to the training config
or the experiment itself.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .core import InvalidInputError, TrainingConfig
from .metrics import aggregate, evaluate_target_subject
from .networks import SegmenterConfig
from .synthdata import PhantomSpec
from .trainer import (
    METHODS,
    ExperimentSpec,
    RunRecord,
    _build_bundle,
    load_checkpoint,
    load_stage1,
    load_subjects,
    make_split,
    run_ablation_suite,
    run_stage1,
    run_stage2,
    summarize_records,
    write_report,
)
from .translation import TranslationConfig

ENV_PREFIX = "LEUDA_"

_SPEC_FIELDS = {f.name for f in dataclasses.fields(ExperimentSpec)} - {
    "config",
    "stage1",
    "segmenter",
    "phantom",
}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainingConfig)}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def spec_from_flat(flat: dict) -> ExperimentSpec:
    """Build an ExperimentSpec from a flat key-value mapping."""
    spec_kwargs: dict = {}
    train_kwargs: dict = {}
    stage1_kwargs: dict = {}
    seg_kwargs: dict = {}
    phantom_kwargs: dict = {}
    for key, value in flat.items():
        value = _tuplify(value)
        if key.startswith("stage1_"):
            stage1_kwargs[key[len("stage1_") :]] = value
        elif key.startswith("seg_"):
            seg_kwargs[key[len("seg_") :]] = value
        elif key.startswith("phantom_"):
            phantom_kwargs[key[len("phantom_") :]] = value
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = value
        elif key in _SPEC_FIELDS:
            spec_kwargs[key] = value
        else:
            raise InvalidInputError(f"unknown config key {key!r}")
    if "seeds" in spec_kwargs and isinstance(spec_kwargs["seeds"], int):
        spec_kwargs["seeds"] = (spec_kwargs["seeds"],)
    return ExperimentSpec(
        config=TrainingConfig(**train_kwargs),
        stage1=TranslationConfig(**stage1_kwargs),
        segmenter=SegmenterConfig(**seg_kwargs),
        phantom=PhantomSpec(**phantom_kwargs),
        **spec_kwargs,
    )


def _env_overrides() -> dict:
    flat = {}
    for key, raw in os.environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX) :].lower()
        try:
            flat[name] = json.loads(raw)
        except json.JSONDecodeError:
            flat[name] = raw
    return flat


def load_flat_config(args: argparse.Namespace) -> dict:
    flat: dict = {}
    if args.config:
        flat.update(json.loads(Path(args.config).read_text()))
    flat.update(_env_overrides())
    if args.out is not None:
        flat["out_dir"] = args.out
    if getattr(args, "dataset", None) is not None:
        flat["dataset_dir"] = args.dataset
    if args.seed is not None:
        flat["seeds"] = [args.seed]
    if args.direction is not None:
        flat["direction"] = args.direction
    if args.label_ratio is not None:
        flat["label_ratio"] = args.label_ratio
    if getattr(args, "method", None) is not None:
        flat["method"] = args.method
    if "out_dir" not in flat:
        raise InvalidInputError("an output directory is required (--out or config out_dir)")
    return flat


def _add_common(parser: argparse.ArgumentParser, with_method: bool = True) -> None:
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--seed", type=int, help="run seed (overrides config seeds)")
    parser.add_argument("--direction", choices=["a2b", "b2a"])
    parser.add_argument("--label-ratio", dest="label_ratio", type=float)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--dataset", help="dataset directory (default: generated phantoms)")
    if with_method:
        parser.add_argument("--method", choices=sorted(METHODS))


def cmd_stage1(args: argparse.Namespace) -> int:
    spec = spec_from_flat(load_flat_config(args))
    for seed in spec.seeds:
        result = run_stage1(spec, seed)
        final = result.translators.log[-1]
        print(
            f"stage1 seed {seed}: {len(result.domains.pairs)} pairs, "
            f"final cycle loss {final['l_cyc']:.4f} -> {result.out_dir}"
        )
    return 0


def cmd_stage2(args: argparse.Namespace) -> int:
    spec = spec_from_flat(load_flat_config(args))
    for seed in spec.seeds:
        record = run_stage2(spec, seed=seed)
        print(
            f"stage2 {spec.method} seed {seed}: "
            f"mean target Dice {record.mean_target_dice:.4f} "
            f"({record.wall_clock_s:.1f}s)"
        )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    spec = spec_from_flat(load_flat_config(args))
    run_ablation_suite(spec)
    print((Path(spec.out_dir) / "table.txt").read_text(), end="")
    print(f"report written to {spec.out_dir}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    spec = spec_from_flat(load_flat_config(args))
    seed = spec.seeds[0]
    plan = METHODS[spec.method]
    run_dir = Path(spec.out_dir) / f"seed{seed}" / spec.method
    ckpt = run_dir / "checkpoint.pt"
    if not ckpt.exists():
        raise InvalidInputError(f"no checkpoint at {ckpt}")

    translators = None
    if plan.use_translation:
        stage1 = load_stage1(spec, seed)
        translators = stage1.translators
    bundle = _build_bundle(spec, plan, seed, translators)
    load_checkpoint(bundle, {}, ckpt)
    bundle.student.eval()

    _, _, spacing = load_subjects(spec)
    split = make_split(spec, seed)
    results = [
        evaluate_target_subject(
            bundle.student,
            subject,
            translator=bundle.g_s,
            use_translation=plan.use_translation,
            spacing=spacing,
            num_classes=spec.segmenter.num_classes,
        )
        for subject in split.target_test
    ]
    agg = aggregate(results, num_classes=spec.segmenter.num_classes)
    print(agg.table())
    (run_dir / "evaluation.json").write_text(json.dumps(agg.to_dict(), indent=2))
    print(f"written to {run_dir / 'evaluation.json'}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out if args.out else load_flat_config(args)["out_dir"])
    records = []
    for record_file in sorted(out_dir.glob("seed*/**/record.json")):
        payload = json.loads(record_file.read_text())
        records.append(
            RunRecord(
                method=payload["method"],
                seed=payload["seed"],
                spec_hash=payload["spec_hash"],
                epoch_log=payload["epoch_log"],
                schedule_log=[],
                result=payload["result"],
                mean_target_dice=payload["mean_target_dice"],
                wall_clock_s=payload["wall_clock_s"],
                checkpoint=payload["checkpoint"],
                notes=payload["notes"],
            )
        )
    if not records:
        print(f"no run records under {out_dir}", file=sys.stderr)
        return 1
    summary = summarize_records(records)
    write_report(out_dir, records, summary)
    print((out_dir / "table.txt").read_text(), end="")
    print(f"report written to {out_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(
        prog="leuda",
        description="Label-efficient domain adaptation for 2D segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_stage1 = sub.add_parser("stage1", help="train translators, synthesize domains")
    _add_common(p_stage1, with_method=False)
    p_stage1.set_defaults(fn=cmd_stage1)

    p_stage2 = sub.add_parser("stage2", help="train the student with a method")
    _add_common(p_stage2)
    p_stage2.set_defaults(fn=cmd_stage2)

    p_ablate = sub.add_parser("ablate", help="run the method ladder and emit the table")
    _add_common(p_ablate, with_method=False)
    p_ablate.set_defaults(fn=cmd_ablate)

    p_eval = sub.add_parser("evaluate", help="evaluate a trained checkpoint")
    _add_common(p_eval)
    p_eval.set_defaults(fn=cmd_evaluate)

    p_report = sub.add_parser("report", help="summarize run records into tables and plots")
    _add_common(p_report, with_method=False)
    p_report.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
