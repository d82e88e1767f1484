"""Command-line entry points: train, eval, diagnose, viz, synth-data."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import engine, viz
from .config import ExperimentConfig
from .data import ALL_SCENARIOS, SamplePatch, ScenarioMask, generate_synthetic

OUTPUT_ROOT_ENV = "COMPSEG_OUTPUT_ROOT"


def _resolve_output(config: ExperimentConfig, override: Optional[str]) -> Path:
    out = Path(override or config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "steps", None) is not None:
        config.steps = args.steps
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _scenario(name: str) -> ScenarioMask:
    return ScenarioMask.from_name(name)


def cmd_train(args) -> int:
    config = _load_config(args)
    out_dir = _resolve_output(config, args.output_dir)
    result = engine.fit(config, log_every=args.log_every)
    engine.write_loss_csv(result.loss_history, out_dir / "loss.csv")
    engine.save_checkpoint(result.model, config, out_dir / "checkpoint.pt")
    config.save(out_dir / "config.yaml")
    dataset = engine.load_dataset(config, "train")
    for scen in ALL_SCENARIOS:
        report = engine.evaluate(result.model, dataset, scen)
        print(f"{scen.name}: mF1={report.mf1:.2f} mIoU={report.miou:.2f}")
    print(f"artifacts written to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    model, stored = engine.load_checkpoint(args.checkpoint, config if args.config else None)
    config = config if args.config else stored
    out_dir = _resolve_output(config, args.output_dir)
    dataset = engine.load_dataset(config, args.split)
    scen = _scenario(args.scenario)
    report = engine.evaluate(model, dataset, scen)
    payload = {"scenario": scen.name, "split": args.split, **report.to_dict()}
    path = out_dir / f"metrics_{scen.name}.json"
    path.write_text(json.dumps(payload, indent=2))
    with open(out_dir / f"metrics_{scen.name}.csv", "w") as fh:
        fh.write("class,f1\n")
        for k, f1 in enumerate(report.per_class_f1):
            fh.write(f"{k},{f1:.4f}\n")
        fh.write(f"mF1,{report.mf1:.4f}\nmIoU,{report.miou:.4f}\n")
    print(f"{scen.name}: mF1={report.mf1:.2f} mIoU={report.miou:.2f} -> {path}")
    return 0


def cmd_diagnose(args) -> int:
    if args.kind != "distance":
        print(f"unknown diagnostic kind: {args.kind}", file=sys.stderr)
        return 2
    config = _load_config(args)
    model, stored = engine.load_checkpoint(args.checkpoint, config if args.config else None)
    config = config if args.config else stored
    out_dir = _resolve_output(config, args.output_dir)
    dataset = engine.load_dataset(config, args.split)
    distances = engine.penultimate_distance(model, dataset)
    payload = {f"{a}__{b}": d for (a, b), d in distances.items()}
    path = out_dir / "penultimate_distance.json"
    path.write_text(json.dumps(payload, indent=2))
    for pair, d in payload.items():
        print(f"{pair}: {d:.6f}")
    return 0


def cmd_viz(args) -> int:
    config = _load_config(args)
    model, stored = engine.load_checkpoint(args.checkpoint, config if args.config else None)
    config = config if args.config else stored
    out_dir = _resolve_output(config, args.output_dir)
    scen = _scenario(args.scenario)
    if args.kind == "query":
        path = viz.emit_query_heatmap(model, out_dir)
        print(f"wrote {path}")
        return 0
    dataset = engine.load_dataset(config, args.split)
    patch = dataset[args.patch_index]
    if args.kind == "cwam":
        written = viz.emit_cwam(model, patch, scen, out_dir, class_filter=args.class_index)
    else:
        written = viz.emit_branch_activations(model, patch, scen, out_dir)
    print(f"wrote {len(written)} images under {out_dir}")
    return 0


def cmd_synth_data(args) -> int:
    config = _load_config(args)
    out_dir = _resolve_output(config, args.output_dir)
    patches = generate_synthetic(config.synthetic)
    arrays = {
        "rgir": np.stack([p.rgir for p in patches]),
        "ndsm": np.stack([p.ndsm for p in patches]),
        "label": np.stack([p.label for p in patches]),
    }
    path = out_dir / "synthetic.npz"
    np.savez_compressed(path, **arrays)
    print(f"wrote {len(patches)} patches to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compseg",
                                     description="missing-modality segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_checkpoint=False):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--output-dir", help="override config output_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--split", default="train", choices=["train", "val", "test"])
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under one scenario")
    common(p, needs_checkpoint=True)
    p.add_argument("--scenario", required=True,
                   choices=["full", "missing_rgir", "missing_ndsm"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="run a diagnostic")
    common(p, needs_checkpoint=True)
    p.add_argument("--kind", required=True, choices=["distance"])
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("viz", help="emit diagnostic images")
    common(p, needs_checkpoint=True)
    p.add_argument("--kind", required=True, choices=["cwam", "query", "branches"])
    p.add_argument("--scenario", default="full",
                   choices=["full", "missing_rgir", "missing_ndsm"])
    p.add_argument("--class", dest="class_index", type=int, default=None)
    p.add_argument("--patch-index", type=int, default=0)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("synth-data", help="write the synthetic dataset to disk")
    p.add_argument("--spec", dest="config", help="YAML config holding the synthetic spec")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_data)

    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
