"""Command-line entry points.

Subcommands: learn-dict, train, attack, sweep, compare, synth-data,
print-schema. Every command takes a TOML experiment config (see
``sparse-frontend print-schema``); the SPARSE_FRONTEND_DATA environment
variable supplies the default CIFAR-10 location.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .attacks import attack_dataset
from .dictlearn import Dictionary
from .model import evaluate, load_pipeline, save_pipeline
from .harness import (
    SCHEMA_TEMPLATE,
    ExperimentSpec,
    load_experiment_spec,
    resolve_dataset,
    write_rows_csv,
)


def _progress(message: str) -> None:
    print(f"[sparse-frontend] {message}", flush=True)


def _load_spec(args) -> ExperimentSpec:
    return load_experiment_spec(args.config)


def cmd_print_schema(args) -> int:
    print(SCHEMA_TEMPLATE, end="")
    return 0


def cmd_synth_data(args) -> int:
    spec = _load_spec(args)
    for split in ("train", "test"):
        ds = harness.synth_dataset(spec.dataset.synth, spec.seed, split)
        path = Path(args.out) / f"{split}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, images=ds.images, labels=ds.labels)
        _progress(f"wrote {ds.count} {split} examples to {path}")
    return 0


def cmd_learn_dict(args) -> int:
    spec = _load_spec(args)
    train_set = resolve_dataset(spec, "train")
    _progress(f"learning {spec.dictionary.atoms} atoms from {train_set.provenance}")
    dictionary = harness.learn_spec_dictionary(spec, train_set)
    dictionary.save(args.out)
    _progress(f"saved dictionary to {args.out}")
    return 0


def cmd_train(args) -> int:
    spec = _load_spec(args)
    train_set = resolve_dataset(spec, "train")
    test_set = resolve_dataset(spec, "test")
    defended = spec.frontend.enabled
    dictionary = Dictionary.load(args.dict) if (defended and args.dict) else None
    _progress("training " + ("defended pipeline" if defended else "natural model"))
    pipeline = harness.build_pipeline(spec, train_set, defended, dictionary)
    accuracy = evaluate(test_set, pipeline)
    _progress(f"clean test accuracy: {accuracy:.4f}")
    save_pipeline(
        args.out,
        pipeline,
        meta={"clean_accuracy": accuracy, "config_hash": spec.hash()},
        dict_file=args.dict,
    )
    _progress(f"saved checkpoint to {args.out}")
    return 0


def cmd_attack(args) -> int:
    config_path = args.attack or args.config
    if not config_path:
        print("error: provide the attack configuration via --attack", file=sys.stderr)
        return 2
    spec = load_experiment_spec(config_path)
    if args.data:
        spec.dataset.path = args.data
    pipeline, header = load_pipeline(args.model)
    data = resolve_dataset(spec, "test").subset(spec.dataset.attack_subset)
    kept = pipeline.frontend.top_k if pipeline.defended else spec.frontend.top_k
    config = harness.attack_config_for(spec, spec.attack.epsilon, pipeline.defended, kept)
    _progress(
        f"attacking {data.count} examples: norm={spec.attack.norm} eps={spec.attack.epsilon:.5f} "
        f"steps={config.steps} restarts={config.restarts}"
    )
    report = attack_dataset(data.images, data.labels, pipeline, config)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".json":
        payload = {
            "config_hash": spec.hash(),
            "adversarial_accuracy": report.adversarial_accuracy,
            "mean_l2_over_successes": report.mean_l2_over_successes,
            "rows": [row.__dict__ for row in report.rows],
        }
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        write_rows_csv(out, report, spec.hash())
    _progress(
        f"adversarial accuracy {report.adversarial_accuracy:.4f}; report written to {out}"
    )
    return 0


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    if args.out:
        spec.output_dir = args.out
    manifest = harness.run_sweep(spec, progress=_progress)
    ok = sum(1 for p in manifest["points"] if p["status"] == "ok")
    _progress(f"{ok}/{len(manifest['points'])} points ok; outputs in {spec.output_dir}")
    return 0


def cmd_compare(args) -> int:
    spec = _load_spec(args)
    if args.out:
        spec.output_dir = args.out
    rows = harness.compare_defenses(spec, progress=_progress)
    for row in rows:
        _progress(
            f"{row['variant']}: clean={row['clean']:.3f} "
            f"inf={row['pgd_inf_ce']:.3f} cw={row['pgd_inf_cw']:.3f} "
            f"l2={row['pgd_l2']:.3f} l1={row['pgd_l1']:.3f} "
            f"boundary={row['boundary_mean_l2']:.3f}"
        )
    _progress(f"table written to {Path(spec.output_dir) / 'compare.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-frontend",
        description="Sparse-coding frontend defense and adaptive attack harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    schema = sub.add_parser("print-schema", help="print the TOML config template")
    schema.set_defaults(func=cmd_print_schema)

    synth = sub.add_parser("synth-data", help="generate the synthetic dataset")
    synth.add_argument("--config", required=True)
    synth.add_argument("--out", required=True, help="output directory for npz splits")
    synth.set_defaults(func=cmd_synth_data)

    learn = sub.add_parser("learn-dict", help="learn a patch dictionary")
    learn.add_argument("--config", required=True)
    learn.add_argument("--out", required=True, help="dictionary file (.scfd)")
    learn.set_defaults(func=cmd_learn_dict)

    tr = sub.add_parser("train", help="train the pipeline")
    tr.add_argument("--config", required=True)
    tr.add_argument("--dict", default=None, help="pre-learned dictionary (.scfd)")
    tr.add_argument("--out", required=True, help="checkpoint file (.scfw)")
    tr.set_defaults(func=cmd_train)

    at = sub.add_parser("attack", help="attack a trained checkpoint")
    at.add_argument("--model", required=True, help="checkpoint file (.scfw)")
    at.add_argument("--attack", default=None, help="attack configuration (TOML)")
    at.add_argument("--config", default=None, help="alias for --attack")
    at.add_argument("--data", default=None, help="dataset path override (cifar10 batches)")
    at.add_argument("--report", required=True, help="output report (.csv or .json)")
    at.set_defaults(func=cmd_attack)

    sw = sub.add_parser("sweep", help="run the configured attack sweep")
    sw.add_argument("--config", required=True)
    sw.add_argument("--out", default=None, help="override output directory")
    sw.set_defaults(func=cmd_sweep)

    cp = sub.add_parser("compare", help="compare defense variants")
    cp.add_argument("--config", required=True)
    cp.add_argument("--out", default=None, help="override output directory")
    cp.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
