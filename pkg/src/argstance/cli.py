"""Command-line entry point.

Subcommands::

    argstance synth     write a synthetic demo corpus, near-domain data, names
    argstance prepare   downsample, transform, split, and materialize a dataset
    argstance train     train one model on the full train split
    argstance evaluate  re-evaluate a stored checkpoint on a split
    argstance sweep     run a few-shot sweep (proportions x repetitions)
    argstance report    collect per-run and aggregated CSVs from sweep cells

Every flag mirrors a field of the experiment configuration; ``--config``
loads a flat key-value file first and flags override it. Exit code is 0
iff everything (including every sweep cell) succeeded.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment, synthetic
from .corpus import Split, save_dataset, save_near_domain
from .experiment import ExperimentSpec, parse_experiment_config


def _add_spec_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value experiment file")
    parser.add_argument("--dataset", help="path to the JSONL dataset")
    parser.add_argument("--out", help="output directory of the experiment")
    parser.add_argument("--variant", choices=experiment.training.VARIANTS)
    parser.add_argument("--pvp", help="pattern set preset name or config path")
    parser.add_argument("--persons", choices=experiment.PERSONS_CONDITIONS)
    parser.add_argument("--labels", choices=experiment.LABELS_CONDITIONS)
    parser.add_argument("--mode", choices=experiment.MODES)
    parser.add_argument(
        "--proportions", help="comma-separated train-set proportions, e.g. 0.025,0.1,1.0"
    )
    parser.add_argument("--repetitions", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--seeds", help="comma-separated explicit per-repetition seeds")
    parser.add_argument("--topic", help="topic string for topic-prefixed inputs")
    parser.add_argument("--persons-file", dest="persons_file", help="newline-delimited name list")
    parser.add_argument("--near-domain", dest="near_domain", help="near-domain JSONL dataset")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument(
        "--set",
        dest="extra",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="set any other experiment field, e.g. --set hidden_size=32",
    )


def _build_spec(args: argparse.Namespace) -> ExperimentSpec:
    overrides: dict = {}
    for key in (
        "dataset", "out", "variant", "pvp", "persons", "labels", "mode",
        "repetitions", "seed", "topic", "persons_file", "near_domain",
        "epochs", "learning_rate", "batch_size", "workers",
    ):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "proportions", None):
        overrides["proportions"] = tuple(
            float(v) for v in args.proportions.replace(",", " ").split()
        )
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(v) for v in args.seeds.replace(",", " ").split())
    for item in getattr(args, "extra", []):
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = experiment._convert(key.strip(), value)
    if args.config:
        return parse_experiment_config(args.config, overrides)
    if "dataset" not in overrides or "out" not in overrides:
        raise SystemExit("either --config or both --dataset and --out are required")
    return ExperimentSpec.from_dict(overrides)


def _cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = synthetic.make_dataset(args.units, seed=args.seed)
    save_dataset(ds, out / "dataset.jsonl")
    save_near_domain(
        synthetic.make_near_domain(args.near_domain_units, seed=args.seed + 1),
        out / "near_domain.jsonl",
    )
    (out / "persons.txt").write_text(
        "\n".join(synthetic.PERSON_POOL) + "\n", encoding="utf-8"
    )
    print(f"wrote {len(ds)} units to {out / 'dataset.jsonl'}")
    return 0


def _cmd_prepare(args: argparse.Namespace) -> int:
    target = experiment.prepare(_build_spec(args))
    print(f"prepared splits under {target}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    model_dir = experiment.train_full(_build_spec(args))
    print(f"stored checkpoint and logs under {model_dir}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    spec = _build_spec(args)
    run = experiment.evaluate_checkpoint(spec, split=Split(args.split))
    print(f"{args.split} accuracy {run.metrics.accuracy:.4f} macro-F1 {run.metrics.macro_f1:.4f}")
    for label in run.metrics.labels:
        cm = run.metrics.per_class[label]
        print(
            f"  {label.value:<17} precision {cm.precision:.4f} "
            f"recall {cm.recall:.4f} f1 {cm.f1:.4f} support {cm.support}"
        )
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    return experiment.sweep(_build_spec(args))


def _cmd_report(args: argparse.Namespace) -> int:
    written = experiment.report(args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(
        prog="argstance",
        description="Few-shot claim/argument and stance classification experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic demo corpus")
    synth.add_argument("--out", required=True)
    synth.add_argument("--units", type=int, default=600)
    synth.add_argument("--near-domain-units", dest="near_domain_units", type=int, default=120)
    synth.add_argument("--seed", type=int, default=0)
    synth.set_defaults(func=_cmd_synth)

    for name, func, helptext in (
        ("prepare", _cmd_prepare, "materialize downsampled, transformed splits"),
        ("train", _cmd_train, "train one model on the full train split"),
        ("sweep", _cmd_sweep, "run the few-shot sweep"),
    ):
        cmd = sub.add_parser(name, help=helptext)
        _add_spec_flags(cmd)
        cmd.set_defaults(func=func)

    evaluate = sub.add_parser("evaluate", help="re-evaluate a stored checkpoint")
    _add_spec_flags(evaluate)
    evaluate.add_argument("--split", choices=[s.value for s in Split], default="test")
    evaluate.set_defaults(func=_cmd_evaluate)

    rep = sub.add_parser("report", help="collect CSVs from sweep cells")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
