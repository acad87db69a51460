"""Experiment orchestration: configuration, data preparation, sweeps, reports.

An experiment is described by a flat key-value configuration (or the
equivalent command-line flags). One root seed drives a hash-derived seed
hierarchy (root -> preparation steps, root -> cell -> component), so cells
are independent of one another and adding cells never changes existing
results. Sweep cells run as isolated worker processes and are skipped on
resume when their report already exists.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import multiprocessing
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import evaluation, training
from .corpus import (
    LABEL_ORDER,
    Label,
    LabeledDataset,
    NearDomainExample,
    Split,
    downsample_no_stance,
    load_dataset,
    load_near_domain,
    save_dataset,
    split_dataset,
)
from .encoding import (
    PatternVerbalizerPair,
    Tokenizer,
    build_standard_input,
    load_pvp,
    pvp_texts,
    tokenizer_from_units,
    verbalize,
)
from .evaluation import RunReport, load_run_report
from .model import (
    AdapterConfig,
    MiniBackbone,
    ModelAssembly,
    assemble,
    count_parameters,
    deserialize_trainable,
    serialize_trainable,
    stack_adapters,
)
from .preprocess import (
    PROTOCOL_PROPORTIONS,
    DictionaryRecognizer,
    FewShotPlan,
    sample_stratified,
    sample_tfs,
    shuffle_persons,
    swap_onion,
)
from .training import (
    TrainConfig,
    default_config,
    derive_seed,
    make_input_builder,
    near_domain_config,
    predict_labels,
    pretrain_near_domain,
    train,
)

logger = logging.getLogger(__name__)

PERSONS_CONDITIONS = ("original", "shuffled")
LABELS_CONDITIONS = ("original", "onion")
MODES = ("stratified", "tfs")


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce an experiment from scratch."""

    dataset: str
    out: str
    variant: str = "adapter_pet"
    persons: str = "original"
    labels: str = "original"
    pvp: str = "naive"
    mode: str = "stratified"
    proportions: tuple[float, ...] = PROTOCOL_PROPORTIONS
    repetitions: int = 5
    seed: int = 0
    seeds: Optional[tuple[int, ...]] = None
    topic: str = "Waffenlieferung Ukraine"
    persons_file: Optional[str] = None
    near_domain: Optional[str] = None
    downsample_share: Optional[float] = 0.8
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    # training overrides (None keeps the variant recipe)
    learning_rate: Optional[float] = None
    epochs: Optional[int] = None
    near_domain_epochs: Optional[int] = None
    batch_size: int = 16
    warmup_fraction: float = 0.1
    lm_loss_weight: float = 1e-4
    best_epoch_selection: bool = False
    # miniature backbone
    hidden_size: int = 64
    layer_count: int = 2
    num_heads: int = 4
    reduction_factor: int = 16
    max_len: int = 96
    workers: int = 1

    def __post_init__(self) -> None:
        if self.variant not in training.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.persons not in PERSONS_CONDITIONS:
            raise ValueError(f"persons must be one of {PERSONS_CONDITIONS}")
        if self.labels not in LABELS_CONDITIONS:
            raise ValueError(f"labels must be one of {LABELS_CONDITIONS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.proportions = tuple(float(p) for p in self.proportions)
        if not self.proportions or any(not 0 < p <= 1 for p in self.proportions):
            raise ValueError("proportions must be in (0, 1]")
        if self.repetitions < 1:
            raise ValueError("repetitions must be positive")
        if self.seeds is not None:
            self.seeds = tuple(int(s) for s in self.seeds)
            if len(self.seeds) != self.repetitions:
                raise ValueError(
                    f"{len(self.seeds)} explicit seeds for {self.repetitions} repetitions"
                )
        self.split_ratios = tuple(float(r) for r in self.split_ratios)

    def plans(self) -> list["FewShotPlan"]:
        """One sampling plan per sweep proportion (validates the grid)."""
        return [
            FewShotPlan(
                proportion=p, mode=self.mode, seed=self.seed, repetitions=self.repetitions
            )
            for p in self.proportions
        ]

    def to_dict(self) -> dict:
        payload = dataclasses.asdict(self)
        for key, value in payload.items():
            if isinstance(value, tuple):
                payload[key] = list(value)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        kwargs = dict(payload)
        for key in ("proportions", "split_ratios", "seeds"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


_TUPLE_FLOAT_KEYS = {"proportions", "split_ratios"}
_TUPLE_INT_KEYS = {"seeds"}
_BOOL_KEYS = {"best_epoch_selection"}
_OPTIONAL_NONE = {"none", "null", ""}


def _convert(key: str, raw: str):
    value = raw.strip()
    if value.lower() in _OPTIONAL_NONE:
        return None
    if key in _TUPLE_FLOAT_KEYS:
        return tuple(float(v) for v in value.replace(",", " ").split())
    if key in _TUPLE_INT_KEYS:
        return tuple(int(v) for v in value.replace(",", " ").split())
    if key in _BOOL_KEYS:
        return value.lower() in ("true", "yes", "1", "on")
    for converter in (int, float):
        try:
            return converter(value)
        except ValueError:
            continue
    return value


def parse_experiment_config(path: str | Path, overrides: Optional[dict] = None) -> ExperimentSpec:
    """Read a flat ``key = value`` experiment file, then apply overrides."""
    entries: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = _convert(key.strip(), value)
    if overrides:
        entries.update(overrides)
    return ExperimentSpec.from_dict(entries)


def prepared_dir(spec: ExperimentSpec) -> Path:
    return Path(spec.out) / "prepared"


def prepare(spec: ExperimentSpec) -> Path:
    """Materialize downsampled, transformed, split data plus a manifest.

    Deterministic: rerunning with the same spec rewrites byte-identical
    files.
    """
    ds = load_dataset(spec.dataset)
    steps: list[str] = []
    if spec.downsample_share is not None:
        ds = downsample_no_stance(
            ds, spec.downsample_share, derive_seed(spec.seed, "downsample")
        )
        steps.append(f"downsample_no_stance(share={spec.downsample_share})")
    if spec.persons == "shuffled":
        if not spec.persons_file:
            raise ValueError("persons=shuffled requires persons_file with name surfaces")
        recognizer = DictionaryRecognizer.from_file(spec.persons_file)
        ds = shuffle_persons(ds, recognizer, derive_seed(spec.seed, "persons"))
        steps.append("shuffle_persons")
    if spec.labels == "onion":
        ds = swap_onion(ds)
        steps.append("swap_onion")
    ds = split_dataset(ds, spec.split_ratios, derive_seed(spec.seed, "split"))
    steps.append(f"split{spec.split_ratios}")

    target = prepared_dir(spec)
    target.mkdir(parents=True, exist_ok=True)
    counts: dict[str, dict[str, int]] = {}
    for split in Split:
        subset = ds.units_in(split)
        save_dataset(
            LabeledDataset(units=subset), target / f"{split.value}.jsonl"
        )
        counts[split.value] = {
            label.value: sum(1 for u in subset if u.label is label) for label in Label
        }
    manifest = {
        "spec": spec.to_dict(),
        "steps": steps,
        "seeds": {
            "downsample": derive_seed(spec.seed, "downsample"),
            "persons": derive_seed(spec.seed, "persons"),
            "split": derive_seed(spec.seed, "split"),
        },
        "counts": counts,
        "flags": dict(ds.metadata),
    }
    (target / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    return target


def load_prepared(spec: ExperimentSpec) -> dict[Split, LabeledDataset]:
    target = prepared_dir(spec)
    if not (target / "manifest.json").exists():
        raise FileNotFoundError(
            f"no prepared data under {target}; run the prepare step first"
        )
    return {split: load_dataset(target / f"{split.value}.jsonl") for split in Split}


def _all_prepared_units(data: dict[Split, LabeledDataset]):
    for split in Split:
        yield from data[split].units


def build_cell_model(
    spec: ExperimentSpec,
    tokenizer: Tokenizer,
    pvp: Optional[PatternVerbalizerPair],
    near_domain: Optional[Sequence[NearDomainExample]],
    cell_seed: int,
) -> ModelAssembly:
    """Backbone plus adapters plus head for the spec's variant, pre-trained
    on the near-domain data when the variant calls for it."""
    backbone = MiniBackbone(
        vocab_size=tokenizer.vocab_size,
        hidden_size=spec.hidden_size,
        layer_count=spec.layer_count,
        num_heads=spec.num_heads,
        max_positions=spec.max_len,
        pad_id=tokenizer.pad_id,
        seed=derive_seed(cell_seed, "backbone"),
    )
    variant = spec.variant
    adapter = AdapterConfig("task", reduction_factor=spec.reduction_factor)

    if variant in ("ft_sam", "adapter_sam", "adapter_sam_pet"):
        if not near_domain:
            raise ValueError(f"variant {variant!r} needs near-domain examples")
        kind = "full" if variant == "ft_sam" else "adapter"
        sam_config = near_domain_config(
            kind,
            seed=derive_seed(cell_seed, "near-domain"),
            batch_size=spec.batch_size,
            warmup_fraction=spec.warmup_fraction,
            **({"epochs": spec.near_domain_epochs} if spec.near_domain_epochs else {}),
        )
        if variant == "ft_sam":
            sam_assembly = assemble(
                backbone, (), "standard", n_classes=3,
                seed=derive_seed(cell_seed, "sam-head"),
            )
        else:
            sam_assembly = assemble(
                backbone,
                (AdapterConfig("sam", reduction_factor=spec.reduction_factor),),
                "standard",
                n_classes=3,
                seed=derive_seed(cell_seed, "sam-adapter"),
            )
        pretrain_near_domain(
            sam_assembly, near_domain, sam_config, tokenizer=tokenizer, max_len=spec.max_len
        )
        if variant == "ft_sam":
            return assemble(
                backbone, (), "standard", seed=derive_seed(cell_seed, "head")
            )
        head_kind = "pet" if variant == "adapter_sam_pet" else "standard"
        return stack_adapters(
            sam_assembly, adapter, head_kind, pvp=pvp,
            seed=derive_seed(cell_seed, "stack"),
        )

    if variant == "ft":
        return assemble(backbone, (), "standard", seed=derive_seed(cell_seed, "head"))
    if variant == "adapter":
        return assemble(
            backbone, (adapter,), "standard", seed=derive_seed(cell_seed, "head")
        )
    if variant == "pet_full":
        return assemble(backbone, (), "pet_lm", pvp=pvp)
    if variant == "adapter_pet":
        return assemble(
            backbone, (adapter,), "pet", pvp=pvp, seed=derive_seed(cell_seed, "head")
        )
    raise ValueError(f"unknown variant {variant!r}")


def _task_config(spec: ExperimentSpec, cell_seed: int) -> TrainConfig:
    overrides: dict = {
        "batch_size": spec.batch_size,
        "warmup_fraction": spec.warmup_fraction,
        "lm_loss_weight": spec.lm_loss_weight,
        "seed": derive_seed(cell_seed, "train"),
        "best_epoch_selection": spec.best_epoch_selection,
    }
    if spec.learning_rate is not None:
        overrides["learning_rate"] = spec.learning_rate
    if spec.epochs is not None:
        overrides["epochs"] = spec.epochs
    return default_config(spec.variant, **overrides)


def cell_key(spec: ExperimentSpec, proportion: float, repetition: int) -> str:
    return (
        f"{spec.variant}_{spec.persons}_{spec.labels}_{spec.mode}"
        f"_p{proportion:g}_r{repetition}"
    )


def cell_seed_for(spec: ExperimentSpec, proportion: float, repetition: int) -> int:
    if spec.seeds is not None:
        return spec.seeds[repetition]
    return derive_seed(spec.seed, "cell", spec.variant, f"{proportion:g}", repetition)


def run_cell(
    spec: ExperimentSpec,
    proportion: float,
    repetition: int,
    data: Optional[dict[Split, LabeledDataset]] = None,
    cell_dir: Optional[Path] = None,
) -> RunReport:
    """Sample, train, and evaluate one sweep cell; persist its artifacts."""
    if data is None:
        data = load_prepared(spec)
    seed = cell_seed_for(spec, proportion, repetition)

    train_pool = LabeledDataset(units=data[Split.TRAIN].units)
    if spec.mode == "stratified":
        sampled = sample_stratified(train_pool, proportion, derive_seed(seed, "sample"))
    else:
        sampled = sample_tfs(train_pool, proportion, derive_seed(seed, "sample"))

    needs_pvp = spec.variant in ("pet_full", "adapter_pet", "adapter_sam_pet")
    pvp = load_pvp(spec.pvp) if needs_pvp else None
    near_domain = (
        load_near_domain(spec.near_domain)
        if spec.variant in ("ft_sam", "adapter_sam", "adapter_sam_pet") and spec.near_domain
        else None
    )

    extra_texts: list[str] = [spec.topic]
    if pvp is not None:
        extra_texts.extend(pvp_texts(pvp))
    if near_domain:
        extra_texts.extend(ex.topic for ex in near_domain)
        extra_texts.extend(ex.text for ex in near_domain)
    tokenizer = tokenizer_from_units(_all_prepared_units(data), extra_texts=extra_texts)
    if pvp is not None:
        pvp = verbalize(pvp, tokenizer)

    assembly = build_cell_model(spec, tokenizer, pvp, near_domain, seed)
    config = _task_config(spec, seed)
    builder = make_input_builder(
        spec.variant, tokenizer, spec.max_len, pvp=pvp, topic=spec.topic
    )
    dev = data[Split.DEV] if spec.best_epoch_selection else None
    assembly, log = train(
        assembly,
        sampled,
        dev,
        config,
        builder,
        tokenizer=tokenizer,
        lm_builder=lambda u: build_standard_input(u, tokenizer, spec.max_len),
    )

    test_units = data[Split.TEST].units
    predictions = predict_labels(assembly, test_units, builder)
    gold = [u.label for u in test_units]
    grid = evaluation.confusion(gold, predictions, labels=LABEL_ORDER)
    report = RunReport(
        variant=spec.variant,
        persons=spec.persons,
        labels_condition=spec.labels,
        mode=spec.mode,
        proportion=proportion,
        repetition=repetition,
        seed=seed,
        metrics=evaluation.metrics(grid),
        confusion=grid,
        stance=evaluation.stance_metrics(gold, predictions),
        train_seconds=log.total_seconds,
        parameter_report=count_parameters(assembly),
    )
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        serialize_trainable(assembly, cell_dir / "checkpoint.pt")
        log.write_csv(cell_dir / "trainlog.csv")
        report.save_json(cell_dir / "report.json")
    return report


def _run_cell_worker(spec_dict: dict, proportion: float, repetition: int) -> tuple[str, Optional[str]]:
    spec = ExperimentSpec.from_dict(spec_dict)
    key = cell_key(spec, proportion, repetition)
    cell_dir = Path(spec.out) / "cells" / key
    try:
        run_cell(spec, proportion, repetition, cell_dir=cell_dir)
        return key, None
    except Exception:  # noqa: BLE001 - a failed cell must not kill the sweep
        cell_dir.mkdir(parents=True, exist_ok=True)
        message = traceback.format_exc()
        (cell_dir / "error.txt").write_text(message, encoding="utf-8")
        return key, message


def sweep(spec: ExperimentSpec) -> int:
    """Run every (proportion x repetition) cell; returns 0 iff all succeeded.

    Cells with an existing report are skipped, so interrupted sweeps can be
    resumed. Failed cells leave an error file and do not stop the sweep.
    """
    load_prepared(spec)  # fail early when preparation is missing
    cells = [
        (plan.proportion, repetition)
        for plan in spec.plans()
        for repetition in range(plan.repetitions)
    ]
    pending = []
    for proportion, repetition in cells:
        key = cell_key(spec, proportion, repetition)
        if (Path(spec.out) / "cells" / key / "report.json").exists():
            logger.info("skipping finished cell %s", key)
            continue
        pending.append((proportion, repetition))

    failures: dict[str, str] = {}
    if spec.workers > 1 and len(pending) > 1:
        # spawn, not fork: the training backend starts threads, and forking a
        # threaded process can deadlock the children
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=spec.workers, mp_context=context) as pool:
            futures = [
                pool.submit(_run_cell_worker, spec.to_dict(), proportion, repetition)
                for proportion, repetition in pending
            ]
            for future in futures:
                key, error = future.result()
                if error is not None:
                    failures[key] = error
    else:
        for proportion, repetition in pending:
            key, error = _run_cell_worker(spec.to_dict(), proportion, repetition)
            if error is not None:
                failures[key] = error

    manifest = {
        "spec": spec.to_dict(),
        "cells": [cell_key(spec, p, r) for p, r in cells],
        "failed": sorted(failures),
    }
    (Path(spec.out) / "sweep_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    for key, error in failures.items():
        logger.error("cell %s failed:\n%s", key, error)
    return 1 if failures else 0


@dataclass
class _LogSummary:
    total_seconds: float
    epoch_count: int


def _cell_feasibility(cell_dir: Path, run: RunReport):
    seconds = 0.0
    epochs = 0
    trainlog = cell_dir / "trainlog.csv"
    if trainlog.exists():
        rows = trainlog.read_text(encoding="utf-8").splitlines()[1:]
        epochs = len(rows)
        seconds = sum(float(row.split(",")[3]) for row in rows)
    checkpoint = cell_dir / "checkpoint.pt"
    checkpoint_bytes = checkpoint.stat().st_size if checkpoint.exists() else None
    return (
        cell_dir.name,
        _LogSummary(total_seconds=seconds, epoch_count=epochs),
        run.parameter_report,
        checkpoint_bytes,
    )


def report(out_dir: str | Path) -> list[Path]:
    """Collect cell reports into per-run, aggregated, and feasibility CSVs."""
    out = Path(out_dir)
    report_paths = sorted(out.glob("cells/*/report.json"))
    if not report_paths:
        raise FileNotFoundError(f"no run reports under {out / 'cells'}")
    reports = [load_run_report(p) for p in report_paths]
    written = []
    runs_csv = out / "runs.csv"
    evaluation.write_run_metrics_csv(reports, runs_csv)
    written.append(runs_csv)
    aggregate_csv = out / "aggregates.csv"
    evaluation.write_aggregate_csv(reports, aggregate_csv)
    written.append(aggregate_csv)
    stance_reports = [
        dataclasses.replace(r, metrics=r.stance) for r in reports
    ]
    stance_csv = out / "stance_runs.csv"
    evaluation.write_run_metrics_csv(stance_reports, stance_csv)
    written.append(stance_csv)
    entries = [
        _cell_feasibility(path.parent, run)
        for path, run in zip(report_paths, reports)
        if run.parameter_report is not None
    ]
    if entries:
        feasibility_csv = out / "feasibility.csv"
        evaluation.write_feasibility_csv(
            evaluation.feasibility_report(entries), feasibility_csv
        )
        written.append(feasibility_csv)
    return written


def train_full(spec: ExperimentSpec) -> Path:
    """Train one model on the full train split and store its checkpoint."""
    data = load_prepared(spec)
    model_dir = Path(spec.out) / "model"
    report_obj = run_cell(spec, 1.0, 0, data=data, cell_dir=model_dir)
    manifest = {
        "spec": spec.to_dict(),
        "cell_seed": cell_seed_for(spec, 1.0, 0),
        "macro_f1": report_obj.metrics.macro_f1,
    }
    (model_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    return model_dir


def evaluate_checkpoint(spec: ExperimentSpec, split: Split = Split.TEST) -> RunReport:
    """Rebuild the trained assembly from the model manifest and re-evaluate it."""
    model_dir = Path(spec.out) / "model"
    manifest = json.loads((model_dir / "manifest.json").read_text(encoding="utf-8"))
    stored = ExperimentSpec.from_dict(manifest["spec"])
    data = load_prepared(stored)
    seed = manifest["cell_seed"]

    needs_pvp = stored.variant in ("pet_full", "adapter_pet", "adapter_sam_pet")
    pvp = load_pvp(stored.pvp) if needs_pvp else None
    near_domain = (
        load_near_domain(stored.near_domain)
        if stored.variant in ("ft_sam", "adapter_sam", "adapter_sam_pet") and stored.near_domain
        else None
    )
    extra_texts: list[str] = [stored.topic]
    if pvp is not None:
        extra_texts.extend(pvp_texts(pvp))
    if near_domain:
        extra_texts.extend(ex.topic for ex in near_domain)
        extra_texts.extend(ex.text for ex in near_domain)
    tokenizer = tokenizer_from_units(_all_prepared_units(data), extra_texts=extra_texts)
    if pvp is not None:
        pvp = verbalize(pvp, tokenizer)
    assembly = build_cell_model(stored, tokenizer, pvp, near_domain, seed)
    deserialize_trainable(model_dir / "checkpoint.pt", assembly)

    builder = make_input_builder(
        stored.variant, tokenizer, stored.max_len, pvp=pvp, topic=stored.topic
    )
    units = data[split].units
    predictions = predict_labels(assembly, units, builder)
    gold = [u.label for u in units]
    grid = evaluation.confusion(gold, predictions, labels=LABEL_ORDER)
    return RunReport(
        variant=stored.variant,
        persons=stored.persons,
        labels_condition=stored.labels,
        mode=stored.mode,
        proportion=1.0,
        repetition=0,
        seed=seed,
        metrics=evaluation.metrics(grid),
        confusion=grid,
        stance=evaluation.stance_metrics(gold, predictions),
        train_seconds=0.0,
        parameter_report=count_parameters(assembly),
    )
