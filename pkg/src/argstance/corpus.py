"""Labeled sentence-level datasets: loading, validation, coder agreement, splitting.

The on-disk interchange format is JSON lines, one record per sentence unit,
UTF-8. Reliability matrices for agreement statistics are rectangular CSV
files with one row per coder and one column per coding unit (empty cell =
no value from that coder).
"""

from __future__ import annotations

import csv
import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from math import ceil, floor
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised for malformed records or invariant violations in dataset handling."""


class Label(str, Enum):
    """The five mutually exclusive sentence codes."""

    ARGUMENT_FOR = "argument_for"
    ARGUMENT_AGAINST = "argument_against"
    CLAIM_FOR = "claim_for"
    CLAIM_AGAINST = "claim_against"
    NO_STANCE = "no_stance"

    @property
    def has_stance(self) -> bool:
        return self is not Label.NO_STANCE


#: Canonical label order used for class indices, stratification and reports.
LABEL_ORDER: tuple[Label, ...] = tuple(Label)


class Split(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


@dataclass(frozen=True)
class SentenceUnit:
    """One coding unit: a target sentence with up to two context sentences per side.

    ``context_before`` is stored in reading order (sentence -2, then -1, the
    nearest sentence last); ``context_after`` stores the nearest sentence
    first. The ``onion`` flag marks units whose sentence also contains the
    opposite stance of a second actor; it is only meaningful for stance
    labels.
    """

    unit_id: str
    doc_id: str
    sent_index: int
    text: str
    label: Label
    context_before: tuple[str, ...] = ()
    context_after: tuple[str, ...] = ()
    onion: bool = False
    coder_labels: Optional[Mapping[str, Label]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "context_before", tuple(self.context_before))
        object.__setattr__(self, "context_after", tuple(self.context_after))
        if not isinstance(self.unit_id, str) or not self.unit_id:
            raise DatasetError("unit_id must be a non-empty string")
        if not isinstance(self.doc_id, str):
            raise DatasetError(f"unit {self.unit_id!r}: doc_id must be a string")
        if not isinstance(self.text, str) or not self.text:
            raise DatasetError(f"unit {self.unit_id!r}: text must be a non-empty string")
        if any(not isinstance(s, str) for s in self.context_before + self.context_after):
            raise DatasetError(f"unit {self.unit_id!r}: context sentences must be strings")
        if self.sent_index < 0:
            raise DatasetError(f"unit {self.unit_id!r}: sent_index must be >= 0")
        if len(self.context_before) > 2 or len(self.context_after) > 2:
            raise DatasetError(
                f"unit {self.unit_id!r}: at most two context sentences per side"
            )
        if self.onion and self.label is Label.NO_STANCE:
            raise DatasetError(
                f"unit {self.unit_id!r}: onion flag requires a stance label"
            )

    def text_fields(self) -> list[tuple[str, str]]:
        """All text-bearing fields as (field name, content) pairs."""
        fields = [("text", self.text)]
        fields += [
            (f"context_before[{i}]", s) for i, s in enumerate(self.context_before)
        ]
        fields += [
            (f"context_after[{i}]", s) for i, s in enumerate(self.context_after)
        ]
        return fields


@dataclass
class LabeledDataset:
    """An ordered collection of sentence units with optional split tags.

    Split assignment lives next to the units (keyed by unit id) so that
    splitting and sampling never touch unit contents.
    """

    units: tuple[SentenceUnit, ...]
    splits: dict[str, Split] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.units = tuple(self.units)
        seen: set[str] = set()
        for u in self.units:
            if u.unit_id in seen:
                raise DatasetError(f"duplicate unit_id {u.unit_id!r}")
            seen.add(u.unit_id)
        unknown = set(self.splits) - seen
        if unknown:
            raise DatasetError(f"split tags for unknown unit ids: {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self) -> Iterator[SentenceUnit]:
        return iter(self.units)

    def label_counts(self) -> Counter:
        return Counter(u.label for u in self.units)

    def units_in(self, split: Split) -> tuple[SentenceUnit, ...]:
        return tuple(u for u in self.units if self.splits.get(u.unit_id) is split)

    def subset(self, unit_ids: Sequence[str]) -> "LabeledDataset":
        """Units with the given ids, in original dataset order."""
        wanted = set(unit_ids)
        units = tuple(u for u in self.units if u.unit_id in wanted)
        splits = {u.unit_id: self.splits[u.unit_id] for u in units if u.unit_id in self.splits}
        return LabeledDataset(units=units, splits=splits, metadata=dict(self.metadata))


def _unit_to_record(unit: SentenceUnit) -> dict:
    record = {
        "unit_id": unit.unit_id,
        "doc_id": unit.doc_id,
        "sent_index": unit.sent_index,
        "text": unit.text,
        "context_before": list(unit.context_before),
        "context_after": list(unit.context_after),
        "label": unit.label.value,
        "onion": unit.onion,
    }
    if unit.coder_labels is not None:
        record["coder_labels"] = {c: l.value for c, l in unit.coder_labels.items()}
    return record


def _unit_from_record(record: dict) -> SentenceUnit:
    try:
        label = Label(record["label"])
    except ValueError:
        raise DatasetError(f"unknown label {record.get('label')!r}")
    except KeyError:
        raise DatasetError("missing required key 'label'")
    coder_labels = None
    if record.get("coder_labels") is not None:
        coder_labels = {c: Label(l) for c, l in record["coder_labels"].items()}
    try:
        return SentenceUnit(
            unit_id=record["unit_id"],
            doc_id=record["doc_id"],
            sent_index=int(record["sent_index"]),
            text=record["text"],
            label=label,
            context_before=tuple(record.get("context_before", ())),
            context_after=tuple(record.get("context_after", ())),
            onion=bool(record.get("onion", False)),
            coder_labels=coder_labels,
        )
    except KeyError as exc:
        raise DatasetError(f"missing required key {exc.args[0]!r}")


def load_dataset(path: str | Path) -> LabeledDataset:
    """Load a JSON-lines dataset, validating every record.

    Raises DatasetError naming the offending line for malformed records and
    for duplicate unit ids.
    """
    path = Path(path)
    units: list[SentenceUnit] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})")
            try:
                unit = _unit_from_record(record)
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}")
            if unit.unit_id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate unit_id {unit.unit_id!r}")
            seen.add(unit.unit_id)
            units.append(unit)
    return LabeledDataset(units=tuple(units))


def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    """Write a dataset in the JSON-lines interchange format (split tags excluded)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for unit in ds.units:
            handle.write(json.dumps(_unit_to_record(unit), ensure_ascii=False, sort_keys=True))
            handle.write("\n")


def aggregate_majority(
    coder_labels: Mapping[str, Label], quorum: int
) -> Optional[Label]:
    """Label chosen by at least ``quorum`` coders and strictly more than any other.

    Returns None when no label meets both conditions (ties exclude the unit).
    """
    if not coder_labels:
        raise ValueError("coder_labels must be non-empty")
    if quorum < 1:
        raise ValueError("quorum must be positive")
    if quorum > len(coder_labels):
        raise ValueError(
            f"quorum {quorum} exceeds number of coders {len(coder_labels)}"
        )
    counts = Counter(coder_labels.values()).most_common()
    top_label, top_count = counts[0]
    if top_count < quorum:
        return None
    if len(counts) > 1 and counts[1][1] == top_count:
        return None
    return top_label


@dataclass(frozen=True)
class ReliabilityMatrix:
    """Coders x units grid of nominal category codes; None marks a missing value."""

    values: tuple[tuple[Optional[str], ...], ...]
    level: str = "nominal"

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "values", tuple(tuple(row) for row in self.values)
        )
        if self.level != "nominal":
            raise ValueError(f"unsupported measurement level {self.level!r}")
        if len(self.values) < 2:
            raise ValueError("need at least two coders")
        widths = {len(row) for row in self.values}
        if len(widths) != 1:
            raise ValueError("reliability matrix must be rectangular")
        n_units = widths.pop()
        pairable = any(
            sum(1 for row in self.values if row[u] is not None) >= 2
            for u in range(n_units)
        )
        if not pairable:
            raise ValueError("need at least one unit with two or more values")


@dataclass(frozen=True)
class AlphaResult:
    """Agreement coefficient with a flag for the degenerate all-identical case."""

    value: float
    degenerate: bool = False


def krippendorff_alpha(matrix: ReliabilityMatrix) -> AlphaResult:
    """Nominal-level agreement, 1 - observed/expected disagreement.

    Uses the coincidence-matrix formulation over all pairable values. When
    expected disagreement is zero (every pairable value identical) the
    coefficient is defined as 1.0 and flagged as degenerate.
    """
    coincidence: Counter = Counter()
    totals: Counter = Counter()
    n_units = len(matrix.values[0])
    for u in range(n_units):
        vals = [row[u] for row in matrix.values if row[u] is not None]
        m_u = len(vals)
        if m_u < 2:
            continue
        weight = 1.0 / (m_u - 1)
        for i, a in enumerate(vals):
            for j, b in enumerate(vals):
                if i != j:
                    coincidence[(a, b)] += weight
                    totals[a] += weight
    n = sum(totals.values())
    observed = sum(v for (a, b), v in coincidence.items() if a != b) / n
    expected = sum(
        totals[a] * totals[b]
        for a in totals
        for b in totals
        if a != b
    ) / (n * (n - 1))
    if expected == 0.0:
        return AlphaResult(value=1.0, degenerate=True)
    return AlphaResult(value=1.0 - observed / expected)


def load_reliability_csv(path: str | Path) -> ReliabilityMatrix:
    """Read a coders-x-units CSV; empty cells become missing values."""
    rows: list[tuple[Optional[str], ...]] = []
    with Path(path).open(encoding="utf-8", newline="") as handle:
        for row in csv.reader(handle):
            rows.append(tuple(cell.strip() or None for cell in row))
    return ReliabilityMatrix(values=tuple(rows))


def _exact_fraction(x: float) -> Fraction:
    # Recover the decimal the caller wrote (0.7 -> 7/10) instead of the
    # binary float, so floor arithmetic on counts has no rounding surprises.
    return Fraction(x).limit_denominator(10**6)


def split_dataset(
    ds: LabeledDataset,
    ratios: tuple[float, float, float],
    seed: int,
) -> LabeledDataset:
    """Stratified train/dev/test assignment.

    Per label, each split receives floor(ratio * class size) units and any
    remainder goes to train. Assignment is deterministic given the seed;
    unit contents and order are untouched.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    frac_dev = _exact_fraction(ratios[1])
    frac_test = _exact_fraction(ratios[2])

    rng = random.Random(seed)
    assignment: dict[str, Split] = {}
    for label in LABEL_ORDER:
        members = [u.unit_id for u in ds.units if u.label is label]
        if not members:
            continue
        rng.shuffle(members)
        n = len(members)
        n_dev = floor(frac_dev * n)
        n_test = floor(frac_test * n)
        n_train = n - n_dev - n_test
        for uid in members[:n_train]:
            assignment[uid] = Split.TRAIN
        for uid in members[n_train : n_train + n_dev]:
            assignment[uid] = Split.DEV
        for uid in members[n_train + n_dev :]:
            assignment[uid] = Split.TEST
    return LabeledDataset(
        units=ds.units, splits=assignment, metadata=dict(ds.metadata)
    )


def downsample_no_stance(
    ds: LabeledDataset, share: float, seed: int
) -> LabeledDataset:
    """Subsample no-stance units so they make up at least ``share`` of the result.

    Keeps the smallest number n of no-stance units with n / (n + k) >= share,
    where k is the number of stance units. If the pool is too small, all
    no-stance units are kept and the shortfall is flagged in the metadata.
    """
    if not 0.0 < share < 1.0:
        raise ValueError("share must be strictly between 0 and 1")
    pool = [u.unit_id for u in ds.units if u.label is Label.NO_STANCE]
    if not pool:
        raise ValueError("dataset contains no no-stance units")
    k = len(ds.units) - len(pool)
    frac = _exact_fraction(share)
    needed = ceil(frac * k / (1 - frac))

    metadata = dict(ds.metadata)
    if needed > len(pool):
        logger.warning(
            "no-stance pool too small: need %d units for share %.3f, have %d",
            needed, share, len(pool),
        )
        metadata["no_stance_shortfall"] = "true"
        chosen = set(pool)
    else:
        rng = random.Random(seed)
        chosen = set(rng.sample(pool, needed))

    units = tuple(
        u for u in ds.units if u.label is not Label.NO_STANCE or u.unit_id in chosen
    )
    splits = {u.unit_id: ds.splits[u.unit_id] for u in units if u.unit_id in ds.splits}
    return LabeledDataset(units=units, splits=splits, metadata=metadata)


class NearDomainStance(str, Enum):
    """Three-way stance labels of the near-domain pre-training data."""

    PRO = "pro"
    CONTRA = "contra"
    NEUTRAL = "neutral"


NEAR_DOMAIN_ORDER: tuple[NearDomainStance, ...] = tuple(NearDomainStance)


@dataclass(frozen=True)
class NearDomainExample:
    """A topic-tagged sentence with a pro/contra/neutral stance label."""

    topic: str
    text: str
    stance: NearDomainStance
    context_before: tuple[str, ...] = ()
    context_after: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "context_before", tuple(self.context_before))
        object.__setattr__(self, "context_after", tuple(self.context_after))
        if not self.topic:
            raise DatasetError("near-domain example: topic must be non-empty")
        if not self.text:
            raise DatasetError("near-domain example: text must be non-empty")


def load_near_domain(path: str | Path) -> list[NearDomainExample]:
    """Load near-domain pre-training examples from JSON lines."""
    path = Path(path)
    examples: list[NearDomainExample] = []
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                examples.append(
                    NearDomainExample(
                        topic=record["topic"],
                        text=record["text"],
                        stance=NearDomainStance(record["stance"]),
                        context_before=tuple(record.get("context_before", ())),
                        context_after=tuple(record.get("context_after", ())),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}")
    return examples


def save_near_domain(examples: Sequence[NearDomainExample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for ex in examples:
            record = {
                "topic": ex.topic,
                "text": ex.text,
                "stance": ex.stance.value,
                "context_before": list(ex.context_before),
                "context_after": list(ex.context_after),
            }
            handle.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
            handle.write("\n")
