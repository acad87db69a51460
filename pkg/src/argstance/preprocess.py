"""Bias-removal transforms and few-shot sampling protocols.

Two label/text transforms prepare the data: replacing recognized person
names with random names drawn from the corpus-wide pool (removes the
association between individuals and stances), and flipping the stance of
units flagged as containing a second, contradicting actor. Two samplers
build few-shot training subsets: label-stratified and unstratified.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, replace
from fractions import Fraction
from math import floor
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .corpus import Label, LabeledDataset, SentenceUnit

logger = logging.getLogger(__name__)

#: Sweep proportions used by the shipped experiment protocols.
PROTOCOL_PROPORTIONS: tuple[float, ...] = (0.025, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0)


@dataclass(frozen=True)
class PersonSpan:
    """A recognized person mention inside one text field."""

    start: int
    end: int
    surface: str
    field: str = "text"

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span offsets [{self.start}, {self.end})")


class PersonRecognizer(Protocol):
    """Pluggable person-name recognizer.

    ``recognize`` must be deterministic and return non-overlapping spans
    sorted by start offset.
    """

    def recognize(self, text: str) -> list[PersonSpan]: ...


class DictionaryRecognizer:
    """Recognizes person names from a fixed surface list via word-boundary matching.

    Longer surfaces win at the same position, so "Annalena Baerbock" is
    matched as one span even when "Baerbock" is also listed.
    """

    def __init__(self, surfaces: Iterable[str]):
        self.surfaces = sorted({s.strip() for s in surfaces if s.strip()})
        if self.surfaces:
            ordered = sorted(self.surfaces, key=len, reverse=True)
            pattern = "|".join(re.escape(s) for s in ordered)
            self._regex = re.compile(rf"\b(?:{pattern})\b")
        else:
            self._regex = None

    @classmethod
    def from_file(cls, path: str | Path) -> "DictionaryRecognizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)

    def recognize(self, text: str) -> list[PersonSpan]:
        if self._regex is None:
            return []
        return [
            PersonSpan(start=m.start(), end=m.end(), surface=m.group(0))
            for m in self._regex.finditer(text)
        ]


def _checked_spans(spans: Sequence[PersonSpan], text: str) -> list[PersonSpan]:
    previous_end = 0
    for span in spans:
        if span.start < previous_end:
            raise ValueError("recognizer returned overlapping or unsorted spans")
        if span.end > len(text) or text[span.start : span.end] != span.surface:
            raise ValueError(
                f"recognizer span {span.surface!r} does not match text at "
                f"[{span.start}, {span.end})"
            )
        previous_end = span.end
    return list(spans)


def _replace_spans(text: str, spans: Sequence[PersonSpan], mapping: dict[str, str]) -> str:
    # Right-to-left so earlier offsets stay valid.
    for span in reversed(spans):
        text = text[: span.start] + mapping[span.surface] + text[span.end :]
    return text


def shuffle_persons(
    ds: LabeledDataset, recognizer: PersonRecognizer, seed: int
) -> LabeledDataset:
    """Replace each person mention with a random name from the corpus-wide pool.

    The pool is the set of distinct person surfaces recognized anywhere in
    the dataset (target sentences and contexts). Within one unit, every
    occurrence of the same surface receives the same sampled replacement;
    across units the mapping is resampled. Labels and all non-span text are
    unchanged. Deterministic given the seed.
    """
    unit_spans: dict[str, dict[str, list[PersonSpan]]] = {}
    pool: set[str] = set()
    for unit in ds.units:
        per_field: dict[str, list[PersonSpan]] = {}
        for field_name, content in unit.text_fields():
            spans = _checked_spans(recognizer.recognize(content), content)
            if spans:
                per_field[field_name] = spans
                pool.update(s.surface for s in spans)
        unit_spans[unit.unit_id] = per_field

    if not pool:
        logger.warning("person shuffle: no person mentions recognized, dataset unchanged")
        return ds

    choices = sorted(pool)
    rng = random.Random(seed)
    new_units: list[SentenceUnit] = []
    for unit in ds.units:
        per_field = unit_spans[unit.unit_id]
        if not per_field:
            new_units.append(unit)
            continue
        mapping: dict[str, str] = {}
        for field_name, _ in unit.text_fields():
            for span in per_field.get(field_name, ()):
                if span.surface not in mapping:
                    mapping[span.surface] = rng.choice(choices)
        text = _replace_spans(unit.text, per_field.get("text", ()), mapping)
        before = tuple(
            _replace_spans(s, per_field.get(f"context_before[{i}]", ()), mapping)
            for i, s in enumerate(unit.context_before)
        )
        after = tuple(
            _replace_spans(s, per_field.get(f"context_after[{i}]", ()), mapping)
            for i, s in enumerate(unit.context_after)
        )
        new_units.append(
            replace(unit, text=text, context_before=before, context_after=after)
        )
    return LabeledDataset(
        units=tuple(new_units), splits=dict(ds.splits), metadata=dict(ds.metadata)
    )


_STANCE_FLIP = {
    Label.ARGUMENT_FOR: Label.ARGUMENT_AGAINST,
    Label.ARGUMENT_AGAINST: Label.ARGUMENT_FOR,
    Label.CLAIM_FOR: Label.CLAIM_AGAINST,
    Label.CLAIM_AGAINST: Label.CLAIM_FOR,
}


def swap_onion(ds: LabeledDataset) -> LabeledDataset:
    """Flip for/against on units flagged as onion-structured.

    The claim/argument concept is preserved, no-stance units are never
    flipped, and unflagged units are untouched. Applying the swap twice
    restores the original labels.
    """
    units = tuple(
        replace(u, label=_STANCE_FLIP[u.label]) if u.onion else u for u in ds.units
    )
    return LabeledDataset(
        units=units, splits=dict(ds.splits), metadata=dict(ds.metadata)
    )


@dataclass(frozen=True)
class FewShotPlan:
    """One cell of a few-shot sweep: proportion, sampling mode, seeding."""

    proportion: float
    mode: str  # "stratified" or "tfs"
    seed: int
    repetitions: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.proportion <= 1.0:
            raise ValueError("proportion must be in (0, 1]")
        if self.mode not in ("stratified", "tfs"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be positive")
        if not any(abs(self.proportion - p) < 1e-12 for p in PROTOCOL_PROPORTIONS):
            logger.warning(
                "proportion %s is outside the standard sweep grid %s",
                self.proportion, PROTOCOL_PROPORTIONS,
            )


def _exact_fraction(x: float) -> Fraction:
    return Fraction(x).limit_denominator(10**6)


def sample_stratified(
    train: LabeledDataset, proportion: float, seed: int
) -> LabeledDataset:
    """Label-stratified subsample: floor(proportion * class size) per label, minimum 1.

    Uniform without replacement within each label; deterministic given the
    seed; original unit order is preserved in the result.
    """
    if not 0.0 < proportion <= 1.0:
        raise ValueError("proportion must be in (0, 1]")
    if not train.units:
        raise ValueError("cannot sample from an empty dataset")
    frac = _exact_fraction(proportion)
    rng = random.Random(seed)
    chosen: list[str] = []
    for label in Label:
        members = [u.unit_id for u in train.units if u.label is label]
        if not members:
            continue
        size = max(1, floor(frac * len(members)))
        chosen.extend(rng.sample(members, size))
    return train.subset(chosen)


def sample_tfs(
    train: LabeledDataset, proportion: float, seed: int
) -> LabeledDataset:
    """Unstratified subsample of floor(proportion * dataset size) units.

    Ignores labels entirely, simulating coding random sentences without
    knowledge of the label distribution.
    """
    if not 0.0 < proportion <= 1.0:
        raise ValueError("proportion must be in (0, 1]")
    size = floor(_exact_fraction(proportion) * len(train.units))
    if size == 0:
        raise ValueError(
            f"proportion {proportion} yields an empty sample on {len(train.units)} units"
        )
    rng = random.Random(seed)
    chosen = rng.sample([u.unit_id for u in train.units], size)
    return train.subset(chosen)
