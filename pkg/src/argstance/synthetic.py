"""Deterministic synthetic corpora for desk-scale runs, demos, and tests.

Each sentence code gets a small family of template sentences built around a
code-specific marker word, which makes the five classes cleanly separable
for a miniature encoder. Person names from a fixed pool appear in a share
of the sentences and contexts, so the name-shuffling preprocessing has
material to work on.
"""

from __future__ import annotations

import random
from typing import Sequence

from .corpus import (
    Label,
    LabeledDataset,
    NearDomainExample,
    NearDomainStance,
    SentenceUnit,
)

PERSON_POOL: tuple[str, ...] = (
    "Anna Berger",
    "Jonas Falk",
    "Miriam Roth",
    "Peter Stein",
    "Clara Weiss",
    "David Lenz",
)

_NEUTRAL_SUBJECTS = ("der minister", "die sprecherin", "der verband", "die fraktion")

_FILLERS = (
    "in der aktuellen lage",
    "nach langer debatte",
    "trotz aller bedenken",
    "mit grossem nachdruck",
    "ohne weitere umwege",
    "im laufenden verfahren",
)

_CLASS_TEMPLATES: dict[Label, str] = {
    Label.ARGUMENT_FOR: "{subject} befürwortet die lieferung {filler} weil sie schutz schafft",
    Label.ARGUMENT_AGAINST: "{subject} verhindert die lieferung {filler} weil sie risiken birgt",
    Label.CLAIM_FOR: "{subject} verlangt die lieferung {filler} sofort",
    Label.CLAIM_AGAINST: "{subject} untersagt die lieferung {filler} entschieden",
    Label.NO_STANCE: "{subject} beschreibt die lieferung {filler} sachlich",
}

_CONTEXT_TEMPLATES = (
    "zuvor sprach {subject} über das thema",
    "die debatte dauerte mehrere stunden",
    "es folgten weitere wortmeldungen",
    "{subject} war ebenfalls anwesend",
    "die sitzung wurde kurz unterbrochen",
)


def _subject(rng: random.Random, person_rate: float) -> str:
    if rng.random() < person_rate:
        return rng.choice(PERSON_POOL)
    return rng.choice(_NEUTRAL_SUBJECTS)


def _context_sentence(rng: random.Random, person_rate: float) -> str:
    template = rng.choice(_CONTEXT_TEMPLATES)
    return template.format(subject=_subject(rng, person_rate))


def make_dataset(
    n_units: int,
    seed: int,
    person_rate: float = 0.5,
    onion_rate: float = 0.12,
) -> LabeledDataset:
    """A balanced five-class dataset of ``n_units`` synthetic sentence units."""
    rng = random.Random(seed)
    units: list[SentenceUnit] = []
    for i in range(n_units):
        label = list(Label)[i % len(Label)]
        text = _CLASS_TEMPLATES[label].format(
            subject=_subject(rng, person_rate), filler=rng.choice(_FILLERS)
        )
        before = tuple(
            _context_sentence(rng, person_rate) for _ in range(rng.randint(0, 2))
        )
        after = tuple(
            _context_sentence(rng, person_rate) for _ in range(rng.randint(0, 2))
        )
        onion = label.has_stance and rng.random() < onion_rate
        units.append(
            SentenceUnit(
                unit_id=f"u{i:05d}",
                doc_id=f"doc{i // 4:04d}",
                sent_index=i % 4,
                text=text,
                label=label,
                context_before=before,
                context_after=after,
                onion=onion,
            )
        )
    return LabeledDataset(units=tuple(units))


def make_dataset_with_counts(
    counts: Sequence[int], seed: int = 0, person_rate: float = 0.0
) -> LabeledDataset:
    """A dataset with the exact per-class sizes given in canonical label order."""
    if len(counts) != len(Label):
        raise ValueError(f"need {len(Label)} class sizes, got {len(counts)}")
    rng = random.Random(seed)
    units: list[SentenceUnit] = []
    i = 0
    for label, count in zip(Label, counts):
        for _ in range(count):
            text = _CLASS_TEMPLATES[label].format(
                subject=_subject(rng, person_rate), filler=rng.choice(_FILLERS)
            )
            units.append(
                SentenceUnit(
                    unit_id=f"u{i:05d}",
                    doc_id=f"doc{i // 4:04d}",
                    sent_index=i % 4,
                    text=text,
                    label=label,
                )
            )
            i += 1
    return LabeledDataset(units=tuple(units))


_NEAR_DOMAIN_TOPICS = ("Tempolimit Autobahn", "Solarpflicht Neubau", "Bargeld Obergrenze")

_STANCE_TEMPLATES: dict[NearDomainStance, str] = {
    NearDomainStance.PRO: "{subject} unterstützt das vorhaben {filler}",
    NearDomainStance.CONTRA: "{subject} bekämpft das vorhaben {filler}",
    NearDomainStance.NEUTRAL: "{subject} erwähnt das vorhaben {filler}",
}


def make_near_domain(n_examples: int, seed: int) -> list[NearDomainExample]:
    """Synthetic topic-tagged pro/contra/neutral examples for pre-training."""
    rng = random.Random(seed)
    examples: list[NearDomainExample] = []
    for i in range(n_examples):
        stance = list(NearDomainStance)[i % len(NearDomainStance)]
        topic = _NEAR_DOMAIN_TOPICS[i % len(_NEAR_DOMAIN_TOPICS)]
        text = _STANCE_TEMPLATES[stance].format(
            subject=rng.choice(_NEUTRAL_SUBJECTS), filler=rng.choice(_FILLERS)
        )
        examples.append(NearDomainExample(topic=topic, text=text, stance=stance))
    return examples
