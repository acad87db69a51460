"""Tokenized model inputs: contextual, topic-prefixed, and prompt-masked.

The standard input places the target sentence first, then the context
sentences, separated by a dedicated separator token:

    <s> target </s> context-before </s> context-after <end>

Overlong inputs are right-truncated, so the context after is cut first,
then the context before, then the target sentence itself. Topic-prefixed
inputs put the (never truncated) topic in front. Prompt-masked inputs wrap
the contextual input in a pattern containing mask slots that a
verbalizer-based head scores at prediction time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from .corpus import Label, SentenceUnit

ROLE_TARGET = "target"
ROLE_BEFORE = "before"
ROLE_AFTER = "after"
ROLE_TOPIC = "topic"
ROLE_PATTERN = "pattern"
ROLE_SPECIAL = "special"

_ROLES = (ROLE_TARGET, ROLE_BEFORE, ROLE_AFTER, ROLE_TOPIC, ROLE_PATTERN, ROLE_SPECIAL)


class ConfigError(ValueError):
    """Raised for invalid patterns, verbalizers, or encoding configuration."""


class Tokenizer(Protocol):
    """Minimal tokenizer interface the input builders rely on.

    ``encode`` must be deterministic and must not add special tokens; the
    builders insert begin/separator/end markers themselves. All special ids
    are distinct.
    """

    vocab_size: int
    pad_id: int
    begin_id: int
    end_id: int
    sep_id: int
    mask_id: int

    def encode(self, text: str) -> list[int]: ...


class TextWithContext(Protocol):
    """What the input builders need from a unit: the target sentence and
    its surrounding sentences. Sentence units and near-domain examples both
    satisfy this."""

    text: str
    context_before: tuple[str, ...]
    context_after: tuple[str, ...]


class WhitespaceTokenizer:
    """Whitespace tokenizer with an optional subword decomposition table.

    The vocabulary is built from the corpus handed to the constructor.
    Words listed in ``subwords`` are split into the given pieces before
    lookup, so multi-piece words behave like subword-tokenized input.
    Unknown words map to the unk id; the special-token surface forms are
    never produced by ``encode``, so content text cannot inject markers.
    """

    PAD, BEGIN, END, SEP, MASK, UNK = range(6)
    _SPECIAL_SURFACES = ("<pad>", "<s>", "<end>", "</s>", "<mask>", "<unk>")

    def __init__(
        self,
        texts: Iterable[str],
        subwords: Optional[Mapping[str, Sequence[str]]] = None,
    ):
        self.subwords = {w: tuple(p) for w, p in (subwords or {}).items()}
        vocab: set[str] = set()
        for text in texts:
            for word in text.split():
                vocab.update(self._pieces(word))
        vocab -= set(self._SPECIAL_SURFACES)
        self._id_of = {
            piece: i + len(self._SPECIAL_SURFACES) for i, piece in enumerate(sorted(vocab))
        }
        self.pad_id = self.PAD
        self.begin_id = self.BEGIN
        self.end_id = self.END
        self.sep_id = self.SEP
        self.mask_id = self.MASK
        self.unk_id = self.UNK
        self.vocab_size = len(self._id_of) + len(self._SPECIAL_SURFACES)

    def _pieces(self, word: str) -> tuple[str, ...]:
        return self.subwords.get(word, (word,))

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            for piece in self._pieces(word):
                ids.append(self._id_of.get(piece, self.UNK))
        return ids


#: Decomposition of long inflected verbs used by the shipped prompt presets,
#: so that their verbalizers span multiple tokens like subword-tokenized text.
PRESET_SUBWORDS: dict[str, tuple[str, ...]] = {
    "argumentiert": ("argument", "iert"),
    "widerspricht": ("wider", "spr", "icht"),
}


@dataclass(frozen=True)
class Segment:
    """A half-open span [start, end) of the id sequence with a role tag."""

    role: str
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"unknown segment role {self.role!r}")
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid segment span [{self.start}, {self.end})")


@dataclass(frozen=True)
class EncodedInput:
    """A token-id sequence with mask bookkeeping and a role map of its spans."""

    ids: tuple[int, ...]
    mask_positions: tuple[int, ...] = ()
    segments: tuple[Segment, ...] = ()
    truncated_target: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "mask_positions", tuple(self.mask_positions))
        object.__setattr__(self, "segments", tuple(self.segments))
        cursor = 0
        for seg in self.segments:
            if seg.start != cursor:
                raise ValueError("segments must tile the sequence without gaps")
            cursor = seg.end
        if cursor != len(self.ids):
            raise ValueError("segments must cover the full sequence")
        if any(not 0 <= p < len(self.ids) for p in self.mask_positions):
            raise ValueError("mask position out of bounds")

    def __len__(self) -> int:
        return len(self.ids)


def _assemble(
    pieces: Sequence[tuple[str, Sequence[int]]],
    budget: int,
) -> tuple[list[int], list[Segment], bool]:
    """Take tokens piece by piece until the budget is exhausted.

    Later pieces are dropped first, which realizes the truncation order
    context-after, then context-before, then target. Returns the flag for a
    truncated target segment.
    """
    ids: list[int] = []
    segments: list[Segment] = []
    truncated_target = False
    for role, tokens in pieces:
        take = list(tokens[: max(0, budget - len(ids))])
        if role == ROLE_TARGET and len(take) < len(tokens):
            truncated_target = True
        if take:
            segments.append(Segment(role, len(ids), len(ids) + len(take)))
            ids.extend(take)
    return ids, segments, truncated_target


def _context_pieces(
    unit: TextWithContext, tokenizer: Tokenizer
) -> list[tuple[str, Sequence[int]]]:
    return [
        (ROLE_TARGET, tokenizer.encode(unit.text)),
        (ROLE_SPECIAL, [tokenizer.sep_id]),
        (ROLE_BEFORE, tokenizer.encode(" ".join(unit.context_before))),
        (ROLE_SPECIAL, [tokenizer.sep_id]),
        (ROLE_AFTER, tokenizer.encode(" ".join(unit.context_after))),
    ]


def _finish(
    ids: list[int],
    segments: list[Segment],
    tokenizer: Tokenizer,
    truncated_target: bool,
) -> EncodedInput:
    segments.append(Segment(ROLE_SPECIAL, len(ids), len(ids) + 1))
    ids.append(tokenizer.end_id)
    mask_positions = tuple(i for i, t in enumerate(ids) if t == tokenizer.mask_id)
    return EncodedInput(
        ids=tuple(ids),
        mask_positions=mask_positions,
        segments=tuple(segments),
        truncated_target=truncated_target,
    )


def build_standard_input(
    unit: TextWithContext, tokenizer: Tokenizer, max_len: int
) -> EncodedInput:
    """Contextual input: begin, target, sep, context-before, sep, context-after, end."""
    if max_len < 2:
        raise ValueError("max_len must allow at least the begin and end markers")
    pieces = [(ROLE_SPECIAL, [tokenizer.begin_id])] + _context_pieces(unit, tokenizer)
    ids, segments, truncated = _assemble(pieces, budget=max_len - 1)
    return _finish(ids, segments, tokenizer, truncated)


def build_sam_input(
    topic: str, unit: TextWithContext, tokenizer: Tokenizer, max_len: int
) -> EncodedInput:
    """Topic-prefixed contextual input; the topic is never truncated."""
    if not topic.strip():
        raise ValueError("topic must be non-empty")
    topic_ids = tokenizer.encode(topic)
    if 1 + len(topic_ids) + 1 + 1 > max_len:
        raise ValueError(f"topic of {len(topic_ids)} tokens does not fit max_len {max_len}")
    pieces = [
        (ROLE_SPECIAL, [tokenizer.begin_id]),
        (ROLE_TOPIC, topic_ids),
        (ROLE_SPECIAL, [tokenizer.sep_id]),
    ] + _context_pieces(unit, tokenizer)
    ids, segments, truncated = _assemble(pieces, budget=max_len - 1)
    return _finish(ids, segments, tokenizer, truncated)


_MASK_MARKER = "<mask>"
_INPUT_SLOT = "[Input]"


def _parse_pattern(pattern: str) -> list[tuple[str, str]]:
    """Split a pattern string into ("text"|"mask"|"slot", payload) elements."""
    elements: list[tuple[str, str]] = []
    token_re = re.compile(re.escape(_MASK_MARKER) + "|" + re.escape(_INPUT_SLOT))
    cursor = 0
    for match in token_re.finditer(pattern):
        literal = pattern[cursor : match.start()].strip()
        if literal:
            elements.append(("text", literal))
        elements.append(("mask", "") if match.group(0) == _MASK_MARKER else ("slot", ""))
        cursor = match.end()
    tail = pattern[cursor:].strip()
    if tail:
        elements.append(("text", tail))
    return elements


@dataclass(frozen=True)
class PatternVerbalizerPair:
    """A masked pattern template plus per-label verbalizer token sequences.

    ``verbalize`` fills in the tokenizer-dependent fields: the per-label
    token-id sequences and the ordered vocabulary of distinct verbalizer
    tokens, whose size is the output width of the prompt head.
    """

    name: str
    pattern: str
    verbalizers: Mapping[Label, str]
    uniform_token_length: Optional[int] = None
    verbalizer_token_ids: Optional[Mapping[Label, tuple[int, ...]]] = None
    verbalizer_vocab: Optional[tuple[int, ...]] = None

    @property
    def validated(self) -> bool:
        return self.verbalizer_token_ids is not None

    @property
    def mask_count(self) -> int:
        """Number of mask slots, equal to the longest verbalizer in tokens."""
        if not self.validated:
            raise ConfigError(f"pattern set {self.name!r} has not been verbalized")
        return max(len(ids) for ids in self.verbalizer_token_ids.values())

    def vocab_index_rows(self) -> dict[Label, tuple[int, ...]]:
        """Per label, the verbalizer-vocabulary index of each of its tokens."""
        if not self.validated:
            raise ConfigError(f"pattern set {self.name!r} has not been verbalized")
        position = {t: i for i, t in enumerate(self.verbalizer_vocab)}
        return {
            label: tuple(position[t] for t in ids)
            for label, ids in self.verbalizer_token_ids.items()
        }


def verbalize(pvp: PatternVerbalizerPair, tokenizer: Tokenizer) -> PatternVerbalizerPair:
    """Tokenize the verbalizers and validate the pattern against them.

    Checks that every label has a non-empty verbalizer, that no verbalizer
    token is unknown to the tokenizer, that an enforced uniform token length
    holds, and that the pattern contains exactly one input slot and as many
    mask markers as the longest verbalizer has tokens.
    """
    missing = [label for label in Label if not pvp.verbalizers.get(label, "").strip()]
    if missing:
        raise ConfigError(
            f"pattern set {pvp.name!r}: missing verbalizers for {[l.value for l in missing]}"
        )
    token_ids: dict[Label, tuple[int, ...]] = {}
    for label in Label:
        ids = tuple(tokenizer.encode(pvp.verbalizers[label]))
        unk = getattr(tokenizer, "unk_id", None)
        if unk is not None and unk in ids:
            raise ConfigError(
                f"pattern set {pvp.name!r}: verbalizer for {label.value!r} contains "
                f"tokens unknown to the tokenizer"
            )
        if pvp.uniform_token_length is not None and len(ids) != pvp.uniform_token_length:
            raise ConfigError(
                f"pattern set {pvp.name!r}: verbalizer for {label.value!r} tokenizes "
                f"to {len(ids)} tokens, expected {pvp.uniform_token_length}; adjust the "
                f"verbalizers to the active tokenizer"
            )
        token_ids[label] = ids

    vocab: list[int] = []
    for label in Label:
        for t in token_ids[label]:
            if t not in vocab:
                vocab.append(t)

    elements = _parse_pattern(pvp.pattern)
    slots = sum(1 for kind, _ in elements if kind == "slot")
    if slots != 1:
        raise ConfigError(
            f"pattern set {pvp.name!r}: pattern must contain exactly one {_INPUT_SLOT} slot"
        )
    masks = sum(1 for kind, _ in elements if kind == "mask")
    longest = max(len(ids) for ids in token_ids.values())
    if masks != longest:
        raise ConfigError(
            f"pattern set {pvp.name!r}: pattern has {masks} mask markers but the "
            f"longest verbalizer has {longest} tokens"
        )
    return replace(
        pvp, verbalizer_token_ids=token_ids, verbalizer_vocab=tuple(vocab)
    )


def build_pet_input(
    unit: TextWithContext,
    pvp: PatternVerbalizerPair,
    tokenizer: Tokenizer,
    max_len: int,
    topic: Optional[str] = None,
) -> EncodedInput:
    """Prompt-masked input: pattern tokens are protected, the input slot holds
    the contextual input body truncated by the standard rule.

    With ``topic`` given, the sequence is prefixed by the topic and a
    separator ahead of the pattern.
    """
    if not pvp.validated:
        raise ConfigError(f"pattern set {pvp.name!r} must be verbalized first")
    elements = _parse_pattern(pvp.pattern)

    prefix: list[tuple[str, Sequence[int]]] = [(ROLE_SPECIAL, [tokenizer.begin_id])]
    if topic is not None:
        if not topic.strip():
            raise ValueError("topic must be non-empty")
        prefix.append((ROLE_TOPIC, tokenizer.encode(topic)))
        prefix.append((ROLE_SPECIAL, [tokenizer.sep_id]))

    pattern_pieces: list[tuple[str, Sequence[int]]] = []
    for kind, payload in elements:
        if kind == "text":
            pattern_pieces.append((ROLE_PATTERN, tokenizer.encode(payload)))
        elif kind == "mask":
            pattern_pieces.append((ROLE_PATTERN, [tokenizer.mask_id]))

    protected = sum(len(t) for _, t in prefix) + sum(len(t) for _, t in pattern_pieces) + 1
    body_budget = max_len - protected
    if body_budget < 1:
        raise ConfigError(
            f"pattern set {pvp.name!r}: protected tokens leave no room for the input "
            f"body at max_len {max_len}"
        )
    body_ids, body_segments, truncated = _assemble(
        _context_pieces(unit, tokenizer), budget=body_budget
    )

    ids: list[int] = []
    segments: list[Segment] = []
    pattern_iter = iter(pattern_pieces)

    def emit(role: str, tokens: Sequence[int]) -> None:
        if tokens:
            segments.append(Segment(role, len(ids), len(ids) + len(tokens)))
            ids.extend(tokens)

    for role, tokens in prefix:
        emit(role, tokens)
    for kind, payload in elements:
        if kind in ("text", "mask"):
            role, tokens = next(pattern_iter)
            emit(role, tokens)
        else:
            offset = len(ids)
            ids.extend(body_ids)
            segments.extend(
                Segment(s.role, s.start + offset, s.end + offset) for s in body_segments
            )
    return _finish(ids, segments, tokenizer, truncated)


def naive_pvp() -> PatternVerbalizerPair:
    """Two-mask preset: concept word plus stance word per class."""
    return PatternVerbalizerPair(
        name="naive",
        pattern="Dies ist ein <mask> <mask> Waffenlieferungen an die Ukraine: [Input]",
        verbalizers={
            Label.ARGUMENT_FOR: "argument für",
            Label.ARGUMENT_AGAINST: "argument gegen",
            Label.CLAIM_FOR: "claim für",
            Label.CLAIM_AGAINST: "claim gegen",
            Label.NO_STANCE: "Satz ohne",
        },
        uniform_token_length=2,
    )


def elaborate_pvp() -> PatternVerbalizerPair:
    """Three-mask preset with verbalizers of unequal token length."""
    return PatternVerbalizerPair(
        name="elaborate",
        pattern="Dieser Satz <mask> <mask> <mask> Waffenlieferungen an die Ukraine: [Input]",
        verbalizers={
            Label.ARGUMENT_FOR: "argumentiert für",
            Label.ARGUMENT_AGAINST: "argumentiert gegen",
            Label.CLAIM_FOR: "fordert",
            Label.CLAIM_AGAINST: "widerspricht",
            Label.NO_STANCE: "ist neutral zu",
        },
    )


PVP_PRESETS = {"naive": naive_pvp, "elaborate": elaborate_pvp}


def parse_pvp_config(text: str) -> PatternVerbalizerPair:
    """Parse a pattern set from flat ``key = value`` lines.

    Required keys: ``pattern`` plus one entry per label value. Optional:
    ``name``, ``uniform_token_length``.
    """
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    if "pattern" not in entries:
        raise ConfigError("pattern set config is missing the 'pattern' key")
    verbalizers = {}
    for label in Label:
        if label.value not in entries:
            raise ConfigError(f"pattern set config is missing verbalizer {label.value!r}")
        verbalizers[label] = entries[label.value]
    uniform = entries.get("uniform_token_length")
    return PatternVerbalizerPair(
        name=entries.get("name", "custom"),
        pattern=entries["pattern"],
        verbalizers=verbalizers,
        uniform_token_length=int(uniform) if uniform else None,
    )


def load_pvp(name_or_path: str) -> PatternVerbalizerPair:
    """A named preset, or a pattern set parsed from a config file path."""
    if name_or_path in PVP_PRESETS:
        return PVP_PRESETS[name_or_path]()
    from pathlib import Path

    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(
            f"unknown pattern set {name_or_path!r}; expected one of "
            f"{sorted(PVP_PRESETS)} or a config file path"
        )
    return parse_pvp_config(path.read_text(encoding="utf-8"))


def pvp_texts(pvp: PatternVerbalizerPair) -> list[str]:
    """All literal texts of a pattern set, for vocabulary construction."""
    texts = [payload for kind, payload in _parse_pattern(pvp.pattern) if kind == "text"]
    texts.extend(pvp.verbalizers.values())
    return texts


def tokenizer_from_units(
    units: Iterable[SentenceUnit],
    extra_texts: Iterable[str] = (),
    subwords: Optional[Mapping[str, Sequence[str]]] = None,
) -> WhitespaceTokenizer:
    """Build a whitespace tokenizer covering a corpus plus auxiliary texts."""
    texts: list[str] = []
    for unit in units:
        texts.extend(content for _, content in unit.text_fields())
    texts.extend(extra_texts)
    return WhitespaceTokenizer(texts, subwords=PRESET_SUBWORDS if subwords is None else subwords)
