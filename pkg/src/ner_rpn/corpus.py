"""Sentences, spans and the two corpus formats (CoNLL IOB and JSON-lines spans).

Spans are half-open word intervals ``[start, end)``.  Boundary labels follow the
``<End>``-on-the-next-word convention: an entity ``[s, e)`` puts its end label on
slot ``e``, and the end-label array carries one extra sentinel slot so entities
that touch the sentence end are representable.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

Tokenizer = Callable[[str], Sequence[str]]


class ConllParseError(ValueError):
    """Malformed IOB tag sequence; ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class SpanRecordError(ValueError):
    """A JSON-lines record that violates the span invariants."""


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int
    type: str | None = None

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    @property
    def region(self) -> tuple[int, int]:
        return (self.start, self.end)

    def untyped(self) -> Span:
        return Span(self.start, self.end)

    def overlap(self, other: Span) -> int:
        return max(0, min(self.end, other.end) - max(self.start, other.start))


def identity_tokenizer(word: str) -> list[str]:
    return [word]


@dataclass(frozen=True)
class Sentence:
    words: tuple[str, ...]
    subtokens: tuple[str, ...]
    word_starts: tuple[int, ...]
    gold: frozenset[Span] = frozenset()
    id: str | int | None = None

    def __post_init__(self):
        n = len(self.words)
        if len(self.word_starts) != n:
            raise ValueError("word_starts must have one entry per word")
        if any(b <= a for a, b in zip(self.word_starts, self.word_starts[1:])):
            raise ValueError("word_starts must be strictly increasing")
        if n and (self.word_starts[0] != 0 or self.word_starts[-1] >= len(self.subtokens)):
            raise ValueError("word_starts out of range of subtokens")
        for span in self.gold:
            if span.end > n:
                raise ValueError(f"gold span {span} exceeds sentence length {n}")

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def first_subtoken_mask(self) -> tuple[bool, ...]:
        starts = set(self.word_starts)
        return tuple(i in starts for i in range(len(self.subtokens)))

    @property
    def gold_regions(self) -> frozenset[tuple[int, int]]:
        return frozenset(s.region for s in self.gold)


def make_sentence(
    words: Sequence[str],
    gold: Iterable[Span] = (),
    tokenizer: Tokenizer | None = None,
    id: str | int | None = None,
) -> Sentence:
    """Build a sentence, aligning words to subtokens with ``tokenizer``.

    A tokenizer returning no pieces for a word falls back to the word itself so
    every word owns at least one subtoken.
    """
    tokenizer = tokenizer or identity_tokenizer
    subtokens: list[str] = []
    word_starts: list[int] = []
    for word in words:
        pieces = list(tokenizer(word)) or [word]
        word_starts.append(len(subtokens))
        subtokens.extend(pieces)
    return Sentence(tuple(words), tuple(subtokens), tuple(word_starts), frozenset(gold), id)


@dataclass(frozen=True)
class Dataset:
    sentences: tuple[Sentence, ...]
    type_inventory: tuple[str, ...]
    rejected: tuple[tuple[int, str], ...] = field(default=(), compare=False)

    def __post_init__(self):
        known = set(self.type_inventory)
        for sent in self.sentences:
            for span in sent.gold:
                if span.type not in known:
                    raise ValueError(f"gold type {span.type!r} not in type inventory")

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    @classmethod
    def from_sentences(
        cls,
        sentences: Iterable[Sentence],
        type_inventory: Iterable[str] | None = None,
        rejected: Iterable[tuple[int, str]] = (),
    ) -> Dataset:
        sentences = tuple(sentences)
        if type_inventory is None:
            type_inventory = sorted({s.type for sent in sentences for s in sent.gold})
        return cls(sentences, tuple(type_inventory), tuple(rejected))

    def subset(self, indices: Iterable[int]) -> Dataset:
        return Dataset(tuple(self.sentences[i] for i in indices), self.type_inventory)

    def n_gold(self) -> int:
        return sum(len(s.gold) for s in self.sentences)


def _drop_overlong(sentences: list[Sentence], max_len: int | None) -> list[Sentence]:
    if max_len is None:
        return sentences
    kept = [s for s in sentences if len(s.subtokens) <= max_len]
    if len(kept) < len(sentences):
        logger.warning(
            "dropped %d sentence(s) longer than %d subtokens", len(sentences) - len(kept), max_len
        )
    return kept


# --------------------------------------------------------------------------- IOB

def _split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, sep, etype = tag.partition("-")
    if not sep or prefix not in ("B", "I") or not etype:
        raise ValueError(f"unrecognised tag {tag!r}")
    return prefix, etype


def _detect_scheme(tag_rows: list[list[tuple[str, int]]]) -> str:
    """IOB1 if some chunk opens with I- and every B- follows a same-type tag."""
    opens_with_i = False
    b_after_other = False
    for row in tag_rows:
        prev = None
        for tag, _ in row:
            prefix, etype = _split_tag(tag)
            if prefix == "I" and prev != etype:
                opens_with_i = True
            if prefix == "B" and prev != etype:
                b_after_other = True
            prev = etype
    return "iob1" if opens_with_i and not b_after_other else "iob2"


def decode_iob(tags: Sequence[str], scheme: str = "iob2", linenos: Sequence[int] | None = None) -> list[Span]:
    """Decode a tag sequence into typed spans with exclusive ends."""
    spans: list[Span] = []
    start = None
    cur = None
    for i, tag in enumerate(tags):
        lineno = linenos[i] if linenos is not None else i + 1
        try:
            prefix, etype = _split_tag(tag)
        except ValueError as e:
            raise ConllParseError(str(e), lineno) from None
        if prefix == "O":
            if cur is not None:
                spans.append(Span(start, i, cur))
            start, cur = None, None
        elif prefix == "B":
            if cur is not None:
                spans.append(Span(start, i, cur))
            start, cur = i, etype
        else:
            if cur == etype:
                continue
            if scheme == "iob2":
                raise ConllParseError(f"I-{etype} without preceding B-{etype}/I-{etype}", lineno)
            if cur is not None:
                spans.append(Span(start, i, cur))
            start, cur = i, etype
    if cur is not None:
        spans.append(Span(start, len(tags), cur))
    return spans


def encode_iob2(n_words: int, spans: Iterable[Span]) -> list[str]:
    """IOB2 tags for a flat (non-overlapping) span set."""
    tags = ["O"] * n_words
    for span in sorted(spans):
        if any(t != "O" for t in tags[span.start:span.end]):
            raise ValueError("IOB cannot encode overlapping spans")
        tags[span.start] = f"B-{span.type}"
        for i in range(span.start + 1, span.end):
            tags[i] = f"I-{span.type}"
    return tags


def load_conll(
    path: str | Path,
    scheme: str = "auto",
    tokenizer: Tokenizer | None = None,
    max_len: int | None = None,
) -> Dataset:
    """Read a 4-column CoNLL-2003 file (token POS chunk NER).

    ``scheme`` is ``"iob1"``, ``"iob2"`` or ``"auto"``.  Raises
    :class:`ConllParseError` on malformed tags under IOB2.
    """
    rows: list[list[tuple[str, str, int]]] = []
    cur: list[tuple[str, str, int]] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                if cur:
                    rows.append(cur)
                    cur = []
                continue
            if line.startswith("-DOCSTART-"):
                continue
            cols = line.split()
            if len(cols) < 2:
                raise ConllParseError(f"expected token and tag columns, got {line!r}", lineno)
            cur.append((cols[0], cols[-1], lineno))
    if cur:
        rows.append(cur)

    if scheme == "auto":
        try:
            scheme = _detect_scheme([[(t, n) for _, t, n in r] for r in rows])
        except ValueError:
            scheme = "iob2"
    if scheme not in ("iob1", "iob2"):
        raise ValueError(f"unknown tag scheme {scheme!r}")

    sentences = []
    for i, row in enumerate(rows):
        words = [w for w, _, _ in row]
        spans = decode_iob([t for _, t, _ in row], scheme, [n for _, _, n in row])
        sentences.append(make_sentence(words, spans, tokenizer, id=i))
    return Dataset.from_sentences(_drop_overlong(sentences, max_len))


def write_conll(dataset: Dataset, path: str | Path) -> None:
    """Write a flat dataset as IOB2 with placeholder POS/chunk columns."""
    with open(path, "w", encoding="utf-8") as f:
        for sent in dataset:
            for word, tag in zip(sent.words, encode_iob2(sent.n_words, sent.gold)):
                f.write(f"{word} _ _ {tag}\n")
            f.write("\n")


# ----------------------------------------------------------------- JSON-lines

def _record_to_sentence(rec: dict, lineno: int, tokenizer: Tokenizer | None) -> Sentence:
    tokens = rec.get("tokens")
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise SpanRecordError(f"line {lineno}: 'tokens' must be a list of strings")
    n = len(tokens)
    seen: dict[tuple[int, int], str] = {}
    spans = []
    for ent in rec.get("entities", []):
        start, end, etype = ent["start"], ent["end"], ent["type"]
        if not (isinstance(start, int) and isinstance(end, int) and 0 <= start < end <= n):
            raise SpanRecordError(f"line {lineno}: entity [{start}, {end}) out of range for {n} tokens")
        prev = seen.get((start, end))
        if prev is not None:
            if prev == etype:
                logger.warning("line %d: duplicate entity [%d, %d) %s dropped", lineno, start, end, etype)
                continue
            raise SpanRecordError(
                f"line {lineno}: region [{start}, {end}) labelled with two types ({prev}, {etype})"
            )
        seen[(start, end)] = etype
        spans.append(Span(start, end, etype))
    return make_sentence(tokens, spans, tokenizer, id=rec.get("id", lineno - 1))


def load_json_spans(
    path: str | Path,
    tokenizer: Tokenizer | None = None,
    max_len: int | None = None,
    strict: bool = False,
) -> Dataset:
    """Read one ``{"tokens": [...], "entities": [...]}`` record per line.

    Invalid records are skipped with a warning and listed in
    ``Dataset.rejected``; with ``strict=True`` the first one raises.
    """
    sentences = []
    rejected = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                sentences.append(_record_to_sentence(json.loads(line), lineno, tokenizer))
            except SpanRecordError as e:
                if strict:
                    raise
                logger.warning("rejected record: %s", e)
                rejected.append((lineno, str(e)))
    if rejected:
        logger.warning("%d record(s) rejected from %s", len(rejected), path)
    return Dataset.from_sentences(_drop_overlong(sentences, max_len), rejected=rejected)


def write_json_spans(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sent in dataset:
            ents = [{"start": s.start, "end": s.end, "type": s.type} for s in sorted(sent.gold)]
            rec = {"id": sent.id, "tokens": list(sent.words), "entities": ents}
            f.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path, fmt: str = "auto", **kwargs) -> Dataset:
    """Dispatch on ``fmt`` (``conll`` / ``jsonl``); ``auto`` uses the file suffix."""
    path = Path(path)
    if fmt == "auto":
        fmt = "jsonl" if path.suffix in (".jsonl", ".json") else "conll"
    if fmt == "jsonl":
        return load_json_spans(path, **kwargs)
    if fmt == "conll":
        kwargs.pop("strict", None)
        return load_conll(path, **kwargs)
    raise ValueError(f"unknown dataset format {fmt!r}")


# ------------------------------------------------------------------- labels

def spans_to_boundary_labels(sentence: Sentence) -> tuple[list[bool], list[bool]]:
    """Per-word start labels and per-slot end labels (``n_words + 1`` slots)."""
    n = sentence.n_words
    start = [False] * n
    end = [False] * (n + 1)
    for span in sentence.gold:
        start[span.start] = True
        end[span.end] = True
    return start, end


def length_coverage(dataset: Dataset, limit: int) -> float:
    """Fraction of gold spans whose length is at most ``limit``."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    lengths = [len(s) for sent in dataset for s in sent.gold]
    if not lengths:
        return 1.0
    return sum(n <= limit for n in lengths) / len(lengths)
