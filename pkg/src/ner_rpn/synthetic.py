"""Small generated corpora with flat and nested entities (four types)."""

from __future__ import annotations

import numpy as np

from .corpus import Dataset, Span, make_sentence

TYPES = ("LOC", "MISC", "ORG", "PER")

FIRST = ["john", "mary", "alice", "omar", "anna", "carlos", "li", "sara"]
LAST = ["smith", "chen", "garcia", "khan", "novak", "ito"]
PLACES = ["paris", "berlin", "tokyo", "lima", "cairo", "oslo", "texas", "kenya"]
COMPANIES = ["acme", "globex", "initech", "umbrella", "hooli", "vandelay"]
SUFFIXES = ["corp", "inc", "group"]
EVENTS = ["olympics", "grammys", "worldcup", "expo"]

# Each template is a list of literal words and slot names; nested slots emit an
# outer entity plus the LOC inside it.
FLAT_TEMPLATES = [
    ["PER", "visited", "LOC", "on", "monday"],
    ["PER", "joined", "ORG", "last", "year"],
    ["ORG", "opened", "an", "office", "in", "LOC"],
    ["the", "MISC", "were", "held", "in", "LOC"],
    ["PER", "and", "PER", "met", "in", "LOC"],
    ["officials", "said", "ORG", "would", "sponsor", "the", "MISC"],
    ["PER", "watched", "the", "MISC", "with", "PER"],
    ["shares", "of", "ORG", "fell", "sharply"],
]
NESTED_TEMPLATES = [
    ["UNIV", "hired", "PER"],
    ["PER", "studied", "at", "UNIV"],
    ["CITYORG", "approved", "the", "plan"],
    ["RACE", "drew", "large", "crowds"],
    ["PER", "won", "RACE", "again"],
]


def _fill(slot: str, rng: np.random.Generator) -> tuple[list[str], list[tuple[int, int, str]]]:
    """Words for one slot plus spans relative to the slot start."""
    pick = lambda xs: xs[rng.integers(len(xs))]  # noqa: E731
    if slot == "PER":
        words = [pick(FIRST), pick(LAST)] if rng.random() < 0.6 else [pick(FIRST)]
        return words, [(0, len(words), "PER")]
    if slot == "LOC":
        return [pick(PLACES)], [(0, 1, "LOC")]
    if slot == "ORG":
        words = [pick(COMPANIES), pick(SUFFIXES)] if rng.random() < 0.5 else [pick(COMPANIES)]
        return words, [(0, len(words), "ORG")]
    if slot == "MISC":
        return [pick(EVENTS)], [(0, 1, "MISC")]
    if slot == "UNIV":
        return ["university", "of", pick(PLACES)], [(0, 3, "ORG"), (2, 3, "LOC")]
    if slot == "CITYORG":
        return [pick(PLACES), "city", "council"], [(0, 3, "ORG"), (0, 1, "LOC")]
    if slot == "RACE":
        return ["the", pick(PLACES), "marathon"], [(0, 3, "MISC"), (1, 2, "LOC")]
    return [slot], []


def render(template: list[str], rng: np.random.Generator, id=None):
    words: list[str] = []
    spans = []
    for slot in template:
        w, rel = _fill(slot, rng)
        spans.extend(Span(len(words) + s, len(words) + e, t) for s, e, t in rel)
        words.extend(w)
    return make_sentence(words, spans, id=id)


def synthetic_corpus(n_sentences: int = 50, seed: int = 0, nested_every: int = 4) -> Dataset:
    """``n_sentences`` sentences; every ``nested_every``-th uses a nested template."""
    rng = np.random.default_rng(seed)
    sentences = []
    for i in range(n_sentences):
        pool = NESTED_TEMPLATES if nested_every and i % nested_every == 0 else FLAT_TEMPLATES
        sentences.append(render(pool[rng.integers(len(pool))], rng, id=i))
    return Dataset.from_sentences(sentences, TYPES)


def nested_pairs(dataset: Dataset) -> int:
    """Number of (outer, inner) gold pairs where one span strictly contains another."""
    n = 0
    for sent in dataset:
        for a in sent.gold:
            for b in sent.gold:
                if a != b and a.start <= b.start and b.end <= a.end:
                    n += 1
    return n
