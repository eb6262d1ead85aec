"""Stage 1: per-word start/end scoring and pairing into region candidates."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .corpus import Dataset, Sentence, Span, spans_to_boundary_labels
from .encoder import Encoder, EncoderOutput, gather_rows

PROB_EPS = 1e-7

LENGTH_LIMITS = {"flat": 6, "ace": 12, "genia": 8}


@dataclass
class Stage1Config:
    negative_weight: float = 0.5
    positive_weight: float = 0.5
    decode_threshold: float = 0.5
    length_limit: int = 6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.negative_weight <= 0 or self.positive_weight <= 0:
            raise ValueError("class weights must be positive")
        if not math.isclose(self.negative_weight + self.positive_weight, 1.0, abs_tol=1e-9):
            raise ValueError("class weights must sum to 1")
        if not 0.0 < self.decode_threshold < 1.0:
            raise ValueError("decode_threshold must lie in (0, 1)")
        if self.length_limit < 1:
            raise ValueError("length_limit must be >= 1")

    @classmethod
    def preset(cls, corpus_style: str, **kwargs) -> Stage1Config:
        return cls(length_limit=LENGTH_LIMITS[corpus_style], **kwargs)


@dataclass
class BoundaryScores:
    """Positive-class probabilities: ``n_words`` start slots, ``n_words + 1`` end slots."""

    start_prob: torch.Tensor
    end_prob: torch.Tensor


@dataclass(frozen=True)
class RegionCandidate:
    span: Span
    start_prob: float
    end_prob: float


def word_row_index(sentences: Sequence[Sentence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Hidden-row index of every word slot plus the sentinel slot.

    Returns ``(index, mask)`` of shape ``(batch, max_words + 1)``; slot
    ``n_words`` of each sentence points at its sentinel row.
    """
    width = max(s.n_words for s in sentences) + 1
    index = torch.zeros(len(sentences), width, dtype=torch.long)
    mask = torch.zeros(len(sentences), width, dtype=torch.bool)
    for b, sent in enumerate(sentences):
        rows = list(sent.word_starts) + [len(sent.subtokens)]
        index[b, : len(rows)] = torch.tensor(rows)
        mask[b, : len(rows)] = True
    return index, mask


class RegionProposer(nn.Module):
    """Encoder plus two independent linear start/end classifiers."""

    def __init__(self, encoder: Encoder):
        super().__init__()
        self.encoder = encoder
        self.start_head = nn.Linear(encoder.hidden_dim, 2)
        self.end_head = nn.Linear(encoder.hidden_dim, 2)

    def forward(self, sentences: Sequence[Sentence]) -> list[BoundaryScores]:
        return self.score(self.encoder(sentences), sentences)

    def score(self, encoded: EncoderOutput, sentences: Sequence[Sentence]) -> list[BoundaryScores]:
        index, _ = word_row_index(sentences)
        rows = gather_rows(encoded.hidden, index)
        p_start = torch.softmax(self.start_head(rows), dim=-1)[..., 1]
        p_end = torch.softmax(self.end_head(rows), dim=-1)[..., 1]
        return [
            BoundaryScores(p_start[b, : s.n_words], p_end[b, : s.n_words + 1])
            for b, s in enumerate(sentences)
        ]


def score_boundaries(model: RegionProposer, encoded: EncoderOutput, sentence: Sentence) -> BoundaryScores:
    return model.score(encoded, [sentence])[0]


def _weighted_ce(prob: torch.Tensor, labels: torch.Tensor, config: Stage1Config) -> torch.Tensor:
    p = prob.clamp(PROB_EPS, 1 - PROB_EPS)
    pos = -config.positive_weight * torch.log(p)
    neg = -config.negative_weight * torch.log(1 - p)
    return torch.where(labels, pos, neg).mean()


def stage1_loss(
    scores: BoundaryScores | Sequence[BoundaryScores],
    labels: tuple[Sequence[bool], Sequence[bool]] | Sequence[tuple[Sequence[bool], Sequence[bool]]],
    config: Stage1Config,
) -> torch.Tensor:
    """Class-weighted two-class cross-entropy, start and end terms summed.

    Each term is the mean over all word slots of the batch of
    ``w[y] * -log p(y)``; the weights are applied as-is, not renormalised.
    """
    if isinstance(scores, BoundaryScores):
        scores, labels = [scores], [labels]
    for sc, (ls, le) in zip(scores, labels):
        if len(ls) != len(sc.start_prob) or len(le) != len(sc.end_prob):
            raise ValueError("label and score lengths disagree")
    start_p = torch.cat([s.start_prob for s in scores])
    end_p = torch.cat([s.end_prob for s in scores])
    start_y = torch.tensor([bool(v) for ls, _ in labels for v in ls])
    end_y = torch.tensor([bool(v) for _, le in labels for v in le])
    return _weighted_ce(start_p, start_y, config) + _weighted_ce(end_p, end_y, config)


def decode_and_pair(scores: BoundaryScores, config: Stage1Config) -> list[RegionCandidate]:
    """Every (start, end) pair of above-threshold slots with ``0 < end - start <= L``."""
    start_p = [float(p) for p in scores.start_prob]
    end_p = [float(p) for p in scores.end_prob]
    starts = [i for i, p in enumerate(start_p) if p >= config.decode_threshold]
    ends = [j for j, p in enumerate(end_p) if p >= config.decode_threshold]
    return [
        RegionCandidate(Span(i, j), start_p[i], end_p[j])
        for i in starts
        for j in ends
        if 0 < j - i <= config.length_limit
    ]


def label_scores(sentence: Sentence) -> BoundaryScores:
    """Perfect scores read off the gold boundary labels."""
    start, end = spans_to_boundary_labels(sentence)
    return BoundaryScores(torch.tensor(start, dtype=torch.float64), torch.tensor(end, dtype=torch.float64))


def region_metrics(
    candidates: Sequence[Iterable[RegionCandidate | Span]], dataset: Dataset
) -> tuple[float, float]:
    """Type-blind exact-region precision and recall."""
    n_cand = matched = n_gold = 0
    for cands, sent in zip(candidates, dataset, strict=True):
        regions = {(c.span if isinstance(c, RegionCandidate) else c).region for c in cands}
        gold = sent.gold_regions
        n_cand += len(regions)
        matched += len(regions & gold)
        n_gold += len(gold)
    if n_cand == 0:
        precision = 0.0 if n_gold else 1.0
    else:
        precision = matched / n_cand
    recall = matched / n_gold if n_gold else 1.0
    return precision, recall


def write_candidates(path: str | Path, dataset: Dataset, candidates: Sequence[Sequence[RegionCandidate]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sent, cands in zip(dataset, candidates, strict=True):
            rows = [
                {"start": c.span.start, "end": c.span.end, "start_prob": c.start_prob, "end_prob": c.end_prob}
                for c in cands
            ]
            f.write(json.dumps({"sentence_id": sent.id, "candidates": rows}) + "\n")


def read_candidates(path: str | Path) -> dict:
    """Map sentence id to its candidate list."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["sentence_id"]] = [
                RegionCandidate(Span(c["start"], c["end"]), c["start_prob"], c["end_prob"])
                for c in rec["candidates"]
            ]
    return out
