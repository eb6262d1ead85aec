"""Stage 2: re-score each region candidate for boundary correctness, entityness and type.

Training objective::

    L = alpha * (L_start + L_end) + beta * L_entityness + L_type

The three binary terms are batch-mean two-class cross-entropies; ``L_type`` is a
categorical cross-entropy summed over true-entity examples (plus optional
down-weighted terms for near-miss regions) and divided by the full batch size.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Sentence, Span
from .encoder import Encoder, EncoderOutput, gather_rows

CHANNEL_SCALES = (0.25, 0.5, 1.0, 2.0)


@dataclass
class Stage2Config:
    alpha: float = 0.5
    beta: float = 1.0
    n_heads: int = 32
    head_dim: int = 8
    feat_dim: int = 64
    entityness_threshold: float = 0.5
    random_negatives_per_sentence: int = 1
    overlap_type_loss_weight: float = 0.0
    overlap_min_iou: float = 0.5
    inject_gold: bool = True
    concat_probs: bool = False
    disable_boundary_heads: bool = False
    disable_max_pool: bool = False
    channel_scale: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.overlap_type_loss_weight < 0:
            raise ValueError("alpha, beta and overlap_type_loss_weight must be non-negative")
        if min(self.n_heads, self.head_dim, self.feat_dim) < 1:
            raise ValueError("n_heads, head_dim and feat_dim must be positive")
        if not 0.0 <= self.entityness_threshold <= 1.0:
            raise ValueError("entityness_threshold must lie in [0, 1]")
        if self.random_negatives_per_sentence < 0:
            raise ValueError("random_negatives_per_sentence must be non-negative")
        if self.channel_scale not in CHANNEL_SCALES:
            raise ValueError(f"channel_scale must be one of {CHANNEL_SCALES}")
        if not 0.0 < self.overlap_min_iou <= 1.0:
            raise ValueError("overlap_min_iou must lie in (0, 1]")

    @property
    def heads(self) -> int:
        return max(1, round(self.n_heads * self.channel_scale))

    @property
    def features(self) -> int:
        return max(1, round(self.feat_dim * self.channel_scale))

    @property
    def boundary_weight(self) -> float:
        return 0.0 if self.disable_boundary_heads else self.alpha


# ------------------------------------------------------------------ labels

@dataclass(frozen=True)
class Labels:
    start_correct: bool
    end_correct: bool
    is_entity: bool
    type: str | None


@dataclass(frozen=True)
class Stage2Example:
    sentence: Sentence
    span: Span
    label_start_correct: bool
    label_end_correct: bool
    label_is_entity: bool
    label_type: str | None = None
    overlap_type: str | None = None
    source: str = "candidate"

    def __post_init__(self):
        if self.label_is_entity:
            if not (self.label_start_correct and self.label_end_correct and self.label_type):
                raise ValueError("an entity example needs both boundaries correct and a type")
        elif self.label_type is not None:
            raise ValueError("a non-entity example cannot carry a type")


def label_example(span: Span, gold: Iterable[Span]) -> Labels:
    gold = list(gold)
    exact = [g for g in gold if g.region == span.region]
    if len({g.type for g in exact}) > 1:
        raise ValueError(f"region {span.region} has gold spans of several types")
    return Labels(
        start_correct=any(g.start == span.start for g in gold),
        end_correct=any(g.end == span.end for g in gold),
        is_entity=bool(exact),
        type=exact[0].type if exact else None,
    )


def overlap_target(span: Span, gold: Iterable[Span], min_iou: float = 0.5) -> str | None:
    """Type of the gold span a near-miss region should borrow, if any.

    The target is the gold span with the largest intersection (ties go to the
    leftmost start); it only counts when intersection / union >= ``min_iou``.
    Exact matches return ``None``: they are plain entities.
    """
    best = None
    for g in sorted(gold, key=lambda g: (g.start, g.end)):
        if g.region == span.region:
            return None
        inter = span.overlap(g)
        if inter and (best is None or inter > span.overlap(best)):
            best = g
    if best is None:
        return None
    inter = span.overlap(best)
    union = len(span) + len(best) - inter
    return best.type if inter / union >= min_iou else None


def make_example(sentence: Sentence, span: Span, config: Stage2Config | None = None, source: str = "candidate") -> Stage2Example:
    span = span.untyped()
    lab = label_example(span, sentence.gold)
    overlap = None
    if config is not None and config.overlap_type_loss_weight > 0 and not lab.is_entity:
        overlap = overlap_target(span, sentence.gold, config.overlap_min_iou)
    return Stage2Example(
        sentence, span, lab.start_correct, lab.end_correct, lab.is_entity, lab.type, overlap, source
    )


def sample_random_negatives(
    sentence: Sentence,
    candidates: Iterable[Span],
    length_limit: int,
    k: int,
    rng: np.random.Generator,
) -> list[Span]:
    """Draw up to ``k`` distinct spans of length ``1..length_limit`` uniformly,
    excluding exact candidate and gold regions."""
    taken = {c.region for c in candidates} | sentence.gold_regions
    n = sentence.n_words
    allowed = [
        (i, j)
        for i in range(n)
        for j in range(i + 1, min(n, i + length_limit) + 1)
        if (i, j) not in taken
    ]
    if not allowed or k <= 0:
        return []
    picks = rng.choice(len(allowed), size=min(k, len(allowed)), replace=False)
    return [Span(*allowed[p]) for p in sorted(picks)]


# ------------------------------------------------------------------- model

@dataclass
class Stage2Output:
    """Batched logits, one row per example."""

    start_logits: torch.Tensor
    end_logits: torch.Tensor
    entityness_logits: torch.Tensor
    type_logits: torch.Tensor

    def __len__(self) -> int:
        return self.start_logits.size(0)

    def entityness_prob(self) -> torch.Tensor:
        return torch.softmax(self.entityness_logits, dim=-1)[:, 1]

    def type_probs(self) -> torch.Tensor:
        return torch.softmax(self.type_logits, dim=-1)


class BoundaryUnit(nn.Module):
    """Multi-head dot products between the two rows straddling a boundary."""

    def __init__(self, hidden_dim: int, n_heads: int, head_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.left = nn.Linear(hidden_dim, n_heads * head_dim, bias=False)
        self.right = nn.Linear(hidden_dim, n_heads * head_dim, bias=False)
        self.fc = nn.Linear(n_heads, 2)

    def features(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        shape = (*left.shape[:-1], self.n_heads, self.head_dim)
        return (self.left(left).view(shape) * self.right(right).view(shape)).sum(-1)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(left, right))


class SpanHead(nn.Module):
    """Per-row linear + ReLU, max over the span's rows, then a linear classifier."""

    def __init__(self, hidden_dim: int, feat_dim: int, n_out: int, aux_dim: int = 0):
        super().__init__()
        self.proj = nn.Linear(hidden_dim, feat_dim)
        self.out = nn.Linear(feat_dim + aux_dim, n_out)
        self.aux_dim = aux_dim

    def pooled(self, rows: torch.Tensor, mask: torch.Tensor, max_pool: bool = True) -> torch.Tensor:
        feats = F.relu(self.proj(rows))
        if not max_pool:
            return feats[:, 0]
        return feats.masked_fill(~mask[..., None], float("-inf")).max(dim=1).values

    def forward(
        self,
        rows: torch.Tensor,
        mask: torch.Tensor,
        aux: torch.Tensor | None = None,
        max_pool: bool = True,
    ) -> torch.Tensor:
        if (aux is None) != (self.aux_dim == 0):
            raise ValueError("aux logits must be given exactly when the head was built with aux_dim > 0")
        x = self.pooled(rows, mask, max_pool)
        if aux is not None:
            x = torch.cat([x, aux], dim=-1)
        return self.out(x)


def slot_rows(sentences: Sequence[Sentence]) -> torch.Tensor:
    """Row index into ``[bos; hidden]`` for every boundary slot.

    Slot 0 is the begin-of-sentence row, slot ``w + 1`` is word ``w``'s first
    subtoken and slot ``n_words + 1`` is the sentinel.
    """
    width = max(s.n_words for s in sentences) + 2
    index = torch.zeros(len(sentences), width, dtype=torch.long)
    for b, sent in enumerate(sentences):
        rows = [0] + [w + 1 for w in sent.word_starts] + [len(sent.subtokens) + 1]
        index[b, : len(rows)] = torch.tensor(rows)
    return index


class Stage2Model(nn.Module):
    def __init__(self, encoder: Encoder, type_inventory: Sequence[str], config: Stage2Config):
        super().__init__()
        self.encoder = encoder
        self.config = config
        self.type_inventory = tuple(type_inventory)
        h = encoder.hidden_dim
        self.bos = nn.Parameter(torch.randn(h) * 0.02)
        self.start_unit = BoundaryUnit(h, config.heads, config.head_dim)
        self.end_unit = BoundaryUnit(h, config.heads, config.head_dim)
        aux_dim = 0 if config.disable_boundary_heads else 4
        self.entity_head = SpanHead(h, config.features, 2, aux_dim)
        self.type_head = SpanHead(h, config.features, len(self.type_inventory))

    def forward(self, sentences: Sequence[Sentence], sent_index: Sequence[int], spans: Sequence[Span]) -> Stage2Output:
        """Score ``spans[i]`` in ``sentences[sent_index[i]]``."""
        return self.score(self.encoder(sentences), sentences, sent_index, spans)

    def score(
        self,
        encoded: EncoderOutput,
        sentences: Sequence[Sentence],
        sent_index: Sequence[int],
        spans: Sequence[Span],
    ) -> Stage2Output:
        hidden = encoded.hidden
        bos = self.bos.to(hidden.dtype).expand(hidden.size(0), 1, -1)
        ext = torch.cat([bos, hidden], dim=1)[torch.as_tensor(list(sent_index), dtype=torch.long)]
        slots = slot_rows(sentences)[torch.as_tensor(list(sent_index), dtype=torch.long)]

        starts = torch.tensor([s.start for s in spans])
        ends = torch.tensor([s.end for s in spans])
        width = int((ends - starts).max())
        offsets = torch.arange(width)
        inside = offsets[None] < (ends - starts)[:, None]
        span_slots = torch.where(inside, starts[:, None] + 1 + offsets[None], starts[:, None] + 1)

        bound = torch.stack([starts, starts + 1, ends, ends + 1], dim=1)
        bound_rows = gather_rows(ext, slots.gather(1, bound))
        rows = gather_rows(ext, slots.gather(1, span_slots))

        start_logits = self.start_unit(bound_rows[:, 0], bound_rows[:, 1])
        end_logits = self.end_unit(bound_rows[:, 2], bound_rows[:, 3])
        max_pool = not self.config.disable_max_pool
        aux = None
        if not self.config.disable_boundary_heads:
            aux = torch.cat([start_logits, end_logits], dim=-1)
            if self.config.concat_probs:
                aux = torch.cat([start_logits.softmax(-1), end_logits.softmax(-1)], dim=-1)
        entity_logits = self.entity_head(rows, inside, aux, max_pool)
        type_logits = self.type_head(rows, inside, None, max_pool)
        return Stage2Output(start_logits, end_logits, entity_logits, type_logits)


def boundary_unit(model: Stage2Model, encoded: EncoderOutput, sentence: Sentence, span: Span, side: str) -> torch.Tensor:
    out = model.score(encoded, [sentence], [0], [span])
    if side == "start":
        return out.start_logits[0]
    if side == "end":
        return out.end_logits[0]
    raise ValueError(f"side must be 'start' or 'end', got {side!r}")


# -------------------------------------------------------------------- loss

def combine_losses(l_start, l_end, l_entity, l_type, config: Stage2Config):
    return config.boundary_weight * (l_start + l_end) + config.beta * l_entity + l_type


def _targets(examples: Sequence[Stage2Example], attr: str) -> torch.Tensor:
    return torch.tensor([int(getattr(e, attr)) for e in examples], dtype=torch.long)


def stage2_loss_terms(
    examples: Sequence[Stage2Example],
    output: Stage2Output,
    config: Stage2Config,
    type_inventory: Sequence[str],
) -> dict[str, torch.Tensor]:
    n = len(examples)
    if n != len(output):
        raise ValueError("one output row per example required")
    type_id = {t: i for i, t in enumerate(type_inventory)}
    terms = {
        "start": F.cross_entropy(output.start_logits, _targets(examples, "label_start_correct")),
        "end": F.cross_entropy(output.end_logits, _targets(examples, "label_end_correct")),
        "entityness": F.cross_entropy(output.entityness_logits, _targets(examples, "label_is_entity")),
    }
    log_p = F.log_softmax(output.type_logits, dim=-1)
    weights, targets = [], []
    for e in examples:
        if e.label_is_entity:
            weights.append(1.0)
            targets.append(type_id[e.label_type])
        elif e.overlap_type is not None and config.overlap_type_loss_weight > 0:
            weights.append(config.overlap_type_loss_weight)
            targets.append(type_id[e.overlap_type])
        else:
            weights.append(0.0)
            targets.append(0)
    w = torch.tensor(weights, dtype=log_p.dtype)
    if w.any():
        nll = -log_p.gather(1, torch.tensor(targets)[:, None])[:, 0]
        terms["type"] = (w * nll).sum() / n
    else:
        terms["type"] = log_p.new_zeros(())
    return terms


def stage2_loss(
    examples: Sequence[Stage2Example],
    output: Stage2Output,
    config: Stage2Config,
    type_inventory: Sequence[str],
) -> torch.Tensor:
    t = stage2_loss_terms(examples, output, config, type_inventory)
    return combine_losses(t["start"], t["end"], t["entityness"], t["type"], config)


def overlap_type_loss(
    example: Stage2Example,
    type_logits: torch.Tensor,
    config: Stage2Config,
    type_inventory: Sequence[str],
) -> torch.Tensor:
    """Down-weighted type cross-entropy for one near-miss example (unnormalised)."""
    if config.overlap_type_loss_weight == 0 or example.overlap_type is None:
        return type_logits.new_zeros(())
    target = type_inventory.index(example.overlap_type)
    return config.overlap_type_loss_weight * -F.log_softmax(type_logits, dim=-1)[target]


# ------------------------------------------------------------------- dumps

def write_examples(path: str | Path, examples: Iterable[Stage2Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in examples:
            rec = {
                "sentence_id": e.sentence.id,
                "start": e.span.start,
                "end": e.span.end,
                "start_correct": e.label_start_correct,
                "end_correct": e.label_end_correct,
                "is_entity": e.label_is_entity,
                "type": e.label_type,
                "overlap_type": e.overlap_type,
                "source": e.source,
            }
            f.write(json.dumps(rec) + "\n")
