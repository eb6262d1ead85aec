"""End-to-end training and inference for the two-stage recogniser."""

from __future__ import annotations

import json
import logging
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import Dataset, Sentence, Span, spans_to_boundary_labels
from .encoder import Encoder, ToyEncoder, Vocab, load_adapter
from .region_proposal import (
    RegionCandidate,
    RegionProposer,
    Stage1Config,
    decode_and_pair,
    region_metrics,
    stage1_loss,
)
from .stage2 import (
    Stage2Config,
    Stage2Example,
    Stage2Model,
    make_example,
    sample_random_negatives,
    stage2_loss,
)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    kind: str = "toy"
    hidden_dim: int = 32
    n_layers: int = 2
    max_len: int = 128
    dropout: float = 0.1
    share: bool = False
    adapter: str = ""

    def __post_init__(self):
        if self.kind not in ("toy", "adapter"):
            raise ValueError("encoder kind must be 'toy' or 'adapter'")
        if self.kind == "adapter" and not self.adapter:
            raise ValueError("encoder.adapter must name a 'module:factory' when kind is 'adapter'")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 64
    stage1_epochs: int = 3
    stage2_epochs: int = 3

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass(frozen=True)
class Prediction:
    span: Span
    entityness_prob: float
    type: str
    type_prob: float

    def as_span(self) -> Span:
        return Span(self.span.start, self.span.end, self.type)


@dataclass
class ScoredCandidate:
    """Stage-2 scores of one candidate, kept so thresholds can be re-applied cheaply."""

    span: Span
    entityness_prob: float
    type_probs: list[float]


@dataclass
class TrainingReport:
    stage1_losses: list[float] = field(default_factory=list)
    stage2_losses: list[float] = field(default_factory=list)
    region_precision: float = 0.0
    region_recall: float = 0.0
    example_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def build_encoder(config: EncoderConfig, vocab: Vocab, seed: int) -> Encoder:
    if config.kind == "adapter":
        return load_adapter(config.adapter, config.hidden_dim, config.max_len)
    return ToyEncoder(vocab, config.hidden_dim, config.n_layers, config.max_len, config.dropout, seed)


def build_models(
    vocab: Vocab,
    type_inventory: Sequence[str],
    encoder_config: EncoderConfig,
    stage2_config: Stage2Config,
    seed: int,
) -> tuple[RegionProposer, Stage2Model]:
    torch.manual_seed(seed)
    stage1 = RegionProposer(build_encoder(encoder_config, vocab, seed))
    encoder2 = stage1.encoder if encoder_config.share else build_encoder(encoder_config, vocab, seed + 1)
    stage2 = Stage2Model(encoder2, type_inventory, stage2_config)
    return stage1, stage2


def _optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        params, lr=config.lr, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


# ------------------------------------------------------------------ stage 1

def train_stage1(
    model: RegionProposer,
    dataset: Dataset,
    config: Stage1Config,
    train: TrainConfig,
    seed: int,
) -> list[float]:
    """Fit the boundary classifiers; returns the mean loss of every epoch."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    labels = [spans_to_boundary_labels(s) for s in dataset]
    opt = _optimizer(model.parameters(), train)
    losses = []
    model.train()
    for epoch in range(train.stage1_epochs):
        total, n = 0.0, 0
        for idx in _batches(len(dataset), train.batch_size, rng):
            sents = [dataset[i] for i in idx]
            loss = stage1_loss(model(sents), [labels[i] for i in idx], config)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        losses.append(total / n)
        logger.info("stage1 epoch %d loss %.4f", epoch + 1, losses[-1])
    model.eval()
    return losses


@torch.no_grad()
def propose(
    model: RegionProposer, dataset: Dataset, config: Stage1Config, batch_size: int = 64
) -> list[list[RegionCandidate]]:
    model.eval()
    out = []
    for i in range(0, len(dataset), batch_size):
        sents = list(dataset.sentences[i : i + batch_size])
        for scores in model(sents):
            out.append(decode_and_pair(scores, config))
    return out


# ------------------------------------------------------------------ stage 2

def build_stage2_examples(
    dataset: Dataset,
    candidates: Sequence[Sequence[RegionCandidate | Span]],
    stage1_config: Stage1Config,
    config: Stage2Config,
    seed: int,
) -> tuple[list[Stage2Example], dict[str, int]]:
    """Candidates, then random negatives, then any gold spans the candidates missed."""
    rng = np.random.default_rng(seed)
    examples = []
    counts = Counter()
    for sent, cands in zip(dataset, candidates, strict=True):
        spans = list(dict.fromkeys(getattr(c, "span", c).untyped() for c in cands))
        counts["candidates"] += len(spans)
        examples.extend(make_example(sent, s, config, "candidate") for s in spans)
        negs = sample_random_negatives(
            sent, spans, stage1_config.length_limit, config.random_negatives_per_sentence, rng
        )
        counts["random_negatives"] += len(negs)
        examples.extend(make_example(sent, s, config, "random") for s in negs)
        if config.inject_gold:
            have = {s.region for s in spans}
            missing = sorted({g.untyped() for g in sent.gold if g.region not in have})
            counts["injected_gold"] += len(missing)
            examples.extend(make_example(sent, s, config, "gold") for s in missing)
    counts["examples"] = len(examples)
    counts["entities"] = sum(e.label_is_entity for e in examples)
    counts["non_entities"] = len(examples) - counts["entities"]
    counts["start_correct"] = sum(e.label_start_correct for e in examples)
    counts["end_correct"] = sum(e.label_end_correct for e in examples)
    counts["overlap_typed"] = sum(e.overlap_type is not None for e in examples)
    return examples, dict(counts)


def _group(examples: Sequence[Stage2Example]) -> tuple[list[Sentence], list[int], list[Span]]:
    sentences: list[Sentence] = []
    slot: dict[int, int] = {}
    sent_index = []
    for e in examples:
        key = id(e.sentence)
        if key not in slot:
            slot[key] = len(sentences)
            sentences.append(e.sentence)
        sent_index.append(slot[key])
    return sentences, sent_index, [e.span for e in examples]


def stage2_forward(model: Stage2Model, examples: Sequence[Stage2Example]):
    return model(*_group(examples))


def train_stage2(
    model: Stage2Model,
    examples: Sequence[Stage2Example],
    config: Stage2Config,
    train: TrainConfig,
    seed: int,
) -> list[float]:
    if not any(e.label_is_entity for e in examples):
        raise TrainingError("stage 2 has no positive (entity) examples to learn from")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = _optimizer(model.parameters(), train)
    losses = []
    model.train()
    for epoch in range(train.stage2_epochs):
        total = 0.0
        for idx in _batches(len(examples), train.batch_size, rng):
            batch = [examples[i] for i in idx]
            loss = stage2_loss(batch, stage2_forward(model, batch), config, model.type_inventory)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(examples))
        logger.info("stage2 epoch %d loss %.4f", epoch + 1, losses[-1])
    model.eval()
    return losses


@torch.no_grad()
def score_candidates(
    model: Stage2Model,
    dataset: Dataset,
    candidates: Sequence[Sequence[RegionCandidate | Span]],
    batch_size: int = 64,
) -> list[list[ScoredCandidate]]:
    """Stage-2 probabilities for every candidate; each candidate is scored on its own."""
    model.eval()
    out: list[list[ScoredCandidate]] = [[] for _ in dataset]
    flat = [
        (i, getattr(c, "span", c).untyped())
        for i, cands in enumerate(candidates)
        for c in cands
    ]
    for k in range(0, len(flat), batch_size):
        chunk = flat[k : k + batch_size]
        sent_ids = sorted({i for i, _ in chunk})
        pos = {i: j for j, i in enumerate(sent_ids)}
        res = model([dataset[i] for i in sent_ids], [pos[i] for i, _ in chunk], [s for _, s in chunk])
        ent = res.entityness_prob().tolist()
        types = res.type_probs().tolist()
        for (i, span), e, t in zip(chunk, ent, types):
            out[i].append(ScoredCandidate(span, e, t))
    return out


def select_predictions(
    scored: Iterable[ScoredCandidate], threshold: float, type_inventory: Sequence[str]
) -> list[Prediction]:
    """Keep candidates with entityness >= threshold, typed by their argmax class."""
    best: dict[tuple[int, int], Prediction] = {}
    for sc in scored:
        if sc.entityness_prob < threshold:
            continue
        k = int(np.argmax(sc.type_probs))
        pred = Prediction(sc.span, sc.entityness_prob, type_inventory[k], sc.type_probs[k])
        prev = best.get(sc.span.region)
        if prev is None or pred.entityness_prob > prev.entityness_prob:
            best[sc.span.region] = pred
    return sorted(best.values(), key=lambda p: p.span.region)


def predict_corpus(
    dataset: Dataset,
    stage1: RegionProposer,
    stage2: Stage2Model,
    stage1_config: Stage1Config,
    stage2_config: Stage2Config,
    batch_size: int = 64,
) -> list[list[Prediction]]:
    candidates = propose(stage1, dataset, stage1_config, batch_size)
    scored = score_candidates(stage2, dataset, candidates, batch_size)
    thr = stage2_config.entityness_threshold
    return [select_predictions(s, thr, stage2.type_inventory) for s in scored]


def predict(
    sentence: Sentence,
    stage1: RegionProposer,
    stage2: Stage2Model,
    stage1_config: Stage1Config,
    stage2_config: Stage2Config,
) -> list[Prediction]:
    types = tuple(dict.fromkeys([*stage2.type_inventory, *(g.type for g in sentence.gold)]))
    ds = Dataset((sentence,), types)
    return predict_corpus(ds, stage1, stage2, stage1_config, stage2_config)[0]


# ---------------------------------------------------------------- end to end

def train_end_to_end(
    dataset: Dataset,
    stage1_config: Stage1Config,
    stage2_config: Stage2Config,
    train: TrainConfig,
    seed: int,
    encoder_config: EncoderConfig | None = None,
    vocab: Vocab | None = None,
) -> tuple[RegionProposer, Stage2Model, TrainingReport]:
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    encoder_config = encoder_config or EncoderConfig()
    vocab = vocab or Vocab.from_sentences(dataset)
    stage1, stage2 = build_models(vocab, dataset.type_inventory, encoder_config, stage2_config, seed)
    report = TrainingReport()
    report.stage1_losses = train_stage1(stage1, dataset, stage1_config, train, seed)
    candidates = propose(stage1, dataset, stage1_config, train.batch_size)
    report.region_precision, report.region_recall = region_metrics(candidates, dataset)
    examples, report.example_counts = build_stage2_examples(
        dataset, candidates, stage1_config, stage2_config, seed
    )
    report.stage2_losses = train_stage2(stage2, examples, stage2_config, train, seed)
    return stage1, stage2, report


# --------------------------------------------------------------------- files

def write_predictions(path: str | Path, dataset: Dataset, predictions: Sequence[Sequence[Prediction]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sent, preds in zip(dataset, predictions, strict=True):
            rows = [
                {
                    "start": p.span.start,
                    "end": p.span.end,
                    "type": p.type,
                    "entityness": p.entityness_prob,
                    "type_prob": p.type_prob,
                }
                for p in preds
            ]
            f.write(json.dumps({"sentence_id": sent.id, "predictions": rows}) + "\n")


def read_predictions(path: str | Path, dataset: Dataset) -> list[list[Span]]:
    """Typed prediction spans aligned to ``dataset`` by sentence id.

    Sentences absent from the file get no predictions; ids unknown to the
    dataset raise ``KeyError``.
    """
    pos = {s.id: i for i, s in enumerate(dataset)}
    out: list[list[Span]] = [[] for _ in dataset]
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            sid = rec["sentence_id"]
            if sid not in pos:
                raise KeyError(f"prediction for unknown sentence id {sid!r}")
            out[pos[sid]] = [Span(p["start"], p["end"], p["type"]) for p in rec["predictions"]]
    return out
