"""Contextual subtoken encoders.

Every encoder maps a batch of sentences to hidden states of shape
``(batch, max_subtokens + 1, hidden_dim)``: row ``n_subtokens`` of each sentence
is the end-of-sentence sentinel, rows past it are padding.
"""

from __future__ import annotations

import importlib
import math
from collections.abc import Callable, Iterable, Sequence

import torch
import torch.nn as nn

from .corpus import Sentence

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"


class SentenceTooLong(ValueError):
    pass


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK, EOS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sentence]) -> Vocab:
        vocab = cls()
        for sent in sentences:
            for tok in sent.subtokens:
                vocab.add(tok)
        return vocab


class EncoderOutput:
    """Batched hidden states plus the per-sentence subtoken counts.

    ``hidden[b, :lengths[b] + 1]`` is the valid part of sentence ``b``
    (its subtokens followed by the sentinel row).
    """

    def __init__(self, hidden: torch.Tensor, lengths: Sequence[int]):
        self.hidden = hidden
        self.lengths = list(lengths)

    def __len__(self) -> int:
        return len(self.lengths)

    def __getitem__(self, b: int) -> torch.Tensor:
        return self.hidden[b, : self.lengths[b] + 1]


class Encoder(nn.Module):
    """Base class: subclasses implement :meth:`forward` over a list of sentences."""

    hidden_dim: int
    max_len: int

    def check_length(self, sentence: Sentence) -> None:
        if len(sentence.subtokens) > self.max_len:
            raise SentenceTooLong(
                f"sentence has {len(sentence.subtokens)} subtokens, encoder maximum is {self.max_len}"
            )

    def encode(self, sentence: Sentence) -> torch.Tensor:
        """Hidden states of one sentence, ``(n_subtokens + 1, hidden_dim)``."""
        return self([sentence])[0]


class AttentionBlock(nn.Module):
    def __init__(self, dim: int, dropout: float):
        super().__init__()
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        scores = q @ k.transpose(1, 2) / math.sqrt(x.size(-1))
        scores = scores.masked_fill(pad_mask[:, None, :], float("-inf"))
        mixed = self.out(torch.softmax(scores, dim=-1) @ v)
        x = self.norm1(x + self.dropout(mixed))
        return self.norm2(x + self.dropout(self.ff(x)))


class ToyEncoder(Encoder):
    """Token + position embeddings followed by single-head self-attention blocks.

    The sentinel row is the ``<eos>`` embedding run through the same blocks.
    """

    def __init__(
        self,
        vocab: Vocab,
        hidden_dim: int = 32,
        n_layers: int = 2,
        max_len: int = 128,
        dropout: float = 0.1,
        seed: int = 0,
    ):
        super().__init__()
        self.vocab = vocab
        self.hidden_dim = hidden_dim
        self.max_len = max_len
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.tok_emb = nn.Embedding(len(vocab), hidden_dim)
        self.pos_emb = nn.Embedding(max_len + 1, hidden_dim)
        self.blocks = nn.ModuleList(AttentionBlock(hidden_dim, dropout) for _ in range(n_layers))
        self.dropout = nn.Dropout(dropout)
        torch.random.set_rng_state(gen_state)

    def token_ids(self, sentences: Sequence[Sentence]) -> tuple[torch.Tensor, list[int]]:
        lengths = [len(s.subtokens) for s in sentences]
        width = max(lengths) + 1
        ids = torch.full((len(sentences), width), self.vocab.stoi[PAD], dtype=torch.long)
        for b, sent in enumerate(sentences):
            self.check_length(sent)
            ids[b, : lengths[b]] = torch.tensor([self.vocab[t] for t in sent.subtokens], dtype=torch.long)
            ids[b, lengths[b]] = self.vocab.stoi[EOS]
        return ids, lengths

    def forward(self, sentences: Sequence[Sentence]) -> EncoderOutput:
        ids, lengths = self.token_ids(sentences)
        pos = torch.arange(ids.size(1))
        x = self.dropout(self.tok_emb(ids) + self.pos_emb(pos)[None])
        pad_mask = ids == self.vocab.stoi[PAD]
        for block in self.blocks:
            x = block(x, pad_mask)
        return EncoderOutput(x, lengths)


class AdapterEncoder(Encoder):
    """Wrap an external module mapping one sentence to ``(n_subtokens + 1, dim)`` states.

    This is the seam for pretrained encoders: the wrapped callable owns its own
    tokenisation-to-id mapping and sentinel handling.
    """

    def __init__(self, module: Callable[[Sentence], torch.Tensor], hidden_dim: int, max_len: int = 512):
        super().__init__()
        self.module = module
        self.hidden_dim = hidden_dim
        self.max_len = max_len

    def forward(self, sentences: Sequence[Sentence]) -> EncoderOutput:
        rows = []
        for sent in sentences:
            self.check_length(sent)
            h = self.module(sent)
            if h.shape != (len(sent.subtokens) + 1, self.hidden_dim):
                raise ValueError(
                    f"adapter returned shape {tuple(h.shape)}, "
                    f"expected {(len(sent.subtokens) + 1, self.hidden_dim)}"
                )
            rows.append(h)
        lengths = [len(s.subtokens) for s in sentences]
        hidden = nn.utils.rnn.pad_sequence(rows, batch_first=True)
        return EncoderOutput(hidden, lengths)


def load_adapter(spec: str, hidden_dim: int, max_len: int) -> AdapterEncoder:
    """Build an :class:`AdapterEncoder` from ``"package.module:factory"``.

    The factory is called with no arguments and must return the wrapped module.
    """
    mod_name, _, attr = spec.partition(":")
    factory = getattr(importlib.import_module(mod_name), attr)
    return AdapterEncoder(factory(), hidden_dim, max_len)


def gather_rows(hidden: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """``hidden[b, index[b, ...]]`` for a batched index tensor of any trailing shape."""
    b = hidden.size(0)
    flat = index.reshape(b, -1)
    out = hidden.gather(1, flat[..., None].expand(-1, -1, hidden.size(-1)))
    return out.reshape(*index.shape, hidden.size(-1))
