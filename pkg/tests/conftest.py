import numpy as np
import pytest
import torch

from ner_rpn.corpus import Dataset, Span, make_sentence
from ner_rpn.encoder import AdapterEncoder, ToyEncoder, Vocab
from ner_rpn.pipeline import EncoderConfig, TrainConfig
from ner_rpn.region_proposal import RegionProposer, Stage1Config
from ner_rpn.stage2 import Stage2Config, Stage2Model, make_example
from ner_rpn.synthetic import synthetic_corpus


def split_long(word):
    """Stand-in subword tokenizer: words longer than four characters get two pieces."""
    return [word] if len(word) <= 4 else [word[:4], "##" + word[4:]]


@pytest.fixture
def tiny_dataset():
    rows = [
        (["john", "smith", "visited", "paris"], [Span(0, 2, "PER"), Span(3, 4, "LOC")]),
        (["university", "of", "berlin", "hired", "mary"], [Span(0, 3, "ORG"), Span(2, 3, "LOC"), Span(4, 5, "PER")]),
        (["the", "tokyo", "marathon", "ended"], [Span(0, 3, "MISC"), Span(1, 2, "LOC")]),
        (["nothing", "here"], []),
    ]
    sents = [make_sentence(w, g, split_long, id=i) for i, (w, g) in enumerate(rows)]
    return Dataset.from_sentences(sents, ("LOC", "MISC", "ORG", "PER"))


@pytest.fixture
def tiny_models(tiny_dataset):
    """Float64 stage-1 and stage-2 models small enough for element-wise gradient checks."""
    torch.manual_seed(0)
    vocab = Vocab.from_sentences(tiny_dataset)
    enc1 = ToyEncoder(vocab, hidden_dim=8, n_layers=2, max_len=16, dropout=0.1, seed=1)
    enc2 = ToyEncoder(vocab, hidden_dim=8, n_layers=2, max_len=16, dropout=0.1, seed=2)
    cfg = Stage2Config(n_heads=4, head_dim=2, feat_dim=6)
    stage1 = RegionProposer(enc1).double().eval()
    stage2 = Stage2Model(enc2, tiny_dataset.type_inventory, cfg).double().eval()
    return stage1, stage2, cfg


@pytest.fixture
def four_examples(tiny_dataset):
    """A fixed 4-example stage-2 batch: two entities, a boundary miss and a random negative."""
    s0, s1, s2, _ = tiny_dataset
    return [
        make_example(s0, Span(0, 2)),
        make_example(s1, Span(0, 3)),
        make_example(s1, Span(1, 3)),
        make_example(s2, Span(2, 4)),
    ]


@pytest.fixture(scope="session")
def overfit_corpus():
    return synthetic_corpus(50, seed=0)


@pytest.fixture(scope="session")
def overfit_settings():
    return dict(
        stage1=Stage1Config(),
        stage2=Stage2Config(),
        train=TrainConfig(lr=3e-3, batch_size=16, stage1_epochs=40, stage2_epochs=40),
        encoder=EncoderConfig(),
    )


class FixedHidden:
    """Adapter callable returning a preset hidden matrix per sentence length."""

    def __init__(self, hidden):
        self.hidden = torch.as_tensor(hidden, dtype=torch.float64)

    def __call__(self, sentence):
        return self.hidden[: len(sentence.subtokens) + 1]


def fixed_encoder(hidden, max_len=32):
    h = torch.as_tensor(hidden, dtype=torch.float64)
    return AdapterEncoder(FixedHidden(h), h.shape[1], max_len)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
