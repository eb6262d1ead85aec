"""Two-stage span-based named entity recognition: region proposals, then entityness and type scoring."""

from .corpus import Dataset, Sentence, Span, load_conll, load_json_spans, make_sentence
from .metrics import ErrorReport, EvalResult, classify_errors, evaluate
from .pipeline import EncoderConfig, Prediction, TrainConfig, predict, predict_corpus, train_end_to_end
from .region_proposal import Stage1Config
from .stage2 import Stage2Config

__all__ = [
    "Dataset",
    "EncoderConfig",
    "ErrorReport",
    "EvalResult",
    "Prediction",
    "Sentence",
    "Span",
    "Stage1Config",
    "Stage2Config",
    "TrainConfig",
    "classify_errors",
    "evaluate",
    "load_conll",
    "load_json_spans",
    "make_sentence",
    "predict",
    "predict_corpus",
    "train_end_to_end",
]
