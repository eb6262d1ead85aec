"""Exact-match NER scoring and error profiling."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Dataset, Span

logger = logging.getLogger(__name__)

ERROR_CLASSES = (
    "TypeError",
    "BoundaryTypeCorrect",
    "BoundaryTypeWrong",
    "OverTrigger",
    "UnderTrigger",
    "DoubleBoundaryOverlap",
)
PREDICTION_SIDE = tuple(c for c in ERROR_CLASSES if c != "UnderTrigger")

METRICS_HEADER = ["scope", "type", "precision", "recall", "f1", "tp", "pred", "gold"]
ERRORS_HEADER = ["class", "count", "fraction"]


def prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    per_type: dict[str, tuple[float, float, float]]
    counts: tuple[int, int, int]
    per_type_counts: dict[str, tuple[int, int, int]] = field(default_factory=dict)


def _as_spans(preds: Iterable) -> set[Span]:
    return {p.as_span() if hasattr(p, "as_span") else p for p in preds}


def evaluate(predictions: Sequence[Iterable], dataset: Dataset) -> EvalResult:
    """Micro P/R/F1 over exact ``(start, end, type)`` matches plus a per-type breakdown.

    ``predictions[i]`` holds typed :class:`Span` objects (or anything with an
    ``as_span()`` method) for ``dataset[i]``.
    """
    tp = Counter()
    n_pred = Counter()
    n_gold = Counter()
    for preds, sent in zip(predictions, dataset, strict=True):
        pset = _as_spans(preds)
        for s in pset:
            n_pred[s.type] += 1
        for g in sent.gold:
            n_gold[g.type] += 1
        for s in pset & sent.gold:
            tp[s.type] += 1
    types = sorted(set(n_pred) | set(n_gold), key=str)
    per_type_counts = {t: (tp[t], n_pred[t], n_gold[t]) for t in types}
    per_type = {t: prf(*c) for t, c in per_type_counts.items()}
    counts = (sum(tp.values()), sum(n_pred.values()), sum(n_gold.values()))
    return EvalResult(*prf(*counts), per_type, counts, per_type_counts)


# ------------------------------------------------------------ error taxonomy

@dataclass
class ErrorReport:
    counts: dict[str, int] = field(default_factory=lambda: dict.fromkeys(ERROR_CLASSES, 0))

    @property
    def total_errors(self) -> int:
        return sum(self.counts.values())

    def fraction(self, cls: str) -> float:
        total = self.total_errors
        return self.counts[cls] / total if total else 0.0

    def merge(self, other: ErrorReport) -> ErrorReport:
        return ErrorReport({c: self.counts[c] + other.counts[c] for c in ERROR_CLASSES})


def _shares_one_boundary(p: Span, g: Span) -> bool:
    return (p.start == g.start) != (p.end == g.end)


def _best_gold(pred: Span, golds: Iterable[Span], consumed: set[Span]) -> Span | None:
    """Max overlap, ties to the leftmost start; unconsumed gold preferred."""
    golds = list(golds)
    if not golds:
        return None
    fresh = [g for g in golds if g not in consumed] or golds
    return min(fresh, key=lambda g: (-pred.overlap(g), g.start, g.end, str(g.type)))


def classify_sentence(preds: Iterable[Span], gold: Iterable[Span]) -> tuple[ErrorReport, dict[Span, str]]:
    """Error classes for one sentence; also returns each erroneous item's class."""
    preds = sorted(set(preds), key=lambda s: (s.start, s.end, str(s.type)))
    gold = sorted(set(gold), key=lambda s: (s.start, s.end, str(s.type)))
    report = ErrorReport()
    assigned: dict[Span, str] = {}

    correct = set(preds) & set(gold)
    consumed = set(correct)
    remaining = [p for p in preds if p not in correct]

    def assign(p: Span, cls: str) -> None:
        report.counts[cls] += 1
        assigned[p] = cls

    # exact region, wrong type
    rest = []
    for p in remaining:
        g = _best_gold(p, [g for g in gold if g.region == p.region], consumed)
        if g is None:
            rest.append(p)
            continue
        consumed.add(g)
        assign(p, "TypeError")
    remaining, rest = rest, []

    # exactly one boundary right
    for p in remaining:
        g = _best_gold(p, [g for g in gold if _shares_one_boundary(p, g)], consumed)
        if g is None:
            rest.append(p)
            continue
        consumed.add(g)
        assign(p, "BoundaryTypeCorrect" if p.type == g.type else "BoundaryTypeWrong")

    # both boundaries wrong
    for p in rest:
        assign(p, "DoubleBoundaryOverlap" if any(p.overlap(g) for g in gold) else "OverTrigger")

    for g in gold:
        if not any(p.overlap(g) for p in preds):
            report.counts["UnderTrigger"] += 1
            assigned[g] = "UnderTrigger"
    return report, assigned


def classify_errors(predictions: Sequence[Iterable], dataset: Dataset) -> ErrorReport:
    report = ErrorReport()
    for preds, sent in zip(predictions, dataset, strict=True):
        report = report.merge(classify_sentence(_as_spans(preds), sent.gold)[0])
    return report


# ----------------------------------------------------------------- output

def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(
    result: EvalResult,
    errors: ErrorReport | None,
    path: str | Path,
    plot: bool = False,
) -> list[Path]:
    """Write ``metrics.csv`` (and ``errors.csv`` / ``errors.png``) into directory ``path``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    written = [out / "metrics.csv"]
    with open(written[0], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        tp, n_pred, n_gold = result.counts
        w.writerow(["overall", "ALL", _fmt(result.precision), _fmt(result.recall), _fmt(result.f1), tp, n_pred, n_gold])
        for t, (p, r, f1) in result.per_type.items():
            tp, n_pred, n_gold = result.per_type_counts[t]
            w.writerow(["type", t, _fmt(p), _fmt(r), _fmt(f1), tp, n_pred, n_gold])
    if errors is not None:
        written.append(write_error_csv(errors, out / "errors.csv"))
        if plot:
            png = plot_errors(errors, out / "errors.png")
            if png is not None:
                written.append(png)
    return written


def write_error_csv(errors: ErrorReport, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ERRORS_HEADER)
        for cls in ERROR_CLASSES:
            w.writerow([cls, errors.counts[cls], _fmt(errors.fraction(cls))])
    return path


def plot_errors(errors: ErrorReport, path: str | Path) -> Path | None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.info("matplotlib unavailable, skipping error chart")
        return None
    labels = [c for c in ERROR_CLASSES if errors.counts[c]]
    if not labels:
        logger.info("no errors to chart, skipping %s", path)
        return None
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.pie([errors.counts[c] for c in labels], labels=labels, autopct="%1.1f%%")
    ax.set_title("Error composition")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


def read_metrics_csv(path: str | Path) -> EvalResult:
    per_type, per_type_counts = {}, {}
    overall = None
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            vals = (float(row["precision"]), float(row["recall"]), float(row["f1"]))
            counts = (int(row["tp"]), int(row["pred"]), int(row["gold"]))
            if row["scope"] == "overall":
                overall = (vals, counts)
            else:
                per_type[row["type"]] = vals
                per_type_counts[row["type"]] = counts
    if overall is None:
        raise ValueError(f"{path}: no overall row")
    return EvalResult(*overall[0], per_type, overall[1], per_type_counts)


def read_error_csv(path: str | Path) -> ErrorReport:
    report = ErrorReport()
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            report.counts[row["class"]] = int(row["count"])
    return report
