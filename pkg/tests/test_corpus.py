import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ner_rpn.corpus import (
    ConllParseError,
    Dataset,
    Span,
    SpanRecordError,
    decode_iob,
    encode_iob2,
    length_coverage,
    load_conll,
    load_json_spans,
    make_sentence,
    spans_to_boundary_labels,
    write_conll,
)

from .conftest import split_long
from .oracles import all_tag_sequences, iob2_runs, iob2_valid


def write_conll_rows(path, sentences, docstart=True):
    lines = ["-DOCSTART- -X- -X- O", ""] if docstart else []
    for words, tags in sentences:
        lines += [f"{w} NN B-NP {t}" for w, t in zip(words, tags)] + [""]
    path.write_text("\n".join(lines), encoding="utf-8")


def test_span_invariants():
    assert len(Span(2, 5)) == 3
    with pytest.raises(ValueError):
        Span(3, 3)
    with pytest.raises(ValueError):
        Span(-1, 2)


def test_sentence_alignment_and_mask():
    sent = make_sentence(["a", "university", "of", "berlin"], tokenizer=split_long)
    assert sent.subtokens == ("a", "univ", "##ersity", "of", "berl", "##in")
    assert sent.word_starts == (0, 1, 3, 4)
    assert sent.first_subtoken_mask == (True, True, False, True, True, False)


def test_sentence_rejects_out_of_range_gold():
    with pytest.raises(ValueError):
        make_sentence(["a", "b"], [Span(1, 3, "X")])


def test_load_conll_example(tmp_path):
    path = tmp_path / "a.conll"
    write_conll_rows(path, [
        (["EU", "rejects", "German", "call"], ["B-ORG", "O", "B-MISC", "O"]),
        (["Peace", "talks"], ["O", "O"]),
        (["Jan", "van", "Dijk"], ["B-PER", "I-PER", "I-PER"]),
    ])
    ds = load_conll(path, scheme="iob2")
    assert len(ds) == 3
    assert ds[0].gold == {Span(0, 1, "ORG"), Span(2, 3, "MISC")}
    assert ds[1].gold == frozenset()
    assert ds[2].gold == {Span(0, 3, "PER")}
    assert ds.type_inventory == ("MISC", "ORG", "PER")


def test_load_conll_empty_file(tmp_path):
    path = tmp_path / "empty.conll"
    path.write_text("")
    ds = load_conll(path)
    assert len(ds) == 0 and ds.type_inventory == ()


def test_malformed_iob2_names_line(tmp_path):
    path = tmp_path / "bad.conll"
    write_conll_rows(path, [(["a", "b", "c"], ["O", "O", "I-PER"])])
    with pytest.raises(ConllParseError) as exc:
        load_conll(path, scheme="iob2")
    # docstart line, blank, then tokens on lines 3..5
    assert exc.value.lineno == 5
    assert "line 5" in str(exc.value)


def test_iob1_accepted_and_autodetected(tmp_path):
    path = tmp_path / "iob1.conll"
    # IOB1: chunks open with I-, B- only separates adjacent same-type chunks
    write_conll_rows(path, [(["U.N.", "official", "Ekeus", "Smith", "Jones"], ["I-ORG", "O", "I-PER", "B-PER", "I-PER"])])
    for scheme in ("iob1", "auto"):
        ds = load_conll(path, scheme=scheme)
        assert ds[0].gold == {Span(0, 1, "ORG"), Span(2, 3, "PER"), Span(3, 5, "PER")}


@pytest.mark.parametrize("tags", [t for t in all_tag_sequences(4) if iob2_valid(t)])
def test_iob2_decoding_matches_run_finder(tags):
    got = {(s.start, s.end, s.type) for s in decode_iob(tags, "iob2")}
    assert got == iob2_runs(tags)


def test_invalid_iob2_sequences_raise():
    invalid = [t for t in all_tag_sequences(3) if not iob2_valid(t)]
    assert invalid
    for tags in invalid:
        with pytest.raises(ConllParseError):
            decode_iob(tags, "iob2")


@st.composite
def flat_spans(draw):
    n = draw(st.integers(1, 12))
    spans, pos = [], 0
    while pos < n:
        if draw(st.booleans()):
            length = draw(st.integers(1, n - pos))
            spans.append(Span(pos, pos + length, draw(st.sampled_from(["PER", "ORG", "LOC"]))))
            pos += length
        else:
            pos += 1
    return n, spans


@given(flat_spans())
def test_iob_round_trip(case):
    n, spans = case
    assert set(decode_iob(encode_iob2(n, spans), "iob2")) == set(spans)


@settings(max_examples=30, deadline=None)
@given(st.lists(flat_spans(), min_size=1, max_size=4))
def test_conll_file_round_trip(tmp_path_factory, cases):
    path = tmp_path_factory.mktemp("rt") / "rt.conll"
    sents = [make_sentence([f"w{i}" for i in range(n)], spans, id=k) for k, (n, spans) in enumerate(cases)]
    write_conll(Dataset.from_sentences(sents), path)
    back = load_conll(path, scheme="iob2")
    assert [s.gold for s in back] == [s.gold for s in sents]


def test_json_spans_nested_and_rejections(tmp_path, caplog):
    path = tmp_path / "n.jsonl"
    recs = [
        {"tokens": ["a", "b", "c", "d", "e"], "entities": [{"start": 0, "end": 3, "type": "ORG"}, {"start": 1, "end": 2, "type": "PER"}]},
        {"tokens": ["x", "y"], "entities": []},
        {"tokens": ["a", "b", "c", "d", "e"], "entities": [{"start": 2, "end": 6, "type": "ORG"}]},
        {"tokens": ["a", "b"], "entities": [{"start": 0, "end": 1, "type": "PER"}, {"start": 0, "end": 1, "type": "PER"}]},
        {"tokens": ["a", "b"], "entities": [{"start": 0, "end": 2, "type": "PER"}, {"start": 0, "end": 2, "type": "ORG"}]},
    ]
    path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    with caplog.at_level(logging.WARNING):
        ds = load_json_spans(path)
    assert len(ds) == 3
    assert ds[0].gold == {Span(0, 3, "ORG"), Span(1, 2, "PER")}
    assert ds[1].gold == frozenset()
    assert ds[2].gold == {Span(0, 1, "PER")}
    assert [line for line, _ in ds.rejected] == [3, 5]
    assert "duplicate" in caplog.text
    with pytest.raises(SpanRecordError):
        load_json_spans(path, strict=True)


def test_overlong_sentences_dropped(tmp_path, caplog):
    path = tmp_path / "long.jsonl"
    path.write_text(json.dumps({"tokens": ["a"] * 10, "entities": []}) + "\n" + json.dumps({"tokens": ["a"], "entities": []}) + "\n")
    with caplog.at_level(logging.WARNING):
        ds = load_json_spans(path, max_len=5)
    assert len(ds) == 1 and "dropped 1" in caplog.text


def test_boundary_labels_examples():
    s = make_sentence(list("abcde"), [Span(1, 3, "X")])
    assert spans_to_boundary_labels(s) == ([0, 1, 0, 0, 0], [0, 0, 0, 1, 0, 0])
    s = make_sentence(list("abc"), [Span(0, 3, "X")])
    assert spans_to_boundary_labels(s)[1] == [0, 0, 0, 1]
    s = make_sentence(list("abc"), [Span(0, 3, "X"), Span(1, 2, "Y")])
    assert spans_to_boundary_labels(s) == ([1, 1, 0], [0, 0, 1, 1])


@st.composite
def any_spans(draw):
    n = draw(st.integers(1, 10))
    pairs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(1, n)).filter(lambda p: p[0] < p[1]), max_size=8))
    return n, {Span(i, j, "T") for i, j in pairs}


@given(any_spans())
def test_boundary_labels_match_span_enumeration(case):
    n, spans = case
    start, end = spans_to_boundary_labels(make_sentence([f"w{i}" for i in range(n)], spans))
    assert len(start) == n and len(end) == n + 1
    for i in range(n):
        assert start[i] == any(s.start == i for s in spans)
    for j in range(n + 1):
        assert end[j] == any(s.end == j for s in spans)
    assert sum(start) == len({s.start for s in spans})
    assert sum(end) == len({s.end for s in spans})


def _dataset_with_lengths(lengths):
    sents = [make_sentence(["w"] * n, [Span(0, n, "X")], id=i) for i, n in enumerate(lengths)]
    return Dataset.from_sentences(sents)


def test_length_coverage_examples():
    ds = _dataset_with_lengths([1, 2, 7])
    assert length_coverage(ds, 6) == pytest.approx(2 / 3)
    assert length_coverage(ds, 7) == 1.0
    assert length_coverage(Dataset.from_sentences([]), 3) == 1.0
    with pytest.raises(ValueError):
        length_coverage(ds, 0)


def test_length_coverage_geometric_corpus():
    rng = np.random.default_rng(7)
    lengths = rng.geometric(0.35, size=400).tolist()
    ds = _dataset_with_lengths(lengths)
    count = 0
    for n in lengths:
        if n <= 6:
            count += 1
    assert length_coverage(ds, 6) == count / len(lengths)


@given(st.lists(st.integers(1, 15), min_size=1, max_size=30))
def test_length_coverage_monotone(lengths):
    ds = _dataset_with_lengths(lengths)
    values = [length_coverage(ds, k) for k in range(1, max(lengths) + 1)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0
