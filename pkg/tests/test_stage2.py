import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ner_rpn.corpus import Span, make_sentence
from ner_rpn.pipeline import stage2_forward
from ner_rpn.stage2 import (
    BoundaryUnit,
    SpanHead,
    Stage2Config,
    Stage2Example,
    Stage2Model,
    Stage2Output,
    boundary_unit,
    combine_losses,
    label_example,
    make_example,
    overlap_target,
    overlap_type_loss,
    sample_random_negatives,
    stage2_loss,
    stage2_loss_terms,
    write_examples,
)

from .conftest import fixed_encoder
from .oracles import gradient_mismatches

F64 = torch.float64
TYPES = ("A", "B")


def t(x):
    return torch.tensor(x, dtype=F64)


def hand_model(hidden, **cfg):
    cfg = Stage2Config(**{"n_heads": 1, "head_dim": 1, "feat_dim": 2, **cfg})
    return Stage2Model(fixed_encoder(hidden), TYPES, cfg).double()


def test_config_channel_scaling():
    assert Stage2Config().heads == 32 and Stage2Config().features == 64
    cfg = Stage2Config(channel_scale=0.25)
    assert (cfg.heads, cfg.features) == (8, 16)
    with pytest.raises(ValueError):
        Stage2Config(channel_scale=0.3)
    with pytest.raises(ValueError):
        Stage2Config(alpha=-1)


def test_boundary_feature_vector_has_one_entry_per_head():
    unit = BoundaryUnit(hidden_dim=16, n_heads=32, head_dim=4)
    feats = unit.features(torch.randn(5, 16), torch.randn(5, 16))
    assert feats.shape == (5, 32)
    assert unit(torch.randn(5, 16), torch.randn(5, 16)).shape == (5, 2)


def test_orthogonal_projections_give_bias_logits():
    unit = BoundaryUnit(hidden_dim=2, n_heads=3, head_dim=2).double()
    with torch.no_grad():
        unit.left.weight.copy_(t([[1, 0], [0, 0]] * 3))
        unit.right.weight.copy_(t([[0, 0], [0, 1]] * 3))
        unit.fc.bias.copy_(t([0.3, -0.7]))
    x = torch.randn(4, 2, dtype=F64)
    y = torch.randn(4, 2, dtype=F64)
    assert torch.equal(unit.features(x, y), torch.zeros(4, 3, dtype=F64))
    assert torch.equal(unit(x, y), t([[0.3, -0.7]] * 4))


def test_hand_set_boundary_unit():
    # words w0=[1,2], w1=[3,-1], sentinel=[0.5,0.5]
    model = hand_model([[1, 2], [3, -1], [0.5, 0.5]])
    for unit in (model.start_unit, model.end_unit):
        with torch.no_grad():
            unit.left.weight.copy_(t([[1, 0]]))
            unit.right.weight.copy_(t([[0, 1]]))
            unit.fc.weight.copy_(t([[2], [-1]]))
            unit.fc.bias.copy_(t([0.1, 0.2]))
    sent = make_sentence(["x", "y"])
    enc = model.encoder([sent])
    # start side of (1,2): left w0 -> 1, right w1 -> -1, product -1
    start = boundary_unit(model, enc, sent, Span(1, 2), "start")
    assert start.tolist() == pytest.approx([2 * -1 + 0.1, -1 * -1 + 0.2])
    # end side of (1,2): left w1 -> 3, right sentinel -> 0.5, product 1.5
    end = boundary_unit(model, enc, sent, Span(1, 2), "end")
    assert end.tolist() == pytest.approx([2 * 1.5 + 0.1, -1 * 1.5 + 0.2])
    with pytest.raises(ValueError):
        boundary_unit(model, enc, sent, Span(1, 2), "middle")


def test_sentence_start_uses_learned_bos_row():
    model = hand_model([[1, 2], [3, -1], [0.5, 0.5]])
    with torch.no_grad():
        model.bos.copy_(t([4.0, 0.0]))
        model.start_unit.left.weight.copy_(t([[1, 0]]))
        model.start_unit.right.weight.copy_(t([[1, 0]]))
        model.start_unit.fc.weight.copy_(t([[1], [0]]))
        model.start_unit.fc.bias.zero_()
    sent = make_sentence(["x", "y"])
    logits = boundary_unit(model, model.encoder([sent]), sent, Span(0, 1), "start")
    assert logits[0].item() == pytest.approx(4.0 * 1.0)


def test_single_word_span_pooling_is_identity():
    head = SpanHead(hidden_dim=3, feat_dim=4, n_out=2).double()
    row = torch.randn(1, 1, 3, dtype=F64)
    mask = torch.ones(1, 1, dtype=torch.bool)
    expected = head.out(torch.relu(head.proj(row[:, 0])))
    torch.testing.assert_close(head(row, mask), expected)
    torch.testing.assert_close(head(row, mask, max_pool=False), expected)


@given(st.permutations(range(5)))
def test_max_pool_order_invariant(perm):
    torch.manual_seed(0)
    head = SpanHead(hidden_dim=3, feat_dim=4, n_out=2, aux_dim=4).double()
    rows = torch.randn(1, 5, 3, dtype=F64)
    aux = torch.randn(1, 4, dtype=F64)
    mask = torch.ones(1, 5, dtype=torch.bool)
    assert torch.equal(head(rows, mask, aux), head(rows[:, list(perm)], mask, aux))


def test_hand_set_span_head_two_words():
    head = SpanHead(hidden_dim=2, feat_dim=2, n_out=2).double()
    with torch.no_grad():
        head.proj.weight.copy_(t([[1, -1], [0.5, 2]]))
        head.proj.bias.copy_(t([0, -1]))
        head.out.weight.copy_(t([[1, 1], [2, -1]]))
        head.out.bias.copy_(t([0.5, 0]))
    rows = t([[[2, 1], [-1, 3]]])
    # row 0: relu(2-1, 1+2-1) = (1, 2); row 1: relu(-1-3, -0.5+6-1) = (0, 4.5)
    pooled = [max(1, 0), max(2, 4.5)]
    expected = [pooled[0] + pooled[1] + 0.5, 2 * pooled[0] - pooled[1]]
    out = head(rows, torch.ones(1, 2, dtype=torch.bool))
    assert out[0].tolist() == pytest.approx(expected)


def test_span_head_aux_contract():
    head = SpanHead(2, 2, 2, aux_dim=4)
    with pytest.raises(ValueError):
        head(torch.randn(1, 1, 2), torch.ones(1, 1, dtype=torch.bool))


def test_output_shapes(tiny_models, four_examples):
    _, stage2, _ = tiny_models
    out = stage2_forward(stage2, four_examples)
    assert out.start_logits.shape == (4, 2)
    assert out.entityness_logits.shape == (4, 2)
    assert out.type_logits.shape == (4, 4)
    assert torch.isfinite(out.type_logits).all()


# ------------------------------------------------------------------ labels

def test_label_examples():
    gold = {Span(1, 3, "PER")}
    lab = label_example(Span(1, 3), gold)
    assert (lab.start_correct, lab.end_correct, lab.is_entity, lab.type) == (True, True, True, "PER")
    lab = label_example(Span(1, 4), gold)
    assert (lab.start_correct, lab.end_correct, lab.is_entity, lab.type) == (True, False, False, None)
    lab = label_example(Span(0, 2), {Span(1, 3, "PER"), Span(3, 5, "ORG")})
    assert (lab.start_correct, lab.end_correct, lab.is_entity, lab.type) == (False, False, False, None)
    with pytest.raises(ValueError):
        label_example(Span(0, 2), {Span(0, 2, "PER"), Span(0, 2, "ORG")})


@st.composite
def span_and_gold(draw):
    n = draw(st.integers(2, 8))
    pair = st.tuples(st.integers(0, n - 1), st.integers(1, n)).filter(lambda p: p[0] < p[1])
    regions = draw(st.lists(pair, max_size=5, unique=True))
    gold = {Span(i, j, draw(st.sampled_from(["A", "B"]))) for i, j in regions}
    i, j = draw(pair)
    return n, Span(i, j), gold


@given(span_and_gold())
def test_labels_always_consistent(case):
    n, span, gold = case
    sent = make_sentence(["w"] * n, gold)
    ex = make_example(sent, span, Stage2Config(overlap_type_loss_weight=0.2))
    assert isinstance(ex, Stage2Example)
    if ex.label_is_entity:
        assert ex.label_start_correct and ex.label_end_correct and ex.label_type
        assert ex.overlap_type is None
    else:
        assert ex.label_type is None


def test_example_invariant_enforced():
    sent = make_sentence(["a", "b"])
    with pytest.raises(ValueError):
        Stage2Example(sent, Span(0, 1), True, False, True, "A")
    with pytest.raises(ValueError):
        Stage2Example(sent, Span(0, 1), False, False, False, "A")


# --------------------------------------------------------- random negatives

def test_random_negative_from_remaining_spans():
    sent = make_sentence(list("abcd"), [Span(0, 2, "X")])
    allowed = {(i, j) for i in range(4) for j in range(i + 1, min(4, i + 3) + 1)}
    assert len(allowed) == 9
    allowed.discard((0, 2))
    seen = set()
    for seed in range(200):
        (neg,) = sample_random_negatives(sent, [Span(0, 2)], 3, 1, np.random.default_rng(seed))
        assert neg.region in allowed
        seen.add(neg.region)
    assert seen == allowed


def test_random_negatives_empty_when_everything_taken():
    sent = make_sentence(["a", "b"], [Span(0, 1, "X")])
    cands = [Span(1, 2), Span(0, 2)]
    assert sample_random_negatives(sent, cands, 6, 1, np.random.default_rng(0)) == []


def test_random_negatives_deterministic():
    sent = make_sentence(list("abcdefgh"), [Span(2, 4, "X")])
    draws = [sample_random_negatives(sent, [], 6, 3, np.random.default_rng(42)) for _ in range(2)]
    assert draws[0] == draws[1] and len(draws[0]) == 3


@given(span_and_gold(), st.integers(0, 6), st.integers(0, 2**16))
def test_random_negatives_never_collide(case, k, seed):
    n, span, gold = case
    sent = make_sentence(["w"] * n, gold)
    negs = sample_random_negatives(sent, [span], 3, k, np.random.default_rng(seed))
    assert len(negs) <= k and len(set(negs)) == len(negs)
    for neg in negs:
        assert neg.region != span.region
        assert neg.region not in sent.gold_regions
        assert 1 <= len(neg) <= 3


# ---------------------------------------------------------------- losses

def test_combine_losses_substitution():
    cfg = Stage2Config(alpha=0.5, beta=1.0)
    assert combine_losses(0.2, 0.4, 0.3, 0.1, cfg) == pytest.approx(0.7, abs=1e-15)


def test_uniform_binary_heads_no_entities_gives_two_log_two():
    sent = make_sentence(list("abcd"), [Span(0, 1, "A")])
    examples = [make_example(sent, Span(1, 3)), make_example(sent, Span(2, 4))]
    out = Stage2Output(torch.zeros(2, 2), torch.zeros(2, 2), torch.zeros(2, 2), torch.randn(2, 2))
    loss = stage2_loss(examples, out, Stage2Config(), TYPES)
    assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)
    terms = stage2_loss_terms(examples, out, Stage2Config(), TYPES)
    assert terms["type"].item() == 0.0


def logits_for(p):
    """Two-class logits whose softmax puts probability ``p`` on class 1."""
    return [math.log(1 - p), math.log(p)]


def three_example_batch():
    sent = make_sentence(list("abcde"), [Span(1, 3, "B"), Span(3, 5, "A")])
    examples = [make_example(sent, Span(1, 3)), make_example(sent, Span(1, 4)), make_example(sent, Span(0, 2))]
    p_start, p_end, p_ent = [0.8, 0.6, 0.3], [0.7, 0.4, 0.2], [0.9, 0.3, 0.1]
    type_probs = [[0.25, 0.75], [0.5, 0.5], [0.1, 0.9]]
    out = Stage2Output(
        t([logits_for(p) for p in p_start]),
        t([logits_for(p) for p in p_end]),
        t([logits_for(p) for p in p_ent]),
        t([[math.log(q) for q in row] for row in type_probs]),
    )
    return examples, out, (p_start, p_end, p_ent, type_probs)


def test_three_example_batch_by_hand():
    examples, out, (p_start, p_end, p_ent, type_probs) = three_example_batch()
    # labels: (1,3) exact B entity; (1,4) start ok end wrong; (0,2) nothing right
    y_start, y_end, y_ent = [1, 1, 0], [1, 0, 0], [1, 0, 0]

    def bce(ps, ys):
        return -sum(math.log(p) if y else math.log(1 - p) for p, y in zip(ps, ys)) / 3

    l_type = -math.log(type_probs[0][1]) / 3
    expected = 0.5 * (bce(p_start, y_start) + bce(p_end, y_end)) + 1.0 * bce(p_ent, y_ent) + l_type
    assert stage2_loss(examples, out, Stage2Config(), TYPES).item() == pytest.approx(expected, abs=1e-12)


def test_loss_without_entities_equals_binary_terms():
    sent = make_sentence(list("abcde"), [Span(1, 3, "B")])
    examples = [make_example(sent, Span(0, 1)), make_example(sent, Span(2, 5))]
    torch.manual_seed(3)
    out = Stage2Output(*(torch.randn(2, 2, dtype=F64) for _ in range(3)), torch.randn(2, 2, dtype=F64))
    cfg = Stage2Config(alpha=0.3, beta=2.0)
    terms = stage2_loss_terms(examples, out, cfg, TYPES)
    total = stage2_loss(examples, out, cfg, TYPES)
    assert total.item() == 0.3 * (terms["start"] + terms["end"]).item() + 2.0 * terms["entityness"].item()


def test_overlap_target_tie_goes_leftmost():
    gold = {Span(1, 3, "PER"), Span(2, 6, "ORG")}
    assert overlap_target(Span(1, 4), gold) == "PER"
    assert overlap_target(Span(1, 3), gold) is None
    assert overlap_target(Span(0, 1), gold) is None
    # intersection 1, union 6 -> below the IoU floor
    assert overlap_target(Span(5, 8), gold, min_iou=0.5) is None


def test_overlap_type_loss_values():
    sent = make_sentence(list("abcdefg"), [Span(1, 3, "A"), Span(2, 6, "B")])
    ex = make_example(sent, Span(1, 4), Stage2Config(overlap_type_loss_weight=0.2))
    assert ex.overlap_type == "A"
    # log-probs chosen so the cross-entropy against "A" is exactly 1.5
    logits = t([-1.5, math.log(1 - math.exp(-1.5))])
    assert overlap_type_loss(ex, logits, Stage2Config(overlap_type_loss_weight=0.2), TYPES).item() == pytest.approx(0.3)
    assert overlap_type_loss(ex, logits, Stage2Config(overlap_type_loss_weight=0.0), TYPES).item() == 0.0


def test_overlap_loss_enters_type_term_before_mean():
    sent = make_sentence(list("abcdefg"), [Span(1, 3, "A")])
    cfg = Stage2Config(overlap_type_loss_weight=0.2)
    examples = [make_example(sent, Span(1, 3), cfg), make_example(sent, Span(1, 4), cfg)]
    assert examples[1].overlap_type == "A"
    type_logits = t([[0.0, 1.0], [2.0, -1.0]])
    out = Stage2Output(torch.zeros(2, 2, dtype=F64), torch.zeros(2, 2, dtype=F64), torch.zeros(2, 2, dtype=F64), type_logits)
    ce = lambda row: -torch.log_softmax(row, -1)[0].item()  # noqa: E731
    expected = (ce(type_logits[0]) + 0.2 * ce(type_logits[1])) / 2
    assert stage2_loss_terms(examples, out, cfg, TYPES)["type"].item() == pytest.approx(expected)
    off = stage2_loss_terms(examples, out, Stage2Config(), TYPES)["type"].item()
    assert off == pytest.approx(ce(type_logits[0]) / 2)


# ------------------------------------------------------------- gradients

def test_stage2_gradients_match_finite_differences(tiny_models, four_examples):
    _, stage2, cfg = tiny_models
    types = stage2.type_inventory

    def loss():
        return stage2_loss(four_examples, stage2_forward(stage2, four_examples), cfg, types)

    params = list(stage2.named_parameters())
    assert gradient_mismatches(loss, params) == []


def _boundary_grads(model, examples, cfg):
    model.zero_grad()
    stage2_loss(examples, stage2_forward(model, examples), cfg, model.type_inventory).backward()
    return {n: p.grad.clone() for n, p in model.named_parameters() if n.startswith(("start_unit", "end_unit"))}


def test_alpha_zero_leaves_only_the_entityness_path(tiny_models, four_examples):
    _, stage2, _ = tiny_models
    cfg = Stage2Config(alpha=0.0, n_heads=4, head_dim=2, feat_dim=6)
    stage2.config = cfg
    grads = _boundary_grads(stage2, four_examples, cfg)
    # reference: only the entityness term, which reaches the units via concatenation
    stage2.zero_grad()
    out = stage2_forward(stage2, four_examples)
    stage2_loss_terms(four_examples, out, cfg, stage2.type_inventory)["entityness"].backward()
    for n, p in stage2.named_parameters():
        if n in grads:
            torch.testing.assert_close(grads[n], p.grad)
    assert any(g.abs().max() > 0 for g in grads.values())


def test_disabled_boundary_heads_get_no_gradient(tiny_dataset, four_examples):
    enc = fixed_encoder(torch.randn(16, 5, generator=torch.Generator().manual_seed(0)))
    cfg = Stage2Config(n_heads=4, head_dim=2, feat_dim=6, disable_boundary_heads=True)
    model = Stage2Model(enc, tiny_dataset.type_inventory, cfg).double()
    model.zero_grad()
    stage2_loss(four_examples, stage2_forward(model, four_examples), cfg, model.type_inventory).backward()
    for n, p in model.named_parameters():
        if n.startswith(("start_unit", "end_unit")):
            assert p.grad is None or not p.grad.any()


def test_first_row_ablation_unchanged_on_single_word_spans(tiny_models, tiny_dataset):
    _, stage2, _ = tiny_models
    sent = tiny_dataset[1]
    spans = [Span(i, i + 1) for i in range(sent.n_words)]
    full = stage2([sent], [0] * len(spans), spans)
    stage2.config = Stage2Config(n_heads=4, head_dim=2, feat_dim=6, disable_max_pool=True)
    first = stage2([sent], [0] * len(spans), spans)
    torch.testing.assert_close(full.entityness_logits, first.entityness_logits)
    torch.testing.assert_close(full.type_logits, first.type_logits)
    multi = [Span(0, 3)]
    stage2.config = Stage2Config(n_heads=4, head_dim=2, feat_dim=6)
    a = stage2([sent], [0], multi).type_logits
    stage2.config = Stage2Config(n_heads=4, head_dim=2, feat_dim=6, disable_max_pool=True)
    b = stage2([sent], [0], multi).type_logits
    assert not torch.equal(a, b)


def test_candidates_scored_independently(tiny_models, tiny_dataset):
    _, stage2, _ = tiny_models
    sent = tiny_dataset[1]
    spans = [Span(0, 3), Span(2, 3), Span(1, 5), Span(4, 5)]
    full = stage2([sent], [0] * 4, spans)
    for drop in range(4):
        keep = [k for k in range(4) if k != drop]
        part = stage2([sent], [0] * 3, [spans[k] for k in keep])
        for row, k in enumerate(keep):
            torch.testing.assert_close(part.entityness_logits[row], full.entityness_logits[k])
            torch.testing.assert_close(part.type_logits[row], full.type_logits[k])
            torch.testing.assert_close(part.start_logits[row], full.start_logits[k])


def test_example_dump(tmp_path, four_examples):
    import json

    path = tmp_path / "ex.jsonl"
    write_examples(path, four_examples)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 4
    assert rows[0] == {
        "sentence_id": 0, "start": 0, "end": 2, "start_correct": True, "end_correct": True,
        "is_entity": True, "type": "PER", "overlap_type": None, "source": "candidate",
    }
    assert rows[2]["is_entity"] is False and rows[2]["end_correct"] is True
