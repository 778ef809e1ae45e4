import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_encoder, toy_problem
from multiner import tensor as T
from multiner.encoder import attention_param_shapes, init_param, multi_head_attention
from multiner.model import (LossWeights, ModelConfig, ModelOutput, MultiNER,
                            cross_attention_param_count, cross_task_attend, head_param_count,
                            joint_loss, model_param_shapes, total_param_count)
from multiner.tensor import ContractError, Tensor
from multiner.text import (ContextDocument, EntitySpan, TypeInventory, Vocab, collate,
                           make_questions)


def cross_params(d, seed=0):
    shapes = dict(attention_param_shapes("cross.attn", d))
    shapes["cross.ln.g"] = ((d,), "ones")
    shapes["cross.ln.b"] = ((d,), "zeros")
    return {n: init_param(seed, n, s, k) for n, (s, k) in shapes.items()}


# ---------------------------------------------------------------------------
# cross-task attention
# ---------------------------------------------------------------------------

def test_concatenated_length_and_segments():
    rng = np.random.default_rng(0)
    states = [Tensor(rng.normal(size=(16, 32))) for _ in range(3)]
    outs, probs = cross_task_attend(states, cross_params(32), 4)
    assert probs.shape == (1, 4, 48, 48)
    assert [o.shape for o in outs] == [(16, 32)] * 3


@given(st.lists(st.integers(1, 7), min_size=1, max_size=5), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_shape_law_and_lossless_split(lengths, seed):
    rng = np.random.default_rng(seed)
    d = 8
    states = [Tensor(rng.normal(size=(2, l, d))) for l in lengths]
    cat = T.concat(states, axis=1)
    assert cat.shape[1] == sum(lengths)
    bounds = np.cumsum([0] + lengths)
    for s, a, b in zip(states, bounds[:-1], bounds[1:]):
        assert np.array_equal(cat.data[:, a:b], s.data)
    outs, _ = cross_task_attend(states, cross_params(d, seed % 97), 2)
    assert [o.shape[1] for o in outs] == lengths


@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_block_permutation_equivariance(n_tasks, seed):
    rng = np.random.default_rng(seed)
    d = 8
    lengths = rng.integers(1, 6, size=n_tasks)
    states = [Tensor(rng.normal(size=(l, d))) for l in lengths]
    masks = [rng.random(l) > 0.3 for l in lengths]
    for m in masks:
        m[0] = True
    params = cross_params(d, int(seed % 1000))
    base, _ = cross_task_attend(states, params, 2, masks)
    perm = rng.permutation(n_tasks)
    permuted, _ = cross_task_attend([states[i] for i in perm], params, 2,
                                    [masks[i] for i in perm])
    for j, i in enumerate(perm):
        np.testing.assert_allclose(permuted[j].data, base[i].data, rtol=0, atol=1e-9)


def test_single_task_is_plain_self_attention():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(7, 8)))
    p = cross_params(8, 5)
    (out,), _ = cross_task_attend([x], p, 2)
    a, _ = multi_head_attention(x.reshape(1, 7, 8), p, "cross.attn", 2, np.ones((1, 7), bool))
    ref = T.layer_norm(x.reshape(1, 7, 8) + a, p["cross.ln.g"], p["cross.ln.b"])
    np.testing.assert_allclose(out.data, ref.data[0], rtol=0, atol=1e-14)


def test_cross_attention_rejects_bad_input():
    with pytest.raises(ContractError):
        cross_task_attend([], cross_params(4), 2)
    with pytest.raises(ContractError):
        cross_task_attend([Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 6)))],
                          cross_params(4), 2)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _ten_token_problem(mode="full"):
    types = ["PER", "ORG", "LOC"]
    inv = TypeInventory(types)
    qs = make_questions(inv, {t: f"find {t.lower()} now" for t in types})
    doc = ContextDocument([f"w{i}" for i in range(10)], [EntitySpan("PER", 0, 1)])
    vocab = Vocab.build([doc], qs)
    cfg = ModelConfig(tiny_encoder(len(vocab)), types, mode, cross_heads=2, seed=1)
    return MultiNER(cfg), collate([doc], qs, vocab, 64)


def test_forward_shapes_for_ten_token_context():
    model, b = _ten_token_problem()
    rows = model.predict(b)
    assert len(rows) == 1 and len(rows[0]) == 3
    for tr in rows[0]:
        assert tr.start.shape == (15, 2) and tr.end.shape == (15, 2)
        assert tr.span.shape == (15, 15, 2)
        assert int(tr.span_mask.sum()) == math.comb(11, 2) == 55
        assert tr.context_offset == 5 and tr.context_length == 10


def test_eval_forward_is_deterministic(toy):
    m, b = toy["model"], toy["batch"]
    with T.no_grad():
        a, c = m.forward(b), m.forward(b)
    for x, y in ((a.start, c.start), (a.end, c.end), (a.span, c.span)):
        assert np.array_equal(x.data, y.data)


def test_no_att_differs_from_full_on_shared_parameters():
    full = toy_problem(mode="full")
    no_att = MultiNER(ModelConfig(full["cfg"].encoder, full["cfg"].types, "no_att",
                                  cross_heads=2, seed=full["cfg"].seed))
    # parameters with the same name start identical
    for n, p in no_att.params.items():
        assert np.array_equal(p.data, full["model"].params[n].data)
    with T.no_grad():
        a = full["model"].forward(full["batch"])
        b = no_att.forward(full["batch"])
    assert not np.allclose(a.start.data, b.start.data)


def test_wrong_parameter_set_rejected(toy):
    cfg = toy["cfg"]
    no_att_cfg = ModelConfig(cfg.encoder, cfg.types, "no_att", cross_heads=2, seed=cfg.seed)
    with pytest.raises(ContractError):
        MultiNER(no_att_cfg, toy["model"].params)


def test_shared_heads_apply_one_function_to_every_type():
    # identical questions make every task input identical; with shared heads
    # the per-type outputs must then coincide exactly
    types = ["A", "B", "C"]
    inv = TypeInventory(types)
    qs = make_questions(inv, {t: "find things" for t in types})
    docs = [ContextDocument(["x", "y", "z", "x"], [EntitySpan("A", 0, 1)])]
    vocab = Vocab.build(docs, qs)
    b = collate(docs, qs, vocab, 32)
    for mode, same in (("no_diff", True), ("full", False)):
        m = MultiNER(ModelConfig(tiny_encoder(len(vocab)), types, mode, cross_heads=2, seed=4))
        with T.no_grad():
            out = m.forward(b)
        assert np.array_equal(out.start.data[0], out.start.data[1]) == same
        assert np.array_equal(out.span.data[0], out.span.data[2]) == same
    m = MultiNER(ModelConfig(tiny_encoder(len(vocab)), types, "no_diff", cross_heads=2))
    assert m.params["heads.span.w1"].shape[0] == 1


def test_baseline_logits_independent_of_other_types():
    full_types = ["PER", "ORG", "LOC"]
    prob = toy_problem(types=full_types, mode="single_task_baseline")
    docs, vocab = prob["corpus"].train, prob["vocab"]
    qtext = {q.type_name: " ".join(q.tokens) for q in prob["qs"]}
    outs = {}
    for types in (full_types, ["PER", "LOC"]):
        inv = TypeInventory(types)
        qs = make_questions(inv, qtext)
        m = MultiNER(ModelConfig(prob["cfg"].encoder, types, "single_task_baseline",
                                 cross_heads=2, seed=prob["cfg"].seed))
        b = collate(docs, qs, vocab, 64, pad_to=40)
        with T.no_grad():
            rows = m.predict(b)
        outs[len(types)] = {(i, tr.type_name): tr for i, row in enumerate(rows) for tr in row}
    for key, tr in outs[2].items():
        other = outs[3][key]
        assert np.array_equal(tr.start, other.start) and np.array_equal(tr.end, other.end)
        assert np.array_equal(tr.span, other.span)

    # the cross-task sublayer is what breaks this independence
    full_outs = {}
    for types in (full_types, ["PER", "LOC"]):
        qs = make_questions(TypeInventory(types), qtext)
        m = MultiNER(ModelConfig(prob["cfg"].encoder, types, "full", cross_heads=2,
                                 seed=prob["cfg"].seed))
        with T.no_grad():
            full_outs[len(types)] = m.predict(collate(docs, qs, vocab, 64, pad_to=40))
    assert not np.array_equal(full_outs[2][0][0].start, full_outs[3][0][0].start)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _logits_from_labels(labels, margin):
    z = np.zeros(labels.shape + (2,))
    z[..., 1] = np.where(labels == 1, margin, -margin) / 2
    z[..., 0] = -z[..., 1]
    return z


def _output_with(b, start, end, span):
    Tn = b.n_tasks
    tmask = b.token_mask.transpose(1, 0, 2).reshape(Tn, -1)
    return ModelOutput(Tensor(start), Tensor(end), Tensor(span), tmask, b.span_cells,
                       b.n_contexts, b.seq_len)


def _labels(b):
    Tn = b.n_tasks
    st_ = b.start.transpose(1, 0, 2).reshape(Tn, -1)
    en = b.end.transpose(1, 0, 2).reshape(Tn, -1)
    return st_, en, b.span_labels


def test_confident_correct_predictions_give_near_zero_loss(toy):
    b = toy["batch"]
    st_, en, sp = _labels(b)
    out = _output_with(b, _logits_from_labels(st_, 40), _logits_from_labels(en, 40),
                       _logits_from_labels(sp, 40))
    assert float(joint_loss(out, b, LossWeights()).total.data) < 1e-6


def test_uniform_logits_give_ln2_per_part(toy):
    b = toy["batch"]
    Tn, BL = b.n_tasks, b.n_contexts * b.seq_len
    out = _output_with(b, np.zeros((Tn, BL, 2)), np.zeros((Tn, BL, 2)),
                       np.zeros(b.span_labels.shape + (2,)))
    w = LossWeights(0.5, 2.0, 1.5)
    lb = joint_loss(out, b, w, toy["cfg"].types)
    assert float(lb.total.data) == pytest.approx(Tn * (0.5 + 2.0 + 1.5) * math.log(2), rel=1e-13)
    assert len(lb.parts) == 3 * Tn
    assert all(v == pytest.approx(math.log(2), rel=1e-14) for v in lb.parts.values())


LOSS_BATCH = toy_problem(n_docs=3)["batch"]


@given(a=st.floats(0, 5), bw=st.floats(0, 5), g=st.floats(0, 5), c=st.floats(0.01, 100),
       seed=st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_loss_linear_in_weights(a, bw, g, c, seed):
    b = LOSS_BATCH
    rng = np.random.default_rng(seed)
    Tn, BL = b.n_tasks, b.n_contexts * b.seq_len
    out = _output_with(b, rng.normal(size=(Tn, BL, 2)), rng.normal(size=(Tn, BL, 2)),
                       rng.normal(size=b.span_labels.shape + (2,)))
    base = float(joint_loss(out, b, LossWeights(a, bw, g)).total.data)
    scaled = float(joint_loss(out, b, LossWeights(c * a, c * bw, c * g)).total.data)
    assert scaled == pytest.approx(c * base, rel=1e-12, abs=1e-300)


def test_mask_mismatch_rejected(toy):
    b = toy["batch"]
    Tn, BL = b.n_tasks, b.n_contexts * b.seq_len
    out = _output_with(b, np.zeros((Tn, BL, 2)), np.zeros((Tn, BL, 2)),
                       np.zeros(b.span_labels.shape + (2,)))
    out.token_mask = ~out.token_mask
    with pytest.raises(ContractError):
        joint_loss(out, b, LossWeights())


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0, 1.0)


def test_pad_content_does_not_change_loss(toy):
    m, b = toy["model"], toy["batch"]
    with T.no_grad():
        l1 = float(joint_loss(m.forward(b), b, LossWeights()).total.data)
    pad = ~b.attention_mask
    assert pad.any()
    b.ids[pad] = np.random.default_rng(0).integers(4, len(toy["vocab"]), size=int(pad.sum()))
    with T.no_grad():
        l2 = float(joint_loss(m.forward(b), b, LossWeights()).total.data)
    assert l1 == l2


def test_full_model_gradients_match_finite_differences():
    from multiner.gradcheck import check_gradients
    for mode in ("full", "no_att", "no_diff", "single_task_baseline"):
        p = toy_problem(types=("PER", "ORG"), mode=mode, n_docs=2, d=8)
        m, b = p["model"], p["batch"]
        res = check_gradients(m.params, lambda: joint_loss(m.forward(b), b, LossWeights()).total,
                              coords_per_param=3)
        assert res.max_rel_error < 1e-4, (mode, res.worst)
        assert res.max_abs_error_small < 1e-7


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def test_head_count_small_hand_count():
    assert head_param_count(4, 1) == 2 * 10 + (8 * 8 + 8) + (8 * 2 + 2) == 110


def test_head_count_at_768_by_formula():
    # start/end: 2 * (768*2 + 2); span MLP: (1536*1536 + 1536) + (1536*2 + 2)
    assert head_param_count(768, 1) == 2 * (768 * 2 + 2) + (1536 * 1536 + 1536) + (1536 * 2 + 2)
    assert head_param_count(768, 1) == 2_366_982


@given(st.integers(1, 12), st.integers(1, 64))
def test_shared_heads_independent_of_type_count(n, d):
    assert head_param_count(d, n, "no_diff") == head_param_count(d, 1, "no_diff")
    assert head_param_count(d, n, "single_task_baseline") == head_param_count(d, 1)
    assert head_param_count(d, n, "full") == n * head_param_count(d, 1)


@pytest.mark.parametrize("mode", ["full", "no_att", "no_diff", "single_task_baseline"])
def test_total_count_matches_enumeration(mode):
    cfg = ModelConfig(tiny_encoder(37, d=8), ["A", "B", "C"], mode, cross_heads=2)
    assert total_param_count(cfg) == MultiNER(cfg).n_params() == sum(
        int(np.prod(s)) for s, _ in model_param_shapes(cfg).values())


def test_full_and_no_att_differ_by_cross_sublayer_only():
    enc = tiny_encoder(50, d=16)
    full = ModelConfig(enc, ["A", "B"], "full", cross_heads=2)
    no_att = ModelConfig(enc, ["A", "B"], "no_att", cross_heads=2)
    assert total_param_count(full) - total_param_count(no_att) == cross_attention_param_count(16)
    assert cross_attention_param_count(16) == (3 * (16 * 16 + 16) + 16 * 16) + 2 * 16
