"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in RESULTS and printed by the terminal-summary hook
in conftest.py, so they show up in a plain ``pytest`` run.
"""
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import FIXTURES, tiny_encoder
from multiner import tensor as T
from multiner.checkpoint import Checkpoint, from_bytes, to_bytes
from multiner.cli import export_attention, main, run_training
from multiner.config import load_config, model_config, profile, train_config
from multiner.encoder import encode_batch
from multiner.metrics import AttentionTypeMap, evaluate
from multiner.model import (LossWeights, ModelConfig, ModelOutput, MultiNER, cross_task_attend,
                            head_param_count, joint_loss)
from multiner.synth import SynthSpec, synth_generate, synth_questions
from multiner.tensor import Tensor
from multiner.text import TypeInventory, Vocab, collate, load_nested, make_questions
from multiner.train import evaluate_model, train

ROOT = Path(__file__).resolve().parents[1]
BENCHMARK = ROOT / "configs" / "dependency_benchmark.json"
RESULTS = []


def record(n, title, ok, detail):
    RESULTS.append(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    return ok


def cross_params(d, rng):
    from multiner.encoder import attention_param_shapes, init_param
    shapes = dict(attention_param_shapes("cross.attn", d))
    p = {n: init_param(int(rng.integers(1 << 30)), n, s, k) for n, (s, k) in shapes.items()}
    p["cross.ln.g"] = Tensor(1.0 + 0.1 * rng.normal(size=d))
    p["cross.ln.b"] = Tensor(0.1 * rng.normal(size=d))
    return p


# ---------------------------------------------------------------------------

def test_01_full_scale_scores_documented_not_reproduced():
    readme = (ROOT / "README.md").read_text()
    full = profile("full:ace2004")
    ok = ("not reproduced" in readme and full["encoder"]["d_model"] == 768
          and full["encoder"]["n_layers"] == 12)
    record(1, "full-scale scores out of scope", ok,
           "README states it; full profile carries BERT-base dims for reference")
    assert ok


def test_02_metric_oracle():
    t0 = time.perf_counter()
    load = lambda name: load_nested(FIXTURES / f"ace_example_{name}.jsonl")[0].entities
    gold = load("gold")
    counts = []
    for name in ("single_task", "multi_task"):
        m = evaluate([load(name)], [gold]).micro
        counts.append((m.tp, m.fp, m.fn))
    dt = time.perf_counter() - t0
    ok = counts == [(8, 4, 3), (9, 3, 2)] and dt < 1.0
    record(2, "metric oracle", ok, f"counts {counts}, {dt:.3f} s")
    assert ok


def test_03_gradient_check(tmp_path):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--seed", "0", "--out", str(tmp_path / "g.json")])
    dt = time.perf_counter() - t0
    rep = json.loads((tmp_path / "g.json").read_text())
    ok = (code == 0 and rep["max_rel_error"] < 1e-4 and rep["n_coords"] >= 200
          and rep["tensors_covered"] == rep["tensors"] and dt < 60)
    record(3, "gradient correctness", ok,
           f"max rel err {rep['max_rel_error']:.2e}, {rep['n_coords']} coords, "
           f"{rep['tensors_covered']}/{rep['tensors']} tensors, {dt:.1f} s")
    assert ok


def test_04_overfit():
    t0 = time.perf_counter()
    cfg = profile("toy")
    cfg.update(seed=0, epochs=200, patience=200, target_f1=1.0)
    spec = SynthSpec(n_train=20, n_dev=0, n_test=0)
    docs = synth_generate(spec, 0).train
    types = list(spec.types)
    qs = make_questions(TypeInventory(types), synth_questions(spec))
    vocab = Vocab.build(docs, qs)
    # the training set doubles as the selection set, so the run stops at F1 = 1.0
    res = train(docs, docs, qs, vocab, model_config(cfg, len(vocab), types), train_config(cfg))
    f1 = evaluate_model(res.model, docs, vocab, qs).f1
    dt = time.perf_counter() - t0
    ok = f1 == 1.0 and len(res.history) <= 200 and dt < 300
    record(4, "overfit sanity", ok, f"train F1 {f1:.4f} after {len(res.history)} epochs, {dt:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    out = {}
    for mode, seed in itertools.product(("full", "no_att", "no_diff"), (1, 2, 3)):
        cfg = load_config(str(BENCHMARK), {"seed": seed, "mode": mode})
        t0 = time.perf_counter()
        man = run_training(cfg, root / f"{mode}-{seed}")
        out[mode, seed] = (man["final"]["test"]["micro"]["f1"], time.perf_counter() - t0)
    return out


def test_05_dependency_benefit(benchmark):
    full = [benchmark["full", s][0] for s in (1, 2, 3)]
    no_att = [benchmark["no_att", s][0] for s in (1, 2, 3)]
    secs = sum(benchmark[m, s][1] for m in ("full", "no_att") for s in (1, 2, 3))
    margin = 100 * (np.mean(full) - np.mean(no_att))
    ok = margin >= 0.5 and secs < 1800
    record(5, "full beats no_att", ok,
           f"mean test F1 {np.mean(full):.4f} vs {np.mean(no_att):.4f} "
           f"(+{margin:.2f} points), {secs / 60:.1f} min")
    assert ok


@pytest.mark.xfail(strict=True, reason="on the synthetic benchmark shared heads match or beat "
                   "per-type heads (mean 0.953 vs 0.942 over seeds 1-3); the question "
                   "already tells a shared head which type to extract")
def test_06_full_beats_shared_heads(benchmark):
    full = np.mean([benchmark["full", s][0] for s in (1, 2, 3)])
    no_diff = np.mean([benchmark["no_diff", s][0] for s in (1, 2, 3)])
    ok = full > no_diff
    record(6, "full beats no_diff", ok, f"mean test F1 {full:.4f} vs {no_diff:.4f}")
    assert ok


def test_07_block_permutation_equivariance():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        n, d = int(rng.integers(2, 6)), 8
        lengths = rng.integers(1, 7, size=n)
        states = [Tensor(rng.normal(size=(l, d))) for l in lengths]
        masks = [np.r_[True, rng.random(l - 1) > 0.3] for l in lengths]
        p = cross_params(d, rng)
        base, _ = cross_task_attend(states, p, 2, masks)
        perm = rng.permutation(n)
        out, _ = cross_task_attend([states[i] for i in perm], p, 2, [masks[i] for i in perm])
        for j, i in enumerate(perm):
            worst = max(worst, float(np.abs(out[j].data - base[i].data).max()))
    ok = worst <= 1e-9
    record(7, "block-permutation equivariance", ok, f"50 instances, max |diff| {worst:.1e}")
    assert ok


def test_08_loss_linearity():
    rng = np.random.default_rng(8)
    types = ["PER", "ORG", "LOC"]
    spec = SynthSpec(n_train=30, n_dev=0, n_test=0, max_len=12)
    docs = synth_generate(spec, 8).train
    qs = make_questions(TypeInventory(types), synth_questions(spec))
    vocab = Vocab.build(docs, qs)
    worst = 0.0
    for _ in range(100):
        b = collate([docs[i] for i in rng.choice(len(docs), 2, replace=False)], qs, vocab, 64)
        Tn, BL = b.n_tasks, b.n_contexts * b.seq_len
        tm = b.token_mask.transpose(1, 0, 2).reshape(Tn, -1)
        out = ModelOutput(Tensor(rng.normal(size=(Tn, BL, 2))), Tensor(rng.normal(size=(Tn, BL, 2))),
                          Tensor(rng.normal(size=b.span_labels.shape + (2,))), tm, b.span_cells,
                          b.n_contexts, b.seq_len)
        w = rng.uniform(0, 3, size=3)
        c = float(rng.uniform(0.1, 10))
        base = float(joint_loss(out, b, LossWeights(*w)).total.data)
        scaled = float(joint_loss(out, b, LossWeights(*(c * w))).total.data)
        worst = max(worst, abs(scaled - c * base) / abs(c * base))
    ok = worst <= 1e-12
    record(8, "loss linearity", ok, f"100 pairs, max rel err {worst:.1e}")
    assert ok


def test_09_shape_law():
    rng = np.random.default_rng(9)
    ok = True
    for _ in range(100):
        n, d = int(rng.integers(1, 8)), 4
        lengths = [int(l) for l in rng.integers(1, 20, size=n)]
        states = [Tensor(rng.normal(size=(l, d))) for l in lengths]
        cat = T.concat(states, axis=0)
        bounds = np.cumsum([0] + lengths)
        ok &= cat.shape[0] == sum(lengths)
        ok &= all(np.array_equal(cat.data[a:b], s.data)
                  for s, a, b in zip(states, bounds[:-1], bounds[1:]))
        outs, probs = cross_task_attend(states, cross_params(d, rng), 2)
        ok &= [o.shape[0] for o in outs] == lengths and probs.shape[-1] == sum(lengths)
    record(9, "shape law", ok, "100 task-count/length combinations")
    assert ok


def test_10_masking_exactness():
    types = ["PER", "ORG", "LOC"]
    spec = SynthSpec(n_train=6, n_dev=0, n_test=0, max_len=12)
    docs = synth_generate(spec, 10).train
    qs = make_questions(TypeInventory(types), synth_questions(spec))
    vocab = Vocab.build(docs, qs)
    model = MultiNER(ModelConfig(tiny_encoder(len(vocab), d=16, layers=2), types, "full",
                                 cross_heads=2, seed=10))
    b = collate(docs, qs, vocab, 64)
    pad = ~b.attention_mask
    ecfg = model.cfg.encoder

    def run():
        B, Tn, L = b.ids.shape
        with T.no_grad():
            h = encode_batch(b.ids.reshape(B * Tn, L), b.attention_mask.reshape(B * Tn, L),
                             model.params, ecfg).data.reshape(B, Tn, L, -1)
            loss = float(joint_loss(model.forward(b), b, LossWeights()).total.data)
        return h, loss

    h1, l1 = run()
    b.ids[pad] = np.random.default_rng(0).integers(4, len(vocab), size=int(pad.sum()))
    h2, l2 = run()
    ok = bool(pad.any()) and np.array_equal(h1[~pad], h2[~pad]) and l1 == l2
    record(10, "masking exactness", ok, f"{int(pad.sum())} pad tokens rewritten, loss {l1!r}")
    assert ok


def test_11_serialization():
    rng = np.random.default_rng(11)
    ok_ckpt = True
    for i in range(10):
        types = ["PER", "ORG", "LOC"][:int(rng.integers(1, 4))]
        mode = ["full", "no_att", "no_diff", "single_task_baseline"][int(rng.integers(4))]
        cfg = ModelConfig(tiny_encoder(int(rng.integers(10, 60)), d=8), types, mode,
                          cross_heads=2, seed=int(rng.integers(1 << 30)),
                          dtype=["float64", "float32"][i % 2])
        data = to_bytes(Checkpoint.from_model(MultiNER(cfg), step=i))
        ok_ckpt &= to_bytes(from_bytes(data)) == data

    types = ["PER", "ORG", "LOC"]
    spec = SynthSpec(n_train=5, n_dev=0, n_test=0, max_len=12)
    docs = synth_generate(spec, 11).train
    qs = make_questions(TypeInventory(types), synth_questions(spec))
    vocab = Vocab.build(docs, qs)
    model = MultiNER(ModelConfig(tiny_encoder(len(vocab)), types, "full", cross_heads=2, seed=3))
    raw, maps = export_attention(model, docs, vocab, qs, 64)
    worst, ok_csv = 0.0, True
    for (w, valid, lengths), m in zip(raw, maps):
        parsed = AttentionTypeMap.from_csv(m.to_csv())
        ok_csv &= np.array_equal(parsed.matrix, m.matrix)
        seg = np.repeat(np.arange(len(lengths)), lengths)
        for i, j in itertools.product(range(len(types)), repeat=2):
            vals = [w[q, k] for q in range(len(seg)) for k in range(len(seg))
                    if seg[q] == i and seg[k] == j and valid[q] and valid[k]]
            ref = math.fsum(vals) / len(vals)
            worst = max(worst, abs(parsed.matrix[i, j] - ref) / ref)
    ok = ok_ckpt and ok_csv and worst <= 4 * np.finfo(float).eps
    record(11, "serialization", ok, f"10 checkpoints byte-identical={ok_ckpt}; CSV vs "
           f"brute force max rel err {worst:.1e}")
    assert ok


@pytest.mark.xfail(strict=True, reason="2·(768·2+2) + (1536·1536+1536) + (1536·2+2) sums to "
                   "2,366,982; the stated total 2,368,516 is off by 1,534 (see notes)")
def test_12_head_parameter_count():
    n = head_param_count(768, 1)
    ok = n == 2_368_516
    record(12, "head parameter count", ok, f"head_param_count(768) = {n:,}; stated 2,368,516")
    assert ok
