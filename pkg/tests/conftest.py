from pathlib import Path

import numpy as np
import pytest

from multiner.encoder import EncoderConfig
from multiner.model import ModelConfig, MultiNER
from multiner.synth import SynthSpec, synth_generate, synth_questions
from multiner.text import TypeInventory, Vocab, collate, load_nested, make_questions

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def ace_example():
    load = lambda name: load_nested(FIXTURES / f"ace_example_{name}.jsonl")[0]
    return {"gold": load("gold"), "single_task": load("single_task"),
            "multi_task": load("multi_task")}


def tiny_encoder(vocab_size, d=8, layers=1, heads=2, ff=16, max_pos=64, dropout=0.0):
    return EncoderConfig(vocab_size, d_model=d, n_layers=layers, n_heads=heads, d_ff=ff,
                         max_positions=max_pos, dropout=dropout)


def toy_problem(types=("PER", "ORG", "LOC"), n_docs=4, seed=3, mode="full", d=8,
                ambiguity=0.3, dtype="float64", **enc):
    """Small corpus, questions, vocab, one collated batch and a model."""
    spec = SynthSpec(types=tuple(types), n_train=n_docs, n_dev=2, n_test=2, min_len=5,
                     max_len=10, max_mentions=2,
                     ambiguity_rate=ambiguity if {"PER", "ORG", "LOC"} <= set(types) else 0.0)
    corpus = synth_generate(spec, seed)
    inv = TypeInventory(list(types))
    qs = make_questions(inv, synth_questions(spec))
    vocab = Vocab.build(corpus.train + corpus.dev + corpus.test, qs)
    cfg = ModelConfig(tiny_encoder(len(vocab), d=d, **enc), list(types), mode, cross_heads=2,
                      seed=seed, dtype=dtype)
    model = MultiNER(cfg)
    b = collate(corpus.train, qs, vocab, 64)
    return dict(corpus=corpus, inv=inv, qs=qs, vocab=vocab, cfg=cfg, model=model, batch=b,
                spec=spec)


@pytest.fixture
def toy():
    return toy_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
