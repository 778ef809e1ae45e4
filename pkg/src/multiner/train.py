"""Joint multi-task training with Adam, dev-based model selection and early stopping."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Set

import numpy as np

from . import tensor as T
from .metrics import DecodeThresholds, EvalReport, decode_document, evaluate
from .model import LossWeights, ModelConfig, MultiNER, joint_loss
from .optim import AdamState, adam_step
from .rng import stream
from .text import (ContextDocument, EntitySpan, QuestionTemplate, TypeInventory, Vocab, batch,
                   doc_to_record)

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, msg: str, dump: dict):
        super().__init__(msg)
        self.dump = dump


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 50
    patience: int = 10
    max_len: int = 128
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    thresholds: DecodeThresholds = field(default_factory=DecodeThresholds)
    target_f1: Optional[float] = None   # stop once dev micro-F1 reaches this

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: MultiNER
    history: List[dict]
    best_epoch: int
    best_dev_f1: float
    step: int
    rng_state: dict


def predict_corpus(model: MultiNER, docs: Sequence[ContextDocument], vocab: Vocab,
                   questions: Sequence[QuestionTemplate], max_len: int = 128,
                   batch_size: int = 16, th: DecodeThresholds = DecodeThresholds(),
                   threads: int = 1) -> List[Set[EntitySpan]]:
    """Decoded span set of every document, in input order."""
    inv = TypeInventory(model.types)
    out: List[Set[EntitySpan]] = []
    for b in batch(docs, inv, questions, vocab, batch_size, max_len):
        triples = model.predict(b)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                out.extend(ex.map(lambda row: decode_document(row, th), triples))
        else:
            out.extend(decode_document(row, th) for row in triples)
    return out


def evaluate_model(model: MultiNER, docs: Sequence[ContextDocument], vocab: Vocab,
                   questions: Sequence[QuestionTemplate], max_len: int = 128,
                   th: DecodeThresholds = DecodeThresholds(), batch_size: int = 16) -> EvalReport:
    preds = predict_corpus(model, docs, vocab, questions, max_len, batch_size, th)
    return evaluate(preds, [d.entities for d in docs], model.types,
                    [d.doc_id for d in docs])


def _snapshot(model: MultiNER) -> Dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.params.items()}


def train(train_docs: Sequence[ContextDocument], dev_docs: Sequence[ContextDocument],
          questions: Sequence[QuestionTemplate], vocab: Vocab, model_cfg: ModelConfig,
          cfg: TrainConfig, model: Optional[MultiNER] = None) -> TrainResult:
    if not dev_docs:
        raise ValueError("a dev set is required for model selection")
    model = model or MultiNER(model_cfg)
    inv = TypeInventory(model.types)
    w = cfg.weights
    if w.alpha == w.beta == w.gamma == 0:
        log.warning("event=zero_loss_weights msg=all loss weights are zero")
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = stream(cfg.seed, "shuffle")
    dropout_rng = stream(cfg.seed, "dropout")

    history: List[dict] = []
    best = (-1.0, 0, _snapshot(model))
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        sums: Dict[str, float] = {}
        n_batches = 0
        total = 0.0
        for b in batch(train_docs, inv, questions, vocab, cfg.batch_size, cfg.max_len,
                       shuffle=True, rng=shuffle_rng):
            out = model.forward(b, train=True, rng=dropout_rng)
            lb = joint_loss(out, b, w, model.types)
            value = float(lb.total.data)
            if not math.isfinite(value):
                dump = {"epoch": epoch, "step": opt.step, "parts": lb.parts,
                        "docs": [doc_to_record(d) for d in b.docs]}
                raise NonFiniteLossError(f"non-finite loss {value} at step {opt.step}", dump)
            T.backward(lb.total)
            adam_step(opt, model.params)
            total += value
            for k, v in lb.parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        rep = evaluate_model(model, dev_docs, vocab, questions, cfg.max_len, cfg.thresholds)
        rec = {"epoch": epoch, "loss": total / max(n_batches, 1),
               "parts": {k: v / max(n_batches, 1) for k, v in sums.items()},
               "dev_precision": rep.precision, "dev_recall": rep.recall, "dev_f1": rep.f1}
        history.append(rec)
        log.info("event=epoch epoch=%d loss=%.6f dev_f1=%.4f", epoch, rec["loss"], rep.f1)
        if rep.f1 > best[0]:
            best = (rep.f1, epoch, _snapshot(model))
            since_best = 0
        else:
            since_best += 1
        if cfg.target_f1 is not None and rep.f1 >= cfg.target_f1:
            break
        if since_best >= cfg.patience:
            log.info("event=early_stop epoch=%d best_epoch=%d", epoch, best[1])
            break
    for n, p in model.params.items():
        p.data = best[2][n]
    return TrainResult(model, history, best[1], best[0], opt.step,
                       shuffle_rng.bit_generator.state)
