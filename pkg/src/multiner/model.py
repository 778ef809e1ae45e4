"""Multi-NER: shared encoder, cross-task self-attention and per-type heads.

The |Y| task sequences of a context are encoded independently by the
shared encoder, concatenated along the token axis, passed through one
self-attention sublayer (attention, residual, layer norm; no positional
parameters) and split back into per-task segments before the heads.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .encoder import (EncoderConfig, attention_param_count, attention_param_shapes, count_params, encode_batch,
                      encoder_param_shapes, init_param, multi_head_attention)
from .tensor import ContractError, Tensor

MODES = ("full", "no_att", "no_diff", "single_task_baseline")


def uses_cross_attention(mode: str) -> bool:
    return mode in ("full", "no_diff")


def shares_heads(mode: str) -> bool:
    return mode in ("no_diff", "single_task_baseline")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    types: List[str]
    mode: str = "full"
    cross_heads: int = 4
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.encoder.d_model % self.cross_heads:
            raise ValueError("d_model not divisible by cross_heads")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, not {self.dtype}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["types"] = list(self.types)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


def head_param_count(d_model: int, n_types: int, mode: str = "full") -> int:
    """Closed-form head parameter count: start and end linear maps (d -> 2)
    plus the span MLP (2d -> 2d -> 2), once per type or once if shared."""
    d = d_model
    per_type = 2 * (d * 2 + 2) + (2 * d * 2 * d + 2 * d) + (2 * d * 2 + 2)
    return per_type * (1 if shares_heads(mode) else n_types)


def cross_attention_param_count(d_model: int) -> int:
    return attention_param_count(d_model) + 2 * d_model


def model_param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    d = cfg.encoder.d_model
    shapes = dict(encoder_param_shapes(cfg.encoder))
    if uses_cross_attention(cfg.mode):
        shapes.update(attention_param_shapes("cross.attn", d))
        shapes["cross.ln.g"] = ((d,), "ones")
        shapes["cross.ln.b"] = ((d,), "zeros")
    H = 1 if shares_heads(cfg.mode) else len(cfg.types)
    shapes["heads.start.w"] = ((H, d, 2), "linear")
    shapes["heads.start.b"] = ((H, 1, 2), "zeros")
    shapes["heads.end.w"] = ((H, d, 2), "linear")
    shapes["heads.end.b"] = ((H, 1, 2), "zeros")
    shapes["heads.span.w1"] = ((H, 2 * d, 2 * d), "linear")
    shapes["heads.span.b1"] = ((H, 1, 2 * d), "zeros")
    shapes["heads.span.w2"] = ((H, 2 * d, 2), "linear")
    shapes["heads.span.b2"] = ((H, 1, 2), "zeros")
    return shapes


def total_param_count(cfg: ModelConfig) -> int:
    n = count_params(cfg.encoder) + head_param_count(cfg.encoder.d_model, len(cfg.types), cfg.mode)
    if uses_cross_attention(cfg.mode):
        n += cross_attention_param_count(cfg.encoder.d_model)
    return n


@dataclass
class PredictionTriple:
    """Logits of one (context, task) pair.  Invalid span cells hold 0.0 and
    are flagged off in ``span_mask``."""
    type_name: str
    start: np.ndarray       # (L, 2)
    end: np.ndarray         # (L, 2)
    span: np.ndarray        # (L, L, 2)
    token_mask: np.ndarray  # (L,)
    span_mask: np.ndarray   # (L, L)
    context_offset: int
    context_length: int


@dataclass
class ModelOutput:
    """Batched head logits laid out task-major: start/end (T, B*L, 2),
    span (T, C, 2) over the batch's valid span cells."""
    start: Tensor
    end: Tensor
    span: Tensor
    token_mask: np.ndarray  # (T, B*L)
    span_cells: Tuple[np.ndarray, np.ndarray, np.ndarray]
    n_contexts: int
    seq_len: int
    attention: Optional[np.ndarray] = None  # (B, T*L, T*L), head-averaged

    def triples(self, batch) -> List[List[PredictionTriple]]:
        B, L = self.n_contexts, self.seq_len
        Tn = self.start.shape[0]
        st = self.start.data.reshape(Tn, B, L, 2)
        en = self.end.data.reshape(Tn, B, L, 2)
        cb, cs, ce = self.span_cells
        out = []
        for b in range(B):
            row = []
            for t in range(Tn):
                ti, tg = batch.inputs[b][t], batch.targets[b][t]
                span = np.zeros((L, L, 2), dtype=self.span.dtype)
                sel = cb[t] == b
                span[cs[t][sel], ce[t][sel]] = self.span.data[t][sel]
                row.append(PredictionTriple(ti.type_name, st[t, b].copy(), en[t, b].copy(), span,
                                            tg.token_mask.copy(), tg.span_mask.copy(),
                                            ti.context_offset, ti.context_length))
            out.append(row)
        return out


def cross_task_attend(states: Sequence[Tensor], params: Dict[str, Tensor], n_heads: int,
                      key_masks: Optional[Sequence[np.ndarray]] = None, eps: float = 1e-5,
                      dropout: float = 0.0, train: bool = False,
                      rng: Optional[np.random.Generator] = None
                      ) -> Tuple[List[Tensor], Tensor]:
    """Apply the cross-task sublayer to a list of per-task states.

    ``states`` are (L_i, d) or batched (N, L_i, d) tensors in inventory
    order.  Returns the per-task output segments and the attention weights.
    """
    if not states:
        raise ContractError("no task states given")
    d = states[0].shape[-1]
    if any(s.shape[-1] != d for s in states):
        raise ContractError("task states disagree on d_model")
    squeeze = states[0].ndim == 2
    xs = [s.reshape(1, *s.shape) if squeeze else s for s in states]
    lengths = [x.shape[1] for x in xs]
    x = T.concat(xs, axis=1)
    N = x.shape[0]
    if key_masks is None:
        km = np.ones((N, x.shape[1]), dtype=bool)
    else:
        km = np.concatenate([np.broadcast_to(np.asarray(m, dtype=bool), (N, l))
                             for m, l in zip(key_masks, lengths)], axis=1)
    y, probs = _cross_sublayer(x, km, params, n_heads, eps, dropout, train, rng)
    outs, pos = [], 0
    for l in lengths:
        seg = y[:, pos:pos + l]
        outs.append(seg.reshape(seg.shape[1:]) if squeeze else seg)
        pos += l
    return outs, probs


def _cross_sublayer(x: Tensor, key_mask: np.ndarray, params, n_heads, eps, dropout, train, rng):
    a, probs = multi_head_attention(x, params, "cross.attn", n_heads, key_mask)
    h = x + T.dropout(a, dropout, rng, train)
    return T.layer_norm(h, params["cross.ln.g"], params["cross.ln.b"], eps), probs


class MultiNER:
    def __init__(self, cfg: ModelConfig, params: Optional[Dict[str, Tensor]] = None):
        self.cfg = cfg
        shapes = model_param_shapes(cfg)
        dtype = np.dtype(cfg.dtype)
        if params is None:
            params = {name: init_param(cfg.seed, name, shape, kind, dtype)
                      for name, (shape, kind) in shapes.items()}
        else:
            want = {n: s for n, (s, _) in shapes.items()}
            got = {n: tuple(p.shape) for n, p in params.items()}
            if want != got:
                raise ContractError("parameter set does not match the model config/mode")
        self.params = params

    @property
    def mode(self) -> str:
        return self.cfg.mode

    @property
    def types(self) -> List[str]:
        return self.cfg.types

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def forward(self, batch, train: bool = False, rng: Optional[np.random.Generator] = None,
                keep_attention: bool = False) -> ModelOutput:
        cfg, p = self.cfg, self.params
        ecfg = cfg.encoder
        B, Tn, L = batch.ids.shape
        if Tn != len(cfg.types):
            raise ContractError(f"batch has {Tn} tasks, model expects {len(cfg.types)}")
        d = ecfg.d_model
        h = encode_batch(batch.ids.reshape(B * Tn, L), batch.attention_mask.reshape(B * Tn, L),
                         p, ecfg, train, rng)
        attention = None
        if uses_cross_attention(cfg.mode):
            x = h.reshape(B, Tn * L, d)
            km = batch.attention_mask.reshape(B, Tn * L)
            x, probs = _cross_sublayer(x, km, p, cfg.cross_heads, ecfg.ln_eps, ecfg.dropout,
                                       train, rng)
            if keep_attention:
                attention = probs.data.mean(axis=1)
            h = x
        # task-major layout (T, B*L, d)
        ht = h.reshape(B, Tn, L, d).transpose(1, 0, 2, 3).reshape(Tn, B * L, d)
        start = ht @ p["heads.start.w"] + p["heads.start.b"]
        end = ht @ p["heads.end.w"] + p["heads.end.b"]

        # span MLP over concat(h_s, h_e): W1 splits into the h_s and h_e blocks
        w1 = p["heads.span.w1"]
        a = ht @ w1[:, :d, :]
        c = ht @ w1[:, d:, :]
        cb, cs, ce = batch.span_cells
        tix = np.arange(Tn)[:, None]
        pre = a[tix, cb * L + cs] + c[tix, cb * L + ce] + p["heads.span.b1"]
        span = T.gelu(pre) @ p["heads.span.w2"] + p["heads.span.b2"]
        tmask = batch.token_mask.transpose(1, 0, 2).reshape(Tn, B * L)
        return ModelOutput(start, end, span, tmask, batch.span_cells, B, L, attention)

    def predict(self, batch) -> List[List[PredictionTriple]]:
        with T.no_grad():
            out = self.forward(batch, train=False)
        return out.triples(batch)


@dataclass
class LossBreakdown:
    total: Tensor
    parts: Dict[str, float] = field(default_factory=dict)


def joint_loss(out: ModelOutput, batch, weights: LossWeights,
               types: Optional[Sequence[str]] = None) -> LossBreakdown:
    """Sum over tasks of alpha*CE_start + beta*CE_end + gamma*CE_span, each a
    masked-mean cross-entropy over that task's valid positions in the batch."""
    B, Tn, L = batch.ids.shape
    tmask = batch.token_mask.transpose(1, 0, 2).reshape(Tn, B * L)
    if not np.array_equal(tmask, out.token_mask) or any(
            not np.array_equal(a, b) for a, b in zip(out.span_cells, batch.span_cells)):
        raise ContractError("prediction masks do not match target masks")
    types = list(types) if types is not None else [str(t) for t in range(Tn)]
    st = batch.start.transpose(1, 0, 2).reshape(Tn, B * L)
    en = batch.end.transpose(1, 0, 2).reshape(Tn, B * L)
    cell_mask = np.ones(batch.span_labels.shape[1], dtype=bool)
    total = None
    parts = {}
    for t in range(Tn):
        ls = T.cross_entropy(out.start[t], st[t], tmask[t])
        le = T.cross_entropy(out.end[t], en[t], tmask[t])
        lp = T.cross_entropy(out.span[t], batch.span_labels[t], cell_mask)
        parts[f"{types[t]}.start"] = float(ls.data)
        parts[f"{types[t]}.end"] = float(le.data)
        parts[f"{types[t]}.span"] = float(lp.data)
        term = ls * weights.alpha + le * weights.beta + lp * weights.gamma
        total = term if total is None else total + term
    return LossBreakdown(total, parts)
