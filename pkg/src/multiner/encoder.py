"""Shared pre-norm transformer encoder standing in for BERT.

Parameters live in a flat ``name -> Tensor`` dict so that the same dict
objects are shared by every task (and by the model that owns them).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import ContractError, Tensor


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_positions: int = 128
    dropout: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")

    def to_dict(self):
        return asdict(self)


def init_param(seed: int, name: str, shape, kind: str, dtype=np.float64) -> Tensor:
    """Each tensor draws from its own named stream, so two models that
    share a parameter name and shape start from identical values."""
    rng = stream(seed, "init/" + name)
    if kind == "zeros":
        data = np.zeros(shape)
    elif kind == "ones":
        data = np.ones(shape)
    elif kind == "embed":
        data = rng.normal(0.0, 0.02, size=shape)
    elif kind == "linear":
        fan_in, fan_out = shape[-2], shape[-1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape)
    else:
        raise ValueError(kind)
    return Tensor(data.astype(dtype), requires_grad=True, name=name)


def attention_param_shapes(prefix: str, d: int) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    # No key bias: it adds a per-query constant to every score, which the
    # softmax cancels, so it would never receive a gradient.
    out = {}
    for w in ("q", "k", "v", "o"):
        out[f"{prefix}.w{w}"] = ((d, d), "linear")
        if w != "k":
            out[f"{prefix}.b{w}"] = ((d,), "zeros")
    return out


def encoder_param_shapes(cfg: EncoderConfig) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    d = cfg.d_model
    shapes = {"enc.tok_emb": ((cfg.vocab_size, d), "embed"),
              "enc.pos_emb": ((cfg.max_positions, d), "embed")}
    for i in range(cfg.n_layers):
        p = f"enc.layer{i}"
        shapes[f"{p}.ln1.g"] = ((d,), "ones")
        shapes[f"{p}.ln1.b"] = ((d,), "zeros")
        shapes.update(attention_param_shapes(f"{p}.attn", d))
        shapes[f"{p}.ln2.g"] = ((d,), "ones")
        shapes[f"{p}.ln2.b"] = ((d,), "zeros")
        shapes[f"{p}.ffn.w1"] = ((d, cfg.d_ff), "linear")
        shapes[f"{p}.ffn.b1"] = ((cfg.d_ff,), "zeros")
        shapes[f"{p}.ffn.w2"] = ((cfg.d_ff, d), "linear")
        shapes[f"{p}.ffn.b2"] = ((d,), "zeros")
    shapes["enc.ln_f.g"] = ((d,), "ones")
    shapes["enc.ln_f.b"] = ((d,), "zeros")
    return shapes


def attention_param_count(d: int) -> int:
    return 4 * d * d + 3 * d


def count_params(cfg: EncoderConfig) -> int:
    """Closed-form learnable parameter count of the encoder."""
    d, f = cfg.d_model, cfg.d_ff
    per_layer = attention_param_count(d) + (d * f + f) + (f * d + d) + 2 * 2 * d
    return (cfg.vocab_size + cfg.max_positions) * d + cfg.n_layers * per_layer + 2 * d


def multi_head_attention(x: Tensor, params: Dict[str, Tensor], prefix: str, n_heads: int,
                         key_mask: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Self-attention over x of shape (N, L, d); ``key_mask`` (N, L) is False on
    keys that must get zero weight.  Returns the projected output and the
    post-softmax weights (N, heads, L, L)."""
    N, L, d = x.shape
    dh = d // n_heads

    def split(name):
        y = x @ params[f"{prefix}.w{name}"]
        if name != "k":
            y = y + params[f"{prefix}.b{name}"]
        return y.reshape(N, L, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split("q"), split("k"), split("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    probs = T.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(N, L, d)
    return ctx @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"], probs


def encode_batch(ids: np.ndarray, attention_mask: np.ndarray, params: Dict[str, Tensor],
                 cfg: EncoderConfig, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Encode (N, L) token ids into hidden states (N, L, d_model)."""
    ids = np.asarray(ids)
    N, L = ids.shape
    if L > cfg.max_positions:
        raise ContractError(f"sequence length {L} exceeds max_positions={cfg.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractError("token id outside vocabulary")
    p = params
    h = T.embedding(p["enc.tok_emb"], ids) + p["enc.pos_emb"][:L]
    h = T.dropout(h, cfg.dropout, rng, train)
    for i in range(cfg.n_layers):
        pre = f"enc.layer{i}"
        a = T.layer_norm(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], cfg.ln_eps)
        a, _ = multi_head_attention(a, p, f"{pre}.attn", cfg.n_heads, attention_mask)
        h = h + T.dropout(a, cfg.dropout, rng, train)
        f = T.layer_norm(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], cfg.ln_eps)
        f = T.gelu(f @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"])
        f = f @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]
        h = h + T.dropout(f, cfg.dropout, rng, train)
    return T.layer_norm(h, p["enc.ln_f.g"], p["enc.ln_f.b"], cfg.ln_eps)


def encode(task_input, params: Dict[str, Tensor], cfg: EncoderConfig, train: bool = False,
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Hidden states (L, d_model) for a single TaskInput."""
    h = encode_batch(task_input.ids[None, :], task_input.attention_mask[None, :], params,
                     cfg, train, rng)
    return h.reshape(h.shape[1:])
