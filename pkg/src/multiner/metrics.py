"""Span decoding, exact-match P/R/F1, error listings and attention type maps."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np

from .text import EntitySpan


@dataclass(frozen=True)
class DecodeThresholds:
    start: float = 0.5
    end: float = 0.5
    span: float = 0.5

    def __post_init__(self):
        for name in ("start", "end", "span"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"threshold {name}={v} must lie strictly in (0, 1)")


def _positive_prob(logits: np.ndarray) -> np.ndarray:
    # P(class 1) of a 2-way softmax, written as a stable sigmoid of the margin
    z = logits[..., 1] - logits[..., 0]
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def decode(pred, th: DecodeThresholds = DecodeThresholds()) -> Set[EntitySpan]:
    """Start/end/match decoding of one PredictionTriple into context spans."""
    off, n = pred.context_offset, pred.context_length
    ps = _positive_prob(pred.start[off:off + n])
    pe = _positive_prob(pred.end[off:off + n])
    starts = np.flatnonzero(ps > th.start)
    ends = np.flatnonzero(pe > th.end)
    out = set()
    if not len(starts) or not len(ends):
        return out
    pspan = _positive_prob(pred.span[off:off + n, off:off + n])
    for s in starts:
        for e in ends[ends >= s]:
            if pspan[s, e] > th.span:
                out.add(EntitySpan(pred.type_name, int(s), int(e)))
    return out


def decode_document(triples, th: DecodeThresholds = DecodeThresholds()) -> Set[EntitySpan]:
    spans = set()
    for tr in triples:
        spans |= decode(tr, th)
    return spans


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __iadd__(self, other: "Counts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


@dataclass
class DocErrors:
    doc_index: int
    false_positives: List[EntitySpan]
    false_negatives: List[EntitySpan]
    doc_id: Optional[str] = None

    def to_dict(self) -> dict:
        fmt = lambda spans: [[s.type, s.start, s.end] for s in spans]
        return {"doc_index": self.doc_index, "doc_id": self.doc_id,
                "false_positives": fmt(self.false_positives),
                "false_negatives": fmt(self.false_negatives)}


@dataclass
class EvalReport:
    per_type: Dict[str, Counts]
    micro: Counts
    errors: List[DocErrors] = field(default_factory=list)

    @property
    def precision(self) -> float:
        return self.micro.precision

    @property
    def recall(self) -> float:
        return self.micro.recall

    @property
    def f1(self) -> float:
        return self.micro.f1

    def to_dict(self) -> dict:
        return {"micro": self.micro.to_dict(),
                "per_type": {t: c.to_dict() for t, c in self.per_type.items()},
                "errors": [e.to_dict() for e in self.errors]}


def _by_type(spans: Iterable[EntitySpan]) -> Dict[str, Set[EntitySpan]]:
    out: Dict[str, Set[EntitySpan]] = {}
    for s in spans:
        out.setdefault(s.type, set()).add(s)
    return out


def error_report(preds: Sequence[Iterable[EntitySpan]], golds: Sequence[Iterable[EntitySpan]],
                 doc_ids: Optional[Sequence[Optional[str]]] = None) -> List[DocErrors]:
    """False positive / false negative spans of every document that has any."""
    out = []
    for i, (p, g) in enumerate(zip(preds, golds)):
        p, g = set(p), set(g)
        fp, fn = sorted(p - g), sorted(g - p)
        if fp or fn:
            out.append(DocErrors(i, fp, fn, doc_ids[i] if doc_ids else None))
    return out


def evaluate(preds: Sequence[Iterable[EntitySpan]], golds: Sequence[Iterable[EntitySpan]],
             types: Optional[Sequence[str]] = None,
             doc_ids: Optional[Sequence[Optional[str]]] = None) -> EvalReport:
    """Exact (type, start, end) matching with set semantics per document and type."""
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} prediction docs vs {len(golds)} gold docs")
    preds = [set(p) for p in preds]
    golds = [set(g) for g in golds]
    names = list(types) if types is not None else []
    for spans in preds + golds:
        for s in spans:
            if s.type not in names:
                names.append(s.type)
    per_type = {t: Counts() for t in names}
    for p, g in zip(preds, golds):
        pt, gt = _by_type(p), _by_type(g)
        for t in set(pt) | set(gt):
            ps, gs = pt.get(t, set()), gt.get(t, set())
            per_type[t] += Counts(len(ps & gs), len(ps - gs), len(gs - ps))
    micro = Counts()
    for c in per_type.values():
        micro += c
    return EvalReport(per_type, micro, error_report(preds, golds, doc_ids))


# ---------------------------------------------------------------------------
# attention type maps
# ---------------------------------------------------------------------------

@dataclass
class AttentionTypeMap:
    types: List[str]
    matrix: np.ndarray                 # (T, T); row = query type, column = key type
    empty: np.ndarray                  # (T, T) bool, True where a segment had no tokens
    n_examples: int = 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + self.types)
        for t, row in zip(self.types, self.matrix):
            w.writerow([t] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AttentionTypeMap":
        rows = list(csv.reader(io.StringIO(text)))
        types = rows[0][1:]
        m = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(types, m, np.zeros_like(m, dtype=bool))


def aggregate_attention(weights: np.ndarray, lengths: Sequence[int],
                        valid: Optional[np.ndarray] = None,
                        types: Optional[Sequence[str]] = None) -> AttentionTypeMap:
    """Block means of cross-task attention weights.

    ``weights`` is (N, N), (B, N, N) or (B, heads, N, N) over the
    concatenation of task segments of the given ``lengths``; heads are
    averaged first.  ``valid`` (N,) or (B, N) marks non-pad positions.
    Entry (i, j) is the mean weight from valid queries of segment i to valid
    keys of segment j, averaged over examples where both are non-empty.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    elif w.ndim == 4:
        w = w.mean(axis=1)
    B, N, _ = w.shape
    if sum(lengths) != N:
        raise ValueError(f"segment lengths sum to {sum(lengths)}, weights have {N} positions")
    if valid is None:
        valid = np.ones((B, N), dtype=bool)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), (B, N))
    T_ = len(lengths)
    seg = np.repeat(np.arange(T_), lengths)
    total = np.zeros((T_, T_))
    defined = np.zeros((T_, T_))
    for b in range(B):
        ind = np.zeros((T_, N))
        ind[seg[valid[b]], np.flatnonzero(valid[b])] = 1.0
        cnt = ind.sum(axis=1)
        block = ind @ w[b] @ ind.T
        ok = np.outer(cnt > 0, cnt > 0)
        denom = np.where(ok, np.outer(cnt, cnt), 1.0)
        total += np.where(ok, block / denom, 0.0)
        defined += ok
    matrix = np.where(defined > 0, total / np.maximum(defined, 1), 0.0)
    names = list(types) if types is not None else [str(i) for i in range(T_)]
    return AttentionTypeMap(names, matrix, defined == 0, B)


def combine_maps(maps: Sequence[AttentionTypeMap]) -> AttentionTypeMap:
    """Corpus mean of per-example maps, each cell averaged where it is defined."""
    if not maps:
        raise ValueError("no attention maps to combine")
    types = maps[0].types
    if any(m.types != types for m in maps):
        raise ValueError("attention maps disagree on the type inventory")
    total = np.zeros_like(maps[0].matrix)
    defined = np.zeros(total.shape)
    for m in maps:
        # a map over several examples counts once per example it summarises
        w = m.n_examples
        total += np.where(m.empty, 0.0, m.matrix * w)
        defined += np.where(m.empty, 0, w)
    matrix = np.where(defined > 0, total / np.maximum(defined, 1), 0.0)
    return AttentionTypeMap(list(types), matrix, defined == 0, sum(m.n_examples for m in maps))
