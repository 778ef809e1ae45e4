"""Corpus readers, vocabulary, MRC task inputs, target tensors and batching.

All entity indices are inclusive token positions inside the context.  A
context of ``n`` tokens and a question of ``l`` tokens become the task
sequence ``[CLS] q_1..q_l [SEP] x_1..x_n [PAD]...`` with the context
starting at offset ``2 + l``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np

log = logging.getLogger(__name__)

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
RESERVED = (PAD, CLS, SEP, UNK)
PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class EntitySpan:
    type: str
    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise ValidationError(f"span start {self.start} > end {self.end}")


@dataclass
class ContextDocument:
    tokens: List[str]
    entities: List[EntitySpan] = field(default_factory=list)
    doc_id: Optional[str] = None

    def __len__(self):
        return len(self.tokens)

    def spans_of(self, type_name: str) -> List[EntitySpan]:
        return [e for e in self.entities if e.type == type_name]


class TypeInventory:
    """Ordered entity type names; task ``i`` handles type ``names[i]``."""

    def __init__(self, names: Sequence[str]):
        names = list(names)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate type names in {names}")
        if not names:
            raise ValueError("empty type inventory")
        self.names = names
        self._ids = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name):
        return name in self._ids

    def __eq__(self, other):
        return isinstance(other, TypeInventory) and self.names == other.names

    def __repr__(self):
        return f"TypeInventory({self.names})"

    def id(self, name: str) -> int:
        return self._ids[name]

    @classmethod
    def from_documents(cls, docs: Iterable[ContextDocument]) -> "TypeInventory":
        return cls(sorted({e.type for d in docs for e in d.entities}))


@dataclass(frozen=True)
class QuestionTemplate:
    type_name: str
    tokens: Tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError(f"empty question for type {self.type_name}")


def make_questions(inventory: TypeInventory, texts: Mapping[str, str]) -> List[QuestionTemplate]:
    missing = [n for n in inventory if n not in texts]
    if missing:
        raise ValueError(f"no question for types {missing}")
    return [QuestionTemplate(n, tuple(texts[n].lower().split())) for n in inventory]


def load_question_file(path) -> Dict[str, str]:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ValueError(f"{path}: question file must map type name -> question string")
    return data


class Vocab:
    """Word-level vocabulary with reserved ids [PAD]=0 [CLS]=1 [SEP]=2 [UNK]=3."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: List[str] = list(RESERVED)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def tokens(self) -> List[str]:
        """Non-reserved tokens in id order (for serialization)."""
        return self.itos[len(RESERVED):]

    @classmethod
    def build(cls, docs: Iterable[ContextDocument], questions: Sequence[QuestionTemplate] = (),
              min_freq: int = 1) -> "Vocab":
        counts: Dict[str, int] = {}
        order: List[str] = []
        for q in questions:
            for t in q.tokens:
                if t not in counts:
                    order.append(t)
                counts[t] = counts.get(t, 0) + max(min_freq, 1)
        for d in docs:
            for t in d.tokens:
                if t not in counts:
                    order.append(t)
                counts[t] = counts.get(t, 0) + 1
        return cls([t for t in order if counts[t] >= min_freq and t not in RESERVED])


# ---------------------------------------------------------------------------
# BIO format
# ---------------------------------------------------------------------------

def bio_to_spans(tags: Sequence[str], strict: bool = False) -> List[EntitySpan]:
    spans: List[EntitySpan] = []
    start: Optional[int] = None
    cur: Optional[str] = None
    for i, tag in enumerate(list(tags) + ["O"]):
        if tag == "O":
            prefix, label = "O", None
        elif len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
            prefix, label = tag[0], tag[2:]
        else:
            raise ParseError(f"bad BIO tag {tag!r} at token {i}")
        if prefix == "I" and cur == label:
            continue
        if cur is not None:
            spans.append(EntitySpan(cur, start, i - 1))
            start = cur = None
        if prefix == "I" and strict:
            raise ParseError(f"I-{label} at token {i} does not continue a {label} span")
        if prefix in "BI" and label is not None:
            start, cur = i, label
    return spans


def spans_to_bio(n: int, spans: Iterable[EntitySpan]) -> List[str]:
    tags = ["O"] * n
    for s in sorted(spans, key=lambda s: (s.start, s.end)):
        if any(t != "O" for t in tags[s.start:s.end + 1]):
            raise ValueError("overlapping spans cannot be written as BIO")
        tags[s.start] = f"B-{s.type}"
        for i in range(s.start + 1, s.end + 1):
            tags[i] = f"I-{s.type}"
    return tags


def read_bio_corpus(stream: TextIO, strict: bool = False) -> List[ContextDocument]:
    """Blank-line separated sentences, one ``token ... tag`` line per token.

    The first column is the token, the last the tag; every line of a file
    must have the same number of columns.
    """
    docs: List[ContextDocument] = []
    tokens: List[str] = []
    tags: List[str] = []
    ncols: Optional[int] = None

    def flush():
        if tokens:
            try:
                spans = bio_to_spans(tags, strict=strict)
            except ParseError as exc:
                raise ParseError(f"sentence ending before line {lineno}: {exc}") from None
            docs.append(ContextDocument(list(tokens), spans))
            tokens.clear()
            tags.clear()

    lineno = 0
    for lineno, line in enumerate(stream, 1):
        cols = line.split()
        if not cols:
            flush()
            continue
        if cols[0] == "-DOCSTART-":
            continue
        if ncols is None:
            ncols = len(cols)
        if len(cols) != ncols or len(cols) < 2:
            raise ParseError(f"line {lineno}: expected {ncols} columns, got {len(cols)}")
        tokens.append(cols[0])
        tags.append(cols[-1])
    lineno += 1
    flush()
    return docs


# ---------------------------------------------------------------------------
# nested record format (one JSON object per line)
# ---------------------------------------------------------------------------

def doc_to_record(doc: ContextDocument) -> dict:
    rec = {}
    if doc.doc_id is not None:
        rec["id"] = doc.doc_id
    rec["context"] = list(doc.tokens)
    rec["entities"] = [{"type": e.type, "start": e.start, "end": e.end}
                       for e in sorted(doc.entities, key=lambda e: (e.type, e.start, e.end))]
    return rec


def read_nested_corpus(stream: TextIO) -> List[ContextDocument]:
    docs = []
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"record at line {lineno}: invalid JSON ({exc})") from None
        name = rec.get("id", f"line {lineno}") if isinstance(rec, dict) else f"line {lineno}"
        if not isinstance(rec, dict) or not isinstance(rec.get("context"), list):
            raise ValidationError(f"record {name}: missing token list 'context'")
        tokens = [str(t) for t in rec["context"]]
        spans = []
        for ent in rec.get("entities", []):
            try:
                s, e, ty = int(ent["start"]), int(ent["end"]), str(ent["type"])
            except (KeyError, TypeError, ValueError):
                raise ValidationError(f"record {name}: malformed entity {ent!r}") from None
            if not 0 <= s <= e < len(tokens):
                raise ValidationError(
                    f"record {name}: span {ty}({s},{e}) invalid for {len(tokens)} tokens")
            spans.append(EntitySpan(ty, s, e))
        docs.append(ContextDocument(tokens, spans, rec.get("id")))
    return docs


def write_nested_corpus(docs: Iterable[ContextDocument], stream: TextIO) -> None:
    for d in docs:
        stream.write(json.dumps(doc_to_record(d), ensure_ascii=False) + "\n")


def load_nested(path) -> List[ContextDocument]:
    with open(path, encoding="utf-8") as f:
        return read_nested_corpus(f)


# ---------------------------------------------------------------------------
# task inputs and targets
# ---------------------------------------------------------------------------

@dataclass
class TaskInput:
    type_name: str
    ids: np.ndarray            # (L,) int
    attention_mask: np.ndarray  # (L,) bool, False exactly on padding
    context_offset: int
    context_length: int         # after truncation
    original_length: int

    def __len__(self):
        return len(self.ids)

    @property
    def truncated(self) -> bool:
        return self.context_length < self.original_length


@dataclass
class TargetTensors:
    start: np.ndarray      # (L,)
    end: np.ndarray        # (L,)
    span: np.ndarray       # (L, L)
    token_mask: np.ndarray  # (L,) bool
    span_mask: np.ndarray   # (L, L) bool
    dropped: int = 0


def build_task_input(doc: ContextDocument, question: QuestionTemplate, vocab: Vocab,
                     max_len: int, pad_to: Optional[int] = None,
                     context_budget: Optional[int] = None) -> TaskInput:
    q = list(question.tokens)
    if not q:
        raise ValueError("empty question")
    budget = max_len - 2 - len(q)
    if context_budget is not None:
        budget = min(budget, context_budget)
    if budget < 1:
        raise ValueError(f"question of {len(q)} tokens leaves no room under max_len={max_len}")
    n = min(len(doc.tokens), budget)
    ids = [CLS_ID] + vocab.encode(q) + [SEP_ID] + vocab.encode(doc.tokens[:n])
    length = len(ids)
    if pad_to is not None:
        if pad_to < length:
            raise ValueError(f"pad_to={pad_to} shorter than sequence length {length}")
        ids += [PAD_ID] * (pad_to - length)
    mask = np.zeros(len(ids), dtype=bool)
    mask[:length] = True
    return TaskInput(question.type_name, np.asarray(ids, dtype=np.int64), mask,
                     2 + len(q), n, len(doc.tokens))


def context_mask(ti: TaskInput) -> np.ndarray:
    m = np.zeros(len(ti), dtype=bool)
    m[ti.context_offset:ti.context_offset + ti.context_length] = True
    return m


def build_targets(doc: ContextDocument, type_name: str, ti: TaskInput) -> TargetTensors:
    L = len(ti)
    off, n = ti.context_offset, ti.context_length
    start = np.zeros(L, dtype=np.int64)
    end = np.zeros(L, dtype=np.int64)
    span = np.zeros((L, L), dtype=np.int64)
    cm = context_mask(ti)
    span_mask = np.triu(np.outer(cm, cm))
    dropped = 0
    for e in doc.spans_of(type_name):
        if not 0 <= e.start <= e.end < len(doc.tokens):
            raise ValidationError(f"gold span {e} outside context of {len(doc.tokens)} tokens")
        if e.end >= n:
            dropped += 1
            continue
        start[off + e.start] = 1
        end[off + e.end] = 1
        span[off + e.start, off + e.end] = 1
    if dropped:
        log.warning("event=truncation type=%s dropped_spans=%d", type_name, dropped)
    return TargetTensors(start, end, span, cm, span_mask, dropped)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class MultiTaskBatch:
    """Contexts of one batch, each expanded into one task per entity type.

    Arrays are laid out (B, T, L) with T in inventory order and L the
    longest task sequence in the batch.
    """
    docs: List[ContextDocument]
    inputs: List[List[TaskInput]]
    targets: List[List[TargetTensors]]
    ids: np.ndarray
    attention_mask: np.ndarray
    token_mask: np.ndarray
    start: np.ndarray
    end: np.ndarray
    span_cells: Tuple[np.ndarray, np.ndarray, np.ndarray]  # per-task (b, s, e), each (T, C)
    span_labels: np.ndarray  # (T, C)

    @property
    def n_contexts(self) -> int:
        return len(self.docs)

    @property
    def n_tasks(self) -> int:
        return self.ids.shape[1]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[2]

    @property
    def dropped(self) -> int:
        return sum(t.dropped for row in self.targets for t in row)


def collate(docs: Sequence[ContextDocument], questions: Sequence[QuestionTemplate],
            vocab: Vocab, max_len: int, pad_to: Optional[int] = None) -> MultiTaskBatch:
    # every task of a context must see the same context tokens, so truncation
    # follows the budget left by the longest question
    budget = max_len - 2 - max(len(q.tokens) for q in questions)
    inputs = [[build_task_input(d, q, vocab, max_len, context_budget=budget) for q in questions]
              for d in docs]
    L = pad_to or max(len(ti) for row in inputs for ti in row)
    inputs = [[build_task_input(d, q, vocab, max_len, pad_to=L, context_budget=budget)
               for q in questions] for d in docs]
    targets = [[build_targets(d, q.type_name, ti) for q, ti in zip(questions, row)]
               for d, row in zip(docs, inputs)]
    B, T = len(docs), len(questions)
    ids = np.stack([np.stack([ti.ids for ti in row]) for row in inputs])
    am = np.stack([np.stack([ti.attention_mask for ti in row]) for row in inputs])
    tm = np.stack([np.stack([tg.token_mask for tg in row]) for row in targets])
    st = np.stack([np.stack([tg.start for tg in row]) for row in targets])
    en = np.stack([np.stack([tg.end for tg in row]) for row in targets])

    # Valid span cells: s <= e, both context positions.  Every task of a
    # context has the same number of them, so they stack to (T, C).
    cb, cs, ce, lab = [], [], [], []
    for t in range(T):
        bb, ss, ee, ll = [], [], [], []
        for b in range(B):
            tg = targets[b][t]
            r, c = np.nonzero(tg.span_mask)
            bb.append(np.full(len(r), b))
            ss.append(r)
            ee.append(c)
            ll.append(tg.span[r, c])
        cb.append(np.concatenate(bb))
        cs.append(np.concatenate(ss))
        ce.append(np.concatenate(ee))
        lab.append(np.concatenate(ll))
    cells = (np.stack(cb).astype(np.intp), np.stack(cs).astype(np.intp),
             np.stack(ce).astype(np.intp))
    return MultiTaskBatch(list(docs), inputs, targets, ids, am, tm, st, en, cells,
                          np.stack(lab).astype(np.int64))


def batch(docs: Sequence[ContextDocument], inventory: TypeInventory,
          questions: Sequence[QuestionTemplate], vocab: Vocab, batch_size: int,
          max_len: int = 128, shuffle: bool = False,
          rng: Optional[np.random.Generator] = None,
          pad_to: Optional[int] = None) -> Iterator[MultiTaskBatch]:
    if [q.type_name for q in questions] != inventory.names:
        raise ValueError("questions must follow inventory order")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(docs))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(len(docs))
    for i in range(0, len(docs), batch_size):
        yield collate([docs[j] for j in order[i:i + batch_size]], questions, vocab,
                      max_len, pad_to)
