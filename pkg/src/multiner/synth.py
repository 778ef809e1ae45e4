"""Synthetic corpora whose ambiguous mentions need another entity type to resolve.

Every sentence holds a few mention slots.  A slot is either a regular
mention whose surface form alone gives its type, or (with probability
``ambiguity_rate``) an ambiguous mention drawn from a pool of one-off
tokens.  An ambiguous mention is ORG when the sentence also contains a
PER mention and LOC otherwise.  PER mentions are a trigger word followed
by a two-token name; a decoy adds a trigger without a name and a bare name
without a trigger to the same sentence, so deciding that a PER is present
takes the same composition the PER task learns.  ORG, LOC and ambiguous mentions share
one set of neutral carrier words, so nothing local separates the two
readings of an ambiguous token.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .rng import stream
from .text import ContextDocument, EntitySpan

QUESTIONS = {
    "PER": "find person entities including names of people and fictional characters",
    "ORG": "find organization entities including companies agencies and institutions",
    "LOC": "find location entities including countries cities and geographic places",
}

# ACE-2004 style inventory and guideline-note questions.
ACE_QUESTIONS = {
    "GPE": "find geographical political entities such as countries cities and states",
    "ORG": "find organization entities including companies agencies and institutions",
    "PER": "find person entities including single individuals and groups of people",
    "FAC": "find facility entities such as buildings airports and highways",
    "VEH": "find vehicle entities such as cars ships and aircraft",
    "LOC": "find location entities such as mountains rivers and regions",
    "WEA": "find weapon entities such as guns bombs and missiles",
}

TRIGGERS = ["founder", "chairman", "director", "president", "spokesman", "minister",
            "chief", "adviser"]
CARRIERS = ["with", "from", "via", "beside", "against", "despite", "through", "toward"]
FILLERS = ["the", "report", "said", "today", "board", "meeting", "new", "plan",
           "was", "announced", "after", "talks", "on", "monday", "a", "deal",
           "officials", "noted", "that", "last", "week", "and", "its", "review"]
ORG_SUFFIX = ["Corp", "Group", "Labs", "Inc"]

_SYL = ["ka", "lo", "mi", "ra", "ten", "vor", "shi", "pel", "dan", "qui", "zu", "bre",
        "nol", "fa", "gri", "tho", "wen", "ix", "mo", "sar", "ul", "dri", "cam", "yel"]


class ConfigError(ValueError):
    pass


@dataclass
class SynthSpec:
    types: Tuple[str, ...] = ("PER", "ORG", "LOC")
    n_train: int = 50
    n_dev: int = 20
    n_test: int = 20
    min_len: int = 8
    max_len: int = 20
    ambiguity_rate: float = 0.3
    max_mentions: int = 3
    decoy_rate: float = 0.5
    pool_size: int = 30

    def validate(self):
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ConfigError(f"ambiguity_rate {self.ambiguity_rate} outside [0, 1]")
        if not 0.0 <= self.decoy_rate <= 1.0:
            raise ConfigError(f"decoy_rate {self.decoy_rate} outside [0, 1]")
        if len(set(self.types)) != len(self.types) or not self.types:
            raise ConfigError("types must be unique and non-empty")
        if self.ambiguity_rate > 0 and not {"PER", "ORG", "LOC"} <= set(self.types):
            raise ConfigError("ambiguous mentions need PER, ORG and LOC in the inventory")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError("bad sentence length range")
        if self.max_mentions < 1:
            raise ConfigError("max_mentions must be >= 1")

    @classmethod
    def from_dict(cls, d: Dict) -> "SynthSpec":
        d = dict(d)
        if "types" in d:
            d["types"] = tuple(d["types"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth fields {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["types"] = list(self.types)
        return d


@dataclass
class SynthCorpus:
    train: List[ContextDocument]
    dev: List[ContextDocument]
    test: List[ContextDocument]
    report: Dict = field(default_factory=dict)


class _Words:
    """Deterministic pseudo-word factory; every word it issues is unique."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used = set(TRIGGERS) | set(CARRIERS) | set(FILLERS) | set(ORG_SUFFIX)

    def fresh(self, capitalize: bool = True) -> str:
        while True:
            n = int(self.rng.integers(2, 4))
            w = "".join(_SYL[int(i)] for i in self.rng.integers(0, len(_SYL), size=n))
            w = w.capitalize() if capitalize else w
            if w not in self.used:
                self.used.add(w)
                return w


def question_texts(types: Sequence[str]) -> Dict[str, str]:
    return {t: QUESTIONS.get(t, f"find {t.lower()} entities mentioned in the text")
            for t in types}


def synth_questions(spec: SynthSpec) -> Dict[str, str]:
    return question_texts(spec.types)


def _sentence(rng, spec: SynthSpec, pools, words: _Words, stats: Dict) -> ContextDocument:
    k = int(rng.integers(1, spec.max_mentions + 1))
    kinds = []
    for _ in range(k):
        if rng.random() < spec.ambiguity_rate:
            kinds.append("AMB")
        else:
            kinds.append(spec.types[int(rng.integers(len(spec.types)))])
    has_per = "PER" in kinds

    # phrases: (tokens, entity (type, rel_start, rel_end) or None)
    phrases: List[Tuple[List[str], object]] = []
    for kind in kinds:
        carrier = CARRIERS[int(rng.integers(len(CARRIERS)))]
        if kind == "PER":
            trig = TRIGGERS[int(rng.integers(len(TRIGGERS)))]
            first = pools["first"][int(rng.integers(len(pools["first"])))]
            last = pools["last"][int(rng.integers(len(pools["last"])))]
            phrases.append(([trig, first, last], ("PER", 1, 2)))
        elif kind == "AMB":
            label = "ORG" if has_per else "LOC"
            stats["ambiguous"] += 1
            stats[f"ambiguous_{label}"] += 1
            phrases.append(([carrier, words.fresh()], (label, 1, 1)))
        elif kind == "ORG":
            tok = pools["ORG"][int(rng.integers(len(pools["ORG"])))]
            if rng.random() < 0.5:
                suf = ORG_SUFFIX[int(rng.integers(len(ORG_SUFFIX)))]
                phrases.append(([carrier, tok, suf], ("ORG", 1, 2)))
            else:
                phrases.append(([carrier, tok], ("ORG", 1, 1)))
        else:
            tok = pools[kind][int(rng.integers(len(pools[kind])))]
            phrases.append(([carrier, tok], (kind, 1, 1)))
        stats["mentions"] += 1
        stats["per_type"][kind if kind != "AMB" else phrases[-1][1][0]] += 1

    if rng.random() < spec.decoy_rate:
        # a trigger and a name that are not adjacent: seeing both somewhere in
        # the sentence is not evidence of a person
        trig = TRIGGERS[int(rng.integers(len(TRIGGERS)))]
        phrases.append(([trig, FILLERS[int(rng.integers(len(FILLERS)))]], None))
        first = pools["first"][int(rng.integers(len(pools["first"])))]
        last = pools["last"][int(rng.integers(len(pools["last"])))]
        phrases.append(([FILLERS[int(rng.integers(len(FILLERS)))], first, last], None))
        stats["decoys"] += 1

    order = rng.permutation(len(phrases))
    body = sum(len(p[0]) for p in phrases)
    target = int(rng.integers(spec.min_len, spec.max_len + 1))
    n_fill = max(target - body, 0)
    # distribute filler words into the len(phrases)+1 gaps
    gaps = np.bincount(rng.integers(0, len(phrases) + 1, size=n_fill),
                       minlength=len(phrases) + 1)
    tokens: List[str] = []
    spans: List[EntitySpan] = []

    def fill(m):
        for _ in range(m):
            tokens.append(FILLERS[int(rng.integers(len(FILLERS)))])

    for gi, pi in enumerate(order):
        fill(int(gaps[gi]))
        toks, ent = phrases[pi]
        base = len(tokens)
        tokens.extend(toks)
        if ent is not None:
            spans.append(EntitySpan(ent[0], base + ent[1], base + ent[2]))
    fill(int(gaps[-1]))
    return ContextDocument(tokens, spans)


def synth_generate(spec: SynthSpec, seed: int) -> SynthCorpus:
    """Build train/dev/test corpora; identical for identical (spec, seed)."""
    spec.validate()
    words = _Words(stream(seed, "synth-words"))
    pools = {"first": [words.fresh() for _ in range(spec.pool_size)],
             "last": [words.fresh() for _ in range(spec.pool_size)]}
    for t in spec.types:
        if t != "PER":
            pools[t] = [words.fresh() for _ in range(spec.pool_size)]
    rng = stream(seed, "synth-sentences")
    splits = {}
    report = {"seed": int(seed), "spec": spec.to_dict()}
    for name, n in (("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)):
        stats = {"mentions": 0, "ambiguous": 0, "ambiguous_ORG": 0, "ambiguous_LOC": 0,
                 "decoys": 0, "per_type": {t: 0 for t in spec.types}}
        docs = []
        for i in range(n):
            d = _sentence(rng, spec, pools, words, stats)
            d.doc_id = f"{name}-{i}"
            docs.append(d)
        stats["sentences"] = n
        stats["ambiguous_fraction"] = stats["ambiguous"] / stats["mentions"] if stats["mentions"] else 0.0
        splits[name] = docs
        report[name] = stats
    return SynthCorpus(splits["train"], splits["dev"], splits["test"], report)
