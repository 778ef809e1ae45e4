"""
Scoring nested predictions
==========================

One ACE-2004 style record with nested mentions, and two sets of predicted
spans: one from a single-task reader and one from the multi-task model.
Matching is exact on (type, start, end) with set semantics.
"""
from pathlib import Path

from multiner.metrics import evaluate
from multiner.text import load_nested

fixtures = Path(__file__).resolve().parents[1] / "tests" / "fixtures"
gold = load_nested(fixtures / "ace_example_gold.jsonl")[0]
print(len(gold.tokens), "tokens,", len(gold.entities), "gold spans")

for name in ("single_task", "multi_task"):
    pred = load_nested(fixtures / f"ace_example_{name}.jsonl")[0]
    rep = evaluate([pred.entities], [gold.entities], doc_ids=[gold.doc_id])
    m = rep.micro
    print(f"\n{name}: tp={m.tp} fp={m.fp} fn={m.fn}  P={m.precision:.3f} R={m.recall:.3f} "
          f"F1={m.f1:.3f}")
    for err in rep.errors:
        # print the surface text so nested boundaries are easy to eyeball
        for label, spans in (("FP", err.false_positives), ("FN", err.false_negatives)):
            for s in spans:
                print(f"  {label} {s.type}({s.start},{s.end}) "
                      f"{' '.join(gold.tokens[s.start:s.end + 1])}")
