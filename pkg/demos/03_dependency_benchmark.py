"""
Does cross-task attention help?
===============================

The synthetic benchmark plants one dependency between entity types: an
unseen capitalised token after a neutral carrier word is an ORG when the
sentence also names a person (trigger word followed by a two-token name)
and a LOC otherwise.  Decoy triggers and bare names make "a person is
present" a composition of two adjacent tokens.

The benchmark encoder has a single layer, so a model without the
cross-task sublayer has to settle the dependency in one attention hop.

Usage: python3 demos/03_dependency_benchmark.py [seed] [epochs]
"""
import sys
import tempfile
from pathlib import Path

from multiner.cli import run_training
from multiner.config import load_config

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else None
config = Path(__file__).resolve().parents[1] / "configs" / "dependency_benchmark.json"

rows = []
with tempfile.TemporaryDirectory() as tmp:
    for mode in ("full", "no_att", "no_diff", "single_task_baseline"):
        cfg = load_config(str(config), {"seed": seed, "mode": mode, "epochs": epochs})
        man = run_training(cfg, Path(tmp) / mode)
        test = man["final"]["test"]
        per = {t: c["f1"] for t, c in test["per_type"].items()}
        rows.append((mode, test["micro"]["f1"], per, man["param_counts"]["total"]))
        print(f"{mode:22s} test F1 {test['micro']['f1']:.4f}  " +
              "  ".join(f"{t} {v:.3f}" for t, v in per.items()), flush=True)

print("\nmode                    params   micro-F1")
for mode, f1, _, n in rows:
    print(f"{mode:22s} {n:8d}   {100 * f1:6.2f}")
