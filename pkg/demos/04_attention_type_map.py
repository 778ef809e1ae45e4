"""
Which entity types attend to which?
===================================

Train the full model on the dependency benchmark, then average the
cross-task attention weights into a type-by-type map: rows are the
querying task, columns the task being attended to.  Each cell is the mean
weight over non-pad query and key positions, averaged over heads and then
over test sentences.

Usage: python3 demos/04_attention_type_map.py [seed] [epochs]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from multiner.checkpoint import load_checkpoint
from multiner.cli import export_attention, resolve_data, run_training
from multiner.config import load_config
from multiner.metrics import combine_maps
from multiner.text import TypeInventory, Vocab, make_questions

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 10
config = Path(__file__).resolve().parents[1] / "configs" / "dependency_benchmark.json"
cfg = load_config(str(config), {"seed": seed, "mode": "full", "epochs": epochs})

with tempfile.TemporaryDirectory() as tmp:
    run_training(cfg, tmp)
    ckpt = load_checkpoint(Path(tmp) / "checkpoint.mner")
model = ckpt.model()
vocab = Vocab(ckpt.vocab)
qs = make_questions(TypeInventory(model.types), ckpt.questions)
test = resolve_data(cfg)["test"]

# split the test set by the dependency: sentences with and without a person
with_per = [d for d in test if any(s.type == "PER" for s in d.entities)]
without = [d for d in test if not any(s.type == "PER" for s in d.entities)]
np.set_printoptions(precision=4, suppress=True)
for label, docs in (("all", test), ("with PER", with_per), ("without PER", without)):
    _, maps = export_attention(model, docs, vocab, qs, ckpt.max_len)
    m = combine_maps(maps)
    print(f"\n{label} ({m.n_examples} sentences); rows query, columns key: {m.types}")
    print(m.matrix)
