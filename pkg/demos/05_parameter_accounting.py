"""
Where the parameters go
=======================

Closed-form parameter counts for a BERT-base sized encoder and the
multi-task additions on top of it, for the ACE inventory of seven types.
"""
from multiner.cli import param_accounting
from multiner.encoder import EncoderConfig
from multiner.model import ModelConfig, head_param_count

enc = EncoderConfig(30000, d_model=768, n_layers=12, n_heads=12, d_ff=3072, max_positions=512)
types = ["GPE", "ORG", "PER", "FAC", "VEH", "LOC", "WEA"]

print(f"heads for one type at d=768: {head_param_count(768, 1):,}")
print(f"{'mode':22s} {'encoder':>12s} {'cross':>10s} {'heads':>12s} {'total':>13s}")
for mode in ("single_task_baseline", "no_att", "no_diff", "full"):
    pc = param_accounting(ModelConfig(enc, types, mode, cross_heads=12))
    print(f"{mode:22s} {pc['encoder']:12,d} {pc['cross_attention']:10,d} {pc['heads']:12,d} "
          f"{pc['total']:13,d}")
