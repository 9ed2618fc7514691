"""
Parameter budgets for tensor adapters
=====================================

How many trainable scalars each stacking choice costs at ViT-Base
geometry, and how ranks are picked to match a LoRA budget.
"""

from tenslora import VIT_BASE, param_count, plan_isoparameters, plan_isorank
from tenslora.cli import format_params

###############################################################################
# The full table: LoRA, every variant at the same rank, then the pinned
# budget-matched plans.
print(format_params(VIT_BASE, lora_rank=4))

###############################################################################
# Stacking more axes into one tensor shares factors across them, so the
# isorank count shrinks quickly.
for variant in ("QKV", "QKV_Depth", "Att_QKV_Depth"):
    res = plan_isorank(variant, VIT_BASE, 4)
    print(f"{variant:>14}: {res.count:>7,} params")

###############################################################################
# Budget matching searches the free ranks.  ``closest`` may overshoot the
# budget slightly; ``not_exceeding`` never does.
for policy in ("closest", "not_exceeding"):
    res = plan_isoparameters("QKV", VIT_BASE, lora_rank=4, policy=policy)
    print(policy, res.ranks, res.count, f"{res.percent_of_lora}%")

###############################################################################
# Ranks are free parameters of the count, so a plan can be costed directly.
print(param_count("Att", VIT_BASE, {"d_in": 7, "d_h": 4, "h": 12}))
