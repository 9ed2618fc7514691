"""
Training an adapter and merging it
==================================

A frozen random transformer learns the majority-token task through a
QKV_Depth adapter.  Merging folds the update into the weights.
"""

import numpy as np

from tenslora import init_adapter, merge, plan_isorank
from tenslora.adapters import ModelDims
from tenslora.testbed import BackboneConfig, SyntheticTask, TrainConfig, evaluate, forward, init_backbone, make_task, train_adapter

dims = ModelDims(d=32, h=4, L=3)
backbone = init_backbone(BackboneConfig(dims, vocab=32, seq_len=16))
task = SyntheticTask("majority-token", {"vocab": 32, "seq_len": 16}, seed=1)
train, held_out = make_task(task, 2048), make_task(SyntheticTask(task.generator, task.params, 2), 512)

###############################################################################
# A fresh adapter has zero cores, so it does not change the model at all.
adapter = init_adapter("QKV_Depth", dims, plan_isorank("QKV_Depth", dims, 4).ranks)
print("identical at init:", np.array_equal(forward(backbone, adapter, train.tokens[:8]), forward(backbone, None, train.tokens[:8])))

###############################################################################
# Train the adapter and the classifier head.  The schedule warms up for 10%
# of the steps, then follows a cosine down to 1e-6.
result = train_adapter(backbone, adapter, train, TrainConfig(total_steps=500))
for row in result.log[::100] + result.log[-1:]:
    print(f"step {row['step']:>3}  loss {row['loss']:.4f}  lr {row['lr']:.2e}")
print("train accuracy", evaluate(result.backbone, result.adapter, train))
print("held-out accuracy", evaluate(result.backbone, result.adapter, held_out))

###############################################################################
# After merging there is no adapter left; predictions are unchanged.
merged = merge(result.adapter, result.backbone)
gap = np.max(np.abs(forward(merged, None, held_out.tokens) - forward(result.backbone, result.adapter, held_out.tokens)))
print(f"max logit gap after merge: {gap:.1e}")
