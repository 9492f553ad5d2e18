"""Train a three-scale model briefly and compare attention weights before and after.

Every scale starts with weight 1/3. As training proceeds the softmax
weights drift toward whichever scale's score map lowers the loss most.
Afterwards each scale's own prediction is scored next to the fused one.

    python3 demos/03_attention_training.py [iterations]
"""
import sys

import numpy as np

from apnet.data import SegDataset, SynthSpec, generate_samples, to_input
from apnet.metrics import ConfusionMatrix, mean_iou
from apnet.model import ApnetConfig, forward, predict
from apnet.tensor import Tensor
from apnet.trainer import TrainConfig, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600
spec = SynthSpec(side=64, seed=11, midline_shift=0.2)
train_set = SegDataset.from_samples(generate_samples(spec, 4, 4), spec.num_classes, spec.class_names)
test_spec = SynthSpec(side=64, seed=12, midline_shift=0.2)
test_set = SegDataset.from_samples(generate_samples(test_spec, 3, 4), spec.num_classes, spec.class_names)

model = ApnetConfig(num_classes=spec.num_classes, input_size=64)
result = train(model, TrainConfig(max_iter=iters, base_lr=0.05, seed=0), train_set, preset="apnet3+DA")

print("iteration  loss    attention weights (scales 1, 0.75, 0.5)")
print(f"{0:>9d}  {result.losses[0]:.3f}  {np.full(3, 1 / 3).round(3)}")
print(f"{iters - 1:>9d}  {result.losses[-1]:.3f}  {result.params.attention.weights.round(3)}")

x = Tensor(to_input(test_set.images))
outputs, fused = forward(x, result.params, result.config)
print("\nmIoU on held-out series")
for scale, score in zip(outputs.scales, outputs.score_maps):
    cm = ConfusionMatrix(spec.num_classes).accumulate(test_set.labels, predict(score, result.config))
    print(f"  scale {scale:<4}: {100 * mean_iou(cm):6.2f}")
cm = ConfusionMatrix(spec.num_classes).accumulate(test_set.labels, predict(fused, result.config))
print(f"  fused     : {100 * mean_iou(cm):6.2f}")
