"""Scale attention: softmax-weighted fusion of per-scale score maps and the
deeply supervised training loss that goes with it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, add, bilinear_resize, softmax, softmax_cross_entropy, weighted_sum


@dataclass
class AttentionWeights:
    """Trainable logits; the fusion weights are their softmax."""

    logits: Tensor

    @classmethod
    def equal(cls, n_scales: int, dtype=np.float32) -> "AttentionWeights":
        return cls(Tensor(np.zeros(n_scales, dtype=dtype), requires_grad=True))

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits.data.astype(np.float64))


@dataclass
class ScaleOutputs:
    score_maps: list[Tensor]
    scales: list[float]

    def __post_init__(self):
        if len(self.score_maps) != len(self.scales):
            raise ShapeError(f"{len(self.score_maps)} score maps for {len(self.scales)} scales")

    @property
    def reference_index(self) -> int:
        return self.scales.index(1.0) if 1.0 in self.scales else int(np.argmax(self.scales))


def fuse(outputs: ScaleOutputs, weights: AttentionWeights) -> Tensor:
    """Resize every score map to the scale-1.0 map's size and blend them."""
    if not outputs.score_maps:
        raise ValueError("fuse needs at least one score map")
    ref = outputs.score_maps[outputs.reference_index]
    h, w = ref.shape[2:]
    resized = [m if m.shape[2:] == (h, w) else bilinear_resize(m, h, w) for m in outputs.score_maps]
    return weighted_sum(resized, weights.logits)


def downsample_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour label resizing on half-pixel centres (never invents classes)."""
    h, w = labels.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    return labels[..., rows[:, None], cols[None, :]]


def deep_supervision_loss(
    outputs: ScaleOutputs,
    fused: Tensor,
    gt: np.ndarray,
    ignore_label: int | None = None,
    auxiliary: bool = True,
) -> Tensor:
    """Cross-entropy of the upsampled fused map against full-resolution ground
    truth, plus one unit-weight term per scale against downsampled labels."""
    gt = np.asarray(gt)
    if gt.ndim != 3 or gt.shape[0] != fused.shape[0]:
        raise ShapeError(f"ground truth must be (n, h, w) matching batch {fused.shape[0]}, got {gt.shape}")
    h, w = gt.shape[1:]
    terms = [softmax_cross_entropy(bilinear_resize(fused, h, w), gt, ignore_label)]
    if auxiliary:
        for m in outputs.score_maps:
            mh, mw = m.shape[2:]
            terms.append(softmax_cross_entropy(m, downsample_labels(gt, mh, mw), ignore_label))
    return add(*terms)
