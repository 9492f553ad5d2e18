"""Confusion-matrix segmentation metrics and per-class report tables.

Report files:

* delimited text (TSV): columns ``class_id``, ``class_name``, ``IoU(%)``;
  one row per class (``absent`` when the class never occurs in ground truth
  or prediction), then the summary rows ``PixelAcc`` and ``mIoU`` with an
  empty ``class_id``.
* JSON: ``{"classes": [{"id", "name", "iou"}], "pixel_acc", "miou"}`` with
  fractions in [0, 1] and ``null`` for absent classes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    """counts[g, p] = number of pixels with ground truth g predicted as p."""

    num_classes: int
    class_names: list[str] = field(default_factory=list)
    counts: np.ndarray | None = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise ShapeError(f"counts shape {self.counts.shape} does not match {self.num_classes} classes")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def names(self) -> list[str]:
        if len(self.class_names) == self.num_classes:
            return list(self.class_names)
        return [str(i) for i in range(self.num_classes)]

    def accumulate(self, gt, pred, ignore_label: int | None = None) -> "ConfusionMatrix":
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise ShapeError(f"ground truth shape {gt.shape} differs from prediction shape {pred.shape}")
        keep = np.ones(gt.shape, bool) if ignore_label is None else gt != ignore_label
        c = self.num_classes
        for name, arr in (("ground truth", gt), ("prediction", pred)):
            bad = keep & ((arr < 0) | (arr >= c))
            if bad.any():
                loc = tuple(int(i) for i in np.argwhere(bad)[0])
                raise DataError(f"{name} class {int(arr[loc])} at pixel {loc} outside [0, {c})")
        idx = gt[keep].astype(np.int64) * c + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.class_names, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, gt, pred, ignore_label: int | None = None) -> ConfusionMatrix:
    return cm.accumulate(gt, pred, ignore_label)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN marks classes absent from both ground truth and prediction."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def mean_iou(cm: ConfusionMatrix) -> float:
    iou = iou_per_class(cm)
    if np.isnan(iou).all():
        raise UndefinedMetricError("mean IoU is undefined: no class occurs in ground truth or prediction")
    return float(np.nanmean(iou))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("pixel accuracy is undefined on an empty confusion matrix")
    return float(np.trace(cm.counts) / total)


@dataclass
class Report:
    class_ids: list[int]
    class_names: list[str]
    iou: list[float | None]
    pixel_acc: float
    miou: float

    def rows(self) -> list[tuple[str, str, str]]:
        out = [
            (str(i), n, "absent" if v is None else f"{100 * v:.2f}")
            for i, n, v in zip(self.class_ids, self.class_names, self.iou)
        ]
        out.append(("", "PixelAcc", f"{100 * self.pixel_acc:.2f}"))
        out.append(("", "mIoU", f"{100 * self.miou:.2f}"))
        return out

    def to_tsv(self) -> str:
        lines = ["class_id\tclass_name\tIoU(%)"] + ["\t".join(r) for r in self.rows()]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "classes": [{"id": i, "name": n, "iou": v} for i, n, v in zip(self.class_ids, self.class_names, self.iou)],
            "pixel_acc": self.pixel_acc,
            "miou": self.miou,
        }

    def to_text(self) -> str:
        width = max(12, *(len(n) for n in self.class_names))
        lines = [f"{'No.':>4}  {'Class name':<{width}}  {'IoU(%)':>7}", "-" * (width + 15)]
        for cid, name, val in self.rows():
            lines.append(f"{cid:>4}  {name:<{width}}  {val:>7}")
        return "\n".join(lines)

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tsv, js = out / f"{stem}.tsv", out / f"{stem}.json"
        tsv.write_text(self.to_tsv(), encoding="utf-8")
        js.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return tsv, js


def report(cm: ConfusionMatrix) -> Report:
    iou = iou_per_class(cm)
    return Report(
        list(range(cm.num_classes)),
        cm.names(),
        [None if np.isnan(v) else float(v) for v in iou],
        pixel_accuracy(cm),
        mean_iou(cm),
    )
