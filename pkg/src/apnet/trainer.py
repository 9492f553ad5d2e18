"""SGD training with a poly learning-rate schedule and ablation presets."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import deep_supervision_loss
from .augment import DeformSpec, common_augment, warp_pair
from .data import IGNORE_LABEL, SegDataset, to_input
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .metrics import ConfusionMatrix, mean_iou
from .model import ApnetConfig, ApnetParams, forward, init_params, predict, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

AUGMENTATIONS = ("mls", "cda", "none")

# model/augmentation overrides for each experiment arm
PRESETS: dict[str, dict] = {
    "apnet3+DA": {"scales": [1.0, 0.75, 0.5], "use_spp": True, "augment": "mls"},
    "apnet2+DA": {"scales": [1.0, 0.75], "use_spp": True, "augment": "mls"},
    "pyramid-only+DA": {"scales": [1.0], "use_spp": True, "augment": "mls"},
    "pyramid-only+CDA": {"scales": [1.0], "use_spp": True, "augment": "cda"},
    "single-scale-no-spp+DA": {"scales": [1.0], "use_spp": False, "augment": "mls"},
}


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    power: float = 0.9
    max_iter: int = 1000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 2
    seed: int = 0
    augment: str = "mls"
    aug_prob: float = 0.5
    deform_grid: int = 4
    max_displacement: float | None = None
    val_every: int = 0
    checkpoint_every: int = 0
    ignore_label: int | None = IGNORE_LABEL

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not self.power > 0:
            raise ConfigError(f"power must be positive, got {self.power}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.augment not in AUGMENTATIONS:
            raise ConfigError(f"augment must be one of {AUGMENTATIONS}, got {self.augment!r}")
        if not 0 <= self.aug_prob <= 1:
            raise ConfigError(f"aug_prob must lie in [0, 1], got {self.aug_prob}")


# Values used for the full-scale clinical experiments; far too slow for desk runs.
PAPER_TRAIN_CONFIG = dict(base_lr=2.5e-5, power=0.9, max_iter=110_000, momentum=0.9, weight_decay=0.0005)


def apply_preset(model_cfg: ApnetConfig, train_cfg: TrainConfig, preset: str) -> tuple[ApnetConfig, TrainConfig]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[preset]
    model = dataclasses.replace(model_cfg, scales=list(p["scales"]), use_spp=p["use_spp"],
                                spp=model_cfg.spp if p["use_spp"] else None)
    return model, dataclasses.replace(train_cfg, augment=p["augment"])


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """base_lr * (1 - iteration / max_iter) ** power."""
    if not 0 <= iteration <= cfg.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.power


def sgd_step(params, grads, velocity, lr: float, cfg: TrainConfig, decay_mask=None):
    """In-place momentum SGD with L2 weight decay folded into the gradient.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """
    if not len(params) == len(grads) == len(velocity):
        raise ShapeError("params, grads and velocity must have the same length")
    if decay_mask is None:
        decay_mask = [True] * len(params)
    for p, g, v, decay in zip(params, grads, velocity, decay_mask):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape} and velocity {v.shape} differ")
        v *= cfg.momentum
        v += g
        if decay and cfg.weight_decay:
            v += cfg.weight_decay * p
        p -= (lr * v).astype(p.dtype, copy=False)
    return params, velocity


def evaluate(params: ApnetParams, config: ApnetConfig, dataset: SegDataset,
             batch_size: int = 8, ignore_label: int | None = IGNORE_LABEL) -> ConfusionMatrix:
    cm = ConfusionMatrix(config.num_classes, list(dataset.class_names))
    for start in range(0, len(dataset), batch_size):
        pred = predict_images(params, config, dataset.images[start:start + batch_size])
        cm.accumulate(dataset.labels[start:start + batch_size], pred, ignore_label)
    return cm


def predict_images(params: ApnetParams, config: ApnetConfig, images: np.ndarray) -> np.ndarray:
    x = Tensor(to_input(images, params.score.weight.dtype))
    _, fused = forward(x, params, config)
    return predict(fused, config)


def _augment_sample(image, labels, cfg: TrainConfig, seed: int):
    if cfg.augment == "mls":
        return warp_pair(image, labels, DeformSpec(cfg.deform_grid, cfg.max_displacement, seed))
    if cfg.augment == "cda":
        return common_augment(image, labels, seed)
    return image, labels


@dataclass
class TrainResult:
    params: ApnetParams
    config: ApnetConfig
    train_config: TrainConfig
    history: list[dict] = field(default_factory=list)
    best_miou: float | None = None

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]

    def history_tsv(self) -> str:
        lines = ["iter\tlr\tloss\tval_miou"]
        for h in self.history:
            val = "" if h.get("val_miou") is None else repr(h["val_miou"])
            lines.append(f"{h['iter']}\t{h['lr']!r}\t{h['loss']!r}\t{val}")
        return "\n".join(lines) + "\n"


def train(model_cfg: ApnetConfig, train_cfg: TrainConfig, dataset: SegDataset, preset: str | None = None,
          val_dataset: SegDataset | None = None, out_dir=None) -> TrainResult:
    """Train from a seeded initialisation; bit-deterministic for fixed inputs.

    With ``out_dir`` set, writes ``history.tsv``, ``checkpoint_last.npz`` and
    (when validating) ``checkpoint_best.npz``.
    """
    if preset is not None:
        model_cfg, train_cfg = apply_preset(model_cfg, train_cfg, preset)
    if dataset.images.shape[1:] != (model_cfg.input_size, model_cfg.input_size):
        raise ShapeError(f"dataset images are {dataset.images.shape[1:]}, model expects side {model_cfg.input_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, seed=train_cfg.seed)
    tensors = params.tensors()
    decay = params.decay_mask()
    velocity = [np.zeros_like(t.data) for t in tensors]
    result = TrainResult(params, model_cfg, train_cfg)
    order = np.empty(0, dtype=np.intp)
    cursor = 0
    best = -1.0

    for it in range(train_cfg.max_iter):
        if cursor + train_cfg.batch_size > len(order):
            order = rng.permutation(len(dataset))
            while len(order) < train_cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(dataset))])
            cursor = 0
        idx = order[cursor:cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size
        images, labels = [], []
        for i in idx:
            img, lab = dataset.images[i], dataset.labels[i]
            seed = int(rng.integers(2**31))
            if train_cfg.augment != "none" and rng.random() < train_cfg.aug_prob:
                img, lab = _augment_sample(img, lab, train_cfg, seed)
            images.append(img)
            labels.append(lab)
        x = Tensor(to_input(np.stack(images), tensors[0].dtype))
        outputs, fused = forward(x, params, model_cfg)
        loss = deep_supervision_loss(outputs, fused, np.stack(labels), train_cfg.ignore_label)
        lv = loss.item()
        lr = poly_lr(it, train_cfg)
        if not np.isfinite(lv):
            tail = [round(h["loss"], 6) for h in result.history[-5:]]
            raise TrainingDivergedError(f"non-finite loss {lv} at iteration {it} (lr={lr:.3e}); last losses {tail}")
        params.zero_grad()
        loss.backward()
        grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]
        sgd_step([t.data for t in tensors], grads, velocity, lr, train_cfg, decay)
        lam = params.attention.weights
        if not (all(np.isfinite(t.data).all() for t in tensors) and (lam > 0).all()):
            tail = [round(h["loss"], 6) for h in result.history[-5:]] + [round(lv, 6)]
            raise TrainingDivergedError(
                f"parameters left the finite range at iteration {it} (lr={lr:.3e}, attention weights {lam}); "
                f"last losses {tail}")
        assert abs(lam.sum() - 1.0) < 1e-9, lam

        row = {"iter": it, "lr": lr, "loss": lv, "val_miou": None}
        last = it + 1 == train_cfg.max_iter
        if val_dataset is not None and train_cfg.val_every and ((it + 1) % train_cfg.val_every == 0 or last):
            row["val_miou"] = mean_iou(evaluate(params, model_cfg, val_dataset, ignore_label=train_cfg.ignore_label))
            log.info("iter %d loss %.4f val mIoU %.4f", it, lv, row["val_miou"])
            if row["val_miou"] > best:
                best = row["val_miou"]
                result.best_miou = best
                if out is not None:
                    save_checkpoint(out / "checkpoint_best.npz", params, model_cfg, {"iter": it, "val_miou": best})
        result.history.append(row)
        if out is not None and train_cfg.checkpoint_every and (it + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint_last.npz", params, model_cfg, {"iter": it})

    if out is not None:
        save_checkpoint(out / "checkpoint_last.npz", params, model_cfg, {"iter": train_cfg.max_iter - 1})
        (out / "history.tsv").write_text(result.history_tsv(), encoding="utf-8")
    return result
