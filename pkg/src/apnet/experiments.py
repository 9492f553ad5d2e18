"""Fixed experiment protocols: the overfit check and the two ablations.

The protocols pin data seeds, sizes and budgets so that results are
reproducible and comparable between runs. Each returns the raw per-seed
scores alongside the verdict.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import DeformSpec, warp_pair
from .data import SegDataset, SynthSpec, generate_samples
from .metrics import mean_iou
from .model import ApnetConfig
from .trainer import TrainConfig, apply_preset, evaluate, train

# Twin-position data: images of side 96 with the body midline shifted by up
# to 20% of the side per series, so a twin's side must be read from context.
TWIN_SPEC = SynthSpec(side=96, midline_shift=0.2, seed=100)
TRAIN_SERIES, TEST_SERIES, SLICES = 4, 4, 4
TEST_SEED_OFFSET = 100
ABLATION_TRAIN = dict(base_lr=0.05, max_iter=1500)
SEEDS = (0, 1, 2)


@dataclass
class ArmResult:
    preset: str
    scores: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    @property
    def median(self) -> float:
        return float(np.median(self.scores))


@dataclass
class AblationResult:
    name: str
    arms: dict[str, ArmResult]
    passed: bool
    criterion: str

    def summary(self) -> str:
        lines = [f"{self.name}: {self.criterion}"]
        for arm in self.arms.values():
            scores = ", ".join(f"{100 * s:.2f}" for s in arm.scores)
            lines.append(f"  {arm.preset:<18s} median {100 * arm.median:6.2f}   seeds [{scores}]")
        lines.append(f"  {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def twin_datasets(spec: SynthSpec = TWIN_SPEC, train_series: int = TRAIN_SERIES,
                  test_series: int = TEST_SERIES, slices: int = SLICES) -> tuple[SegDataset, SegDataset]:
    """Training and held-out sets drawn from disjoint generator seeds."""
    train_s = generate_samples(spec, train_series, slices)
    test_s = generate_samples(dataclasses.replace(spec, seed=spec.seed + TEST_SEED_OFFSET), test_series, slices)
    return (SegDataset.from_samples(train_s, spec.num_classes, spec.class_names),
            SegDataset.from_samples(test_s, spec.num_classes, spec.class_names))


def deformed(dataset: SegDataset, seed: int = 10_000) -> SegDataset:
    """Apply one seeded MLS deformation per image (default lattice and displacement)."""
    images, labels = [], []
    for i, (img, lab) in enumerate(zip(dataset.images, dataset.labels)):
        a, b = warp_pair(img, lab, DeformSpec(seed=seed + i))
        images.append(a)
        labels.append(b)
    return dataclasses.replace(dataset, images=np.stack(images), labels=np.stack(labels))


def _run_arms(presets, train_set, test_set, seeds, train_kw, verbose) -> dict[str, ArmResult]:
    model = ApnetConfig(num_classes=train_set.num_classes, input_size=train_set.images.shape[1])
    arms = {}
    for preset in presets:
        arm = ArmResult(preset)
        for seed in seeds:
            t0 = time.perf_counter()
            r = train(model, TrainConfig(seed=seed, **train_kw), train_set, preset=preset)
            arm.scores.append(mean_iou(evaluate(r.params, r.config, test_set)))
            arm.seconds.append(time.perf_counter() - t0)
            if verbose:
                print(f"  {preset} seed {seed}: mIoU {100 * arm.scores[-1]:.2f} ({arm.seconds[-1]:.0f} s)", flush=True)
        arms[preset] = arm
    return arms


def ablation_a(seeds=SEEDS, spec: SynthSpec = TWIN_SPEC, train_kw=None, verbose=False) -> AblationResult:
    """Scale ablation: apnet3 >= apnet2 >= pyramid-only, with apnet3 ahead by >= 5 points."""
    train_set, test_set = twin_datasets(spec)
    arms = _run_arms(["apnet3+DA", "apnet2+DA", "pyramid-only+DA"], train_set, test_set, seeds,
                     train_kw or ABLATION_TRAIN, verbose)
    a3, a2, p1 = (arms[k].median for k in ("apnet3+DA", "apnet2+DA", "pyramid-only+DA"))
    passed = a3 >= a2 >= p1 and a3 - p1 >= 0.05
    return AblationResult("ablation A (attention levels)", arms, passed,
                          "median mIoU apnet3 >= apnet2 >= pyramid-only and apnet3 - pyramid-only >= 5 points")


def ablation_b(seeds=SEEDS, spec: SynthSpec = TWIN_SPEC, train_kw=None, verbose=False) -> AblationResult:
    """Augmentation ablation on an MLS-deformed held-out set: DA beats CDA by >= 5 points."""
    train_set, test_set = twin_datasets(spec)
    arms = _run_arms(["pyramid-only+DA", "pyramid-only+CDA"], train_set, deformed(test_set), seeds,
                     train_kw or ABLATION_TRAIN, verbose)
    gap = arms["pyramid-only+DA"].median - arms["pyramid-only+CDA"].median
    return AblationResult("ablation B (augmentation)", arms, gap >= 0.05,
                          "median mIoU pyramid-only+DA - pyramid-only+CDA >= 5 points on deformed test images")


@dataclass
class OverfitResult:
    miou: float
    seconds: float
    losses: list[float]
    deterministic: bool | None = None

    @property
    def passed(self) -> bool:
        return self.miou >= 0.90 and self.seconds < 600 and self.deterministic is not False


OVERFIT_SPEC = SynthSpec(side=96, seed=7)


def overfit_check(iters: int = 2000, seed: int = 0, augment: str | None = None,
                  check_determinism: bool = False) -> OverfitResult:
    """Train the apnet3 preset on 8 images (2 series x 4 slices) and score it
    on those same images. ``augment`` overrides the preset's augmentation."""
    samples = generate_samples(OVERFIT_SPEC, 2, 4)
    data = SegDataset.from_samples(samples, OVERFIT_SPEC.num_classes, OVERFIT_SPEC.class_names)
    model, cfg = apply_preset(ApnetConfig(num_classes=data.num_classes, input_size=OVERFIT_SPEC.side),
                              TrainConfig(base_lr=0.05, max_iter=iters, seed=seed), "apnet3+DA")
    if augment is not None:
        cfg = dataclasses.replace(cfg, augment=augment)
    t0 = time.perf_counter()
    r = train(model, cfg, data)
    seconds = time.perf_counter() - t0
    result = OverfitResult(mean_iou(evaluate(r.params, r.config, data)), seconds, r.losses)
    if check_determinism:
        result.deterministic = train(model, cfg, data).losses == r.losses
    return result
