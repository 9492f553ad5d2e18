"""Finite-difference gradient suite covering every differentiable op and a
tiny end-to-end network, run over several seeds at float64."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .attention import AttentionWeights, ScaleOutputs, deep_supervision_loss, fuse
from .model import ApnetConfig, forward, init_params
from .spp import SppConfig, init_level_convs, spp_forward
from .tensor import (
    WIDE,
    ConvParams,
    GradCheckReport,
    Tensor,
    add,
    avg_pool_clipped,
    bilinear_resize,
    concat_channels,
    conv2d,
    grad_check,
    relu,
    softmax_cross_entropy,
    weighted_sum,
)


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    # keep every entry at least 0.1 from the ReLU kink so the central
    # difference never straddles it
    u = rng.standard_normal(shape)
    return Tensor(np.sign(u) * (0.1 + np.abs(u)), requires_grad=True)


def _conv_case(stride, dilation, padding, kernel=3):
    def build(rng):
        x = _t(rng, 2, 2, 7, 7)
        w, b = _t(rng, 3, 2, kernel, kernel), _t(rng, 3)
        p = ConvParams(w, b, stride=stride, dilation=dilation, padding=padding)
        return (lambda x, w, b: conv2d(x, p)), [x, w, b]
    return build


def _relu(rng):
    return relu, [_away_from_zero(rng, 2, 3, 4, 4)]


def _pool(kernel, stride, side):
    def build(rng):
        return (lambda x: avg_pool_clipped(x, kernel, stride)), [_t(rng, 1, 2, side, side)]
    return build


def _resize(out_h, out_w):
    def build(rng):
        return (lambda x: bilinear_resize(x, out_h, out_w)), [_t(rng, 1, 2, 5, 6)]
    return build


def _concat(rng):
    return (lambda a, b: concat_channels([a, b])), [_t(rng, 2, 2, 3, 3), _t(rng, 2, 1, 3, 3)]


def _add(rng):
    return (lambda a, b, c: add(a, b, c)), [_t(rng, 1, 2, 3, 3) for _ in range(3)]


def _weighted_sum(rng):
    maps = [_t(rng, 1, 3, 4, 4) for _ in range(3)]
    logits = _t(rng, 3)
    return (lambda a, b, c, z: weighted_sum([a, b, c], z)), maps + [logits]


def _cross_entropy(ignore: bool):
    def build(rng):
        target = rng.integers(0, 4, (2, 5, 5))
        if ignore:
            target[rng.random(target.shape) < 0.3] = 255
        return (lambda z: softmax_cross_entropy(z, target, 255 if ignore else None)), [_t(rng, 2, 4, 5, 5)]
    return build


def _spp(side):
    def build(rng):
        cfg = SppConfig(levels=[1, 2, 3, 6], in_channels=4, reduced_channels=1)
        convs = init_level_convs(cfg, rng, WIDE)
        for c in convs:
            c.bias.data[:] = rng.standard_normal(c.bias.shape)
        x = _t(rng, 1, 4, side, side)
        flat = [x] + [t for c in convs for t in c.tensors()]
        return (lambda *_: spp_forward(x, cfg, convs)), flat
    return build


def _fuse_loss(rng):
    maps = [_t(rng, 2, 3, 6, 6), _t(rng, 2, 3, 5, 5), _t(rng, 2, 3, 3, 3)]
    att = AttentionWeights(_t(rng, 3))
    gt = rng.integers(0, 3, (2, 12, 12))

    def fn(*_):
        outputs = ScaleOutputs(maps, [1.0, 0.75, 0.5])
        return deep_supervision_loss(outputs, fuse(outputs, att), gt)
    return fn, maps + [att.logits]


def tiny_config() -> ApnetConfig:
    return ApnetConfig(scales=[1.0, 0.75, 0.5], num_classes=3, backbone_channels=[2, 3, 4],
                       dilation_rate=2, spp=SppConfig(in_channels=4, reduced_channels=1), input_size=16)


def two_scale_config() -> ApnetConfig:
    return ApnetConfig(scales=[1.0, 0.5], num_classes=3, backbone_channels=[2, 2, 2],
                       dilation_rate=2, spp=SppConfig(levels=[1, 2], in_channels=2), input_size=16)


def _model_case(make_config):
    def build(rng):
        return _model(rng, make_config())
    return build


def _model(rng, cfg):
    params = init_params(cfg, seed=int(rng.integers(2**31)), dtype=WIDE)
    for t in params.tensors():
        if t.data.ndim == 1:
            t.data[:] = 0.1 * rng.standard_normal(t.shape)
    image = Tensor(rng.standard_normal((2, 1, 16, 16)))
    gt = rng.integers(0, 3, (2, 16, 16))

    def fn(*_):
        outputs, fused = forward(image, params, cfg)
        return deep_supervision_loss(outputs, fused, gt)
    return fn, params.tensors()


CASES: dict[str, Callable] = {
    "conv2d 3x3 stride 1 pad 1": _conv_case(1, 1, 1),
    "conv2d 3x3 stride 2 pad 1": _conv_case(2, 1, 1),
    "conv2d 3x3 dilation 2 pad 2": _conv_case(1, 2, 2),
    "conv2d 1x1": _conv_case(1, 1, 0, kernel=1),
    "relu": _relu,
    "avg_pool_clipped k4 s4 10x10": _pool(4, 4, 10),
    "avg_pool_clipped k3 s2 7x7": _pool(3, 2, 7),
    "bilinear_resize up 5x6->9x11": _resize(9, 11),
    "bilinear_resize down 5x6->3x2": _resize(3, 2),
    "concat_channels": _concat,
    "add": _add,
    "weighted_sum (attention fusion)": _weighted_sum,
    "softmax_cross_entropy": _cross_entropy(False),
    "softmax_cross_entropy ignore": _cross_entropy(True),
    "spp_forward n=6": _spp(6),
    "spp_forward n=5": _spp(5),
    "fuse + deep supervision loss": _fuse_loss,
    "tiny APNet, 3 scales": _model_case(tiny_config),
    "tiny APNet, 2 scales, levels [1, 2]": _model_case(two_scale_config),
}


@dataclass
class SuiteResult:
    reports: list[GradCheckReport]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def to_text(self) -> str:
        lines = [str(r) for r in self.reports]
        lines.append(f"{sum(r.passed for r in self.reports)}/{len(self.reports)} ops passed")
        return "\n".join(lines)


def run_suite(seeds: Iterable[int] = range(10), tolerance: float = 1e-4,
              names: Iterable[str] | None = None) -> SuiteResult:
    """One report per case holding the worst relative error across ``seeds``."""
    seeds = list(seeds)
    reports = []
    for name in (names or CASES):
        worst, checked = 0.0, 0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            fn, inputs = CASES[name](rng)
            r = grad_check(fn, inputs, tolerance=tolerance, seed=seed, name=name)
            worst = max(worst, r.max_rel_error)
            checked += r.n_checked
        reports.append(GradCheckReport(f"{name} [{len(seeds)} seeds]", worst, tolerance, checked))
    return SuiteResult(reports)
