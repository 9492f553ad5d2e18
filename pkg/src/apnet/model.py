"""Attention-pyramid network assembly, prediction and checkpoint files.

Every scale runs the same backbone (three stride-2 3x3 convolutions and one
dilated 3x3 convolution, ReLU after each, output stride 8), a pyramid
pooling layer and a 1x1 score convolution. The per-scale score maps are
fused with softmax attention weights.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionWeights, ScaleOutputs, fuse
from .errors import ConfigError, DecodeError, ShapeError
from .spp import SppConfig, init_level_convs, spp_forward
from .tensor import ConvParams, Tensor, bilinear_resize, conv2d, relu

BACKBONE_STRIDE = 8
CHECKPOINT_FORMAT = "apnet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ApnetConfig:
    scales: list[float] = field(default_factory=lambda: [1.0, 0.75, 0.5])
    num_classes: int = 6
    in_channels: int = 1
    backbone_channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    dilation_rate: int = 2
    spp: SppConfig | None = None
    use_spp: bool = True
    input_size: int = 64

    def __post_init__(self):
        self.scales = [float(s) for s in self.scales]
        self.backbone_channels = [int(c) for c in self.backbone_channels]
        if 1.0 not in self.scales:
            raise ConfigError(f"scales must contain 1.0, got {self.scales}")
        if any(not (0.5 <= s <= 1.0) for s in self.scales):
            raise ConfigError(f"every scale must lie in [0.5, 1], got {self.scales}")
        if len(set(self.scales)) != len(self.scales):
            raise ConfigError(f"duplicate scales {self.scales}")
        if self.input_size % BACKBONE_STRIDE or self.input_size < BACKBONE_STRIDE:
            raise ConfigError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if len(self.backbone_channels) != 3 or min(self.backbone_channels) < 1:
            raise ConfigError(f"backbone_channels needs three positive entries, got {self.backbone_channels}")
        if self.num_classes < 1 or self.in_channels < 1 or self.dilation_rate < 1:
            raise ConfigError("num_classes, in_channels and dilation_rate must be positive")
        if isinstance(self.spp, dict):
            self.spp = SppConfig(**self.spp)
        if self.use_spp:
            if self.spp is None:
                self.spp = SppConfig(in_channels=self.backbone_channels[-1])
            elif self.spp.in_channels != self.backbone_channels[-1]:
                raise ConfigError(
                    f"spp in_channels {self.spp.in_channels} != backbone output {self.backbone_channels[-1]}"
                )
        else:
            self.spp = None

    @property
    def head_channels(self) -> int:
        return self.spp.out_channels if self.spp else self.backbone_channels[-1]

    def scaled_sides(self) -> list[int]:
        return [scaled_side(self.input_size, s) for s in self.scales]

    def feature_sides(self) -> list[int]:
        return [math.ceil(side / BACKBONE_STRIDE) for side in self.scaled_sides()]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ApnetConfig":
        return cls(**d)


def scaled_side(input_size: int, scale: float) -> int:
    """Nearest multiple of 8 to ``scale * input_size`` (ties up), at least 8."""
    return max(BACKBONE_STRIDE, BACKBONE_STRIDE * math.floor(scale * input_size / BACKBONE_STRIDE + 0.5))


@dataclass
class ApnetParams:
    backbone: list[ConvParams]
    spp_convs: list[ConvParams]
    score: ConvParams
    attention: AttentionWeights

    def named_tensors(self) -> dict[str, Tensor]:
        named = {}
        for i, c in enumerate(self.backbone):
            named[f"backbone.{i}.weight"], named[f"backbone.{i}.bias"] = c.weight, c.bias
        for i, c in enumerate(self.spp_convs):
            named[f"spp.{i}.weight"], named[f"spp.{i}.bias"] = c.weight, c.bias
        named["score.weight"], named["score.bias"] = self.score.weight, self.score.bias
        named["attention.logits"] = self.attention.logits
        return named

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def decay_mask(self) -> list[bool]:
        """Weight decay applies to convolution weights only."""
        return [name.endswith(".weight") for name in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def copy(self) -> "ApnetParams":
        return params_from_arrays({k: t.data.copy() for k, t in self.named_tensors().items()}, self)


def _he_conv(rng, out_c, in_c, k, dtype, **geometry) -> ConvParams:
    std = math.sqrt(2.0 / (in_c * k * k))
    w = (rng.standard_normal((out_c, in_c, k, k)) * std).astype(dtype)
    return ConvParams(Tensor(w, True), Tensor(np.zeros(out_c, dtype), True), **geometry)


def init_params(config: ApnetConfig, seed: int = 0, dtype=np.float32) -> ApnetParams:
    rng = np.random.default_rng(seed)
    c1, c2, c3 = config.backbone_channels
    backbone = [
        _he_conv(rng, c1, config.in_channels, 3, dtype, stride=2, padding=1),
        _he_conv(rng, c2, c1, 3, dtype, stride=2, padding=1),
        _he_conv(rng, c3, c2, 3, dtype, stride=2, padding=1),
        _he_conv(rng, c3, c3, 3, dtype, dilation=config.dilation_rate, padding=config.dilation_rate),
    ]
    spp_convs = init_level_convs(config.spp, rng, dtype) if config.spp else []
    score = _he_conv(rng, config.num_classes, config.head_channels, 1, dtype)
    score.weight.data *= 0.5
    return ApnetParams(backbone, spp_convs, score, AttentionWeights.equal(len(config.scales), dtype))


def params_from_arrays(arrays: dict[str, np.ndarray], template: ApnetParams) -> ApnetParams:
    """Build a parameter set with ``template``'s geometry and the given values."""
    def conv(prefix, ref):
        return ConvParams(
            Tensor(arrays[f"{prefix}.weight"], True), Tensor(arrays[f"{prefix}.bias"], True),
            stride=ref.stride, dilation=ref.dilation, padding=ref.padding,
        )
    return ApnetParams(
        [conv(f"backbone.{i}", c) for i, c in enumerate(template.backbone)],
        [conv(f"spp.{i}", c) for i, c in enumerate(template.spp_convs)],
        conv("score", template.score),
        AttentionWeights(Tensor(arrays["attention.logits"], True)),
    )


def backbone_forward(x: Tensor, convs: list[ConvParams]) -> Tensor:
    for conv in convs:
        x = relu(conv2d(x, conv))
    return x


def forward(image: Tensor, params: ApnetParams, config: ApnetConfig) -> tuple[ScaleOutputs, Tensor]:
    if image.data.ndim != 4:
        raise ShapeError(f"image must be rank-4 (n, c, h, w), got {image.shape}")
    _, c, h, w = image.shape
    if h != w or h != config.input_size:
        raise ShapeError(f"image height/width axes {h}x{w} must both equal input_size {config.input_size}")
    if c != config.in_channels:
        raise ShapeError(f"image channel axis is {c}, config expects {config.in_channels}")
    maps = []
    for side in config.scaled_sides():
        x = bilinear_resize(image, side, side)
        feat = backbone_forward(x, params.backbone)
        if config.spp is not None:
            feat = spp_forward(feat, config.spp, params.spp_convs)
        maps.append(conv2d(feat, params.score))
    outputs = ScaleOutputs(maps, list(config.scales))
    return outputs, fuse(outputs, params.attention)


def predict(fused: Tensor | np.ndarray, config: ApnetConfig) -> np.ndarray:
    """Upsample to the input size and take the per-pixel argmax.

    Ties go to the lowest class index. Returns an (n, h, w) integer array.
    """
    t = fused if isinstance(fused, Tensor) else Tensor(fused)
    up = bilinear_resize(t, config.input_size, config.input_size).data
    return np.argmax(up, axis=1)


def save_checkpoint(path, params: ApnetParams, config: ApnetConfig, extra: dict | None = None) -> None:
    """Write a ``.npz`` archive: one array per named parameter plus JSON metadata.

    Metadata keys: ``__format__`` ("apnet-checkpoint"), ``__version__`` (1),
    ``__config__`` (ApnetConfig as JSON), ``__extra__`` (free-form JSON).
    """
    arrays = {k: t.data for k, t in params.named_tensors().items()}
    arrays["__format__"] = np.array(CHECKPOINT_FORMAT)
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__config__"] = np.array(json.dumps(config.to_dict(), sort_keys=True))
    arrays["__extra__"] = np.array(json.dumps(extra or {}, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ApnetParams, ApnetConfig, dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise DecodeError(f"{path}: not a readable checkpoint ({exc})") from exc
    if str(data.get("__format__", "")) != CHECKPOINT_FORMAT:
        raise DecodeError(f"{path}: missing apnet checkpoint marker")
    version = int(data["__version__"])
    if version != CHECKPOINT_VERSION:
        raise DecodeError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ApnetConfig.from_dict(json.loads(str(data["__config__"])))
        extra = json.loads(str(data["__extra__"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"{path}: bad checkpoint metadata ({exc})") from exc
    template = init_params(config, seed=0)
    for name, t in template.named_tensors().items():
        if name not in data:
            raise DecodeError(f"{path}: missing parameter {name}")
        if data[name].shape != t.shape:
            raise DecodeError(f"{path}: parameter {name} has shape {data[name].shape}, expected {t.shape}")
    return params_from_arrays(data, template), config, extra
