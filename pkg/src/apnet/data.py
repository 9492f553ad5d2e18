"""Synthetic twin-organ dataset generator, image/label file I/O and manifests.

The generator draws "anatomies" made of smooth blobs. Paired classes come in
left/right twins with identical intensity and shape statistics, so they can
only be told apart by which half of the image they occupy. Consecutive slices
of a series morph every blob smoothly.

Manifest format (UTF-8 text, one entry per line, tab separated)::

    # apnet-manifest v1
    # num_classes=<int>
    # class_names=<comma separated>
    # image_side=<int>
    <image path>\t<label path>\t<series id>\t<slice index>

Paths are relative to the manifest's directory. Labels are 8-bit PNGs whose
pixel value is the class index; 255 is reserved for ``IGNORE_LABEL``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, DecodeError, GenerationError

IGNORE_LABEL = 255
MANIFEST_HEADER = "# apnet-manifest v1"


@dataclass
class SynthSpec:
    side: int = 64
    n_pairs: int = 2
    n_unpaired: int = 1
    radius_range: tuple[float, float] = (0.075, 0.1)
    pair_offset_range: tuple[float, float] = (0.2, 0.3)
    vertical_range: tuple[float, float] = (0.15, 0.85)
    position_jitter: float = 0.03
    midline_shift: float = 0.0
    lobes: int = 3
    lobe_amplitude: float = 0.15
    morph_amplitude: float = 0.15
    morph_period: float = 8.0
    background: float = 0.12
    noise: float = 0.04
    blur: float = 0.7
    margin: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        self.pair_offset_range = tuple(self.pair_offset_range)
        self.vertical_range = tuple(self.vertical_range)
        if self.side % 8 or self.side < 8:
            raise ConfigError(f"side must be a positive multiple of 8, got {self.side}")
        if self.num_classes > 254:
            raise ConfigError(f"{self.num_classes} classes exceed the 8-bit label limit of 254")
        if self.n_pairs < 0 or self.n_unpaired < 0:
            raise ConfigError("class counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return 1 + 2 * self.n_pairs + self.n_unpaired

    @property
    def class_names(self) -> list[str]:
        names = ["background"]
        for k in range(self.n_pairs):
            names += [f"pair{k}-left", f"pair{k}-right"]
        names += [f"single{j}" for j in range(self.n_unpaired)]
        return names

    @property
    def twin_pairs(self) -> list[tuple[int, int]]:
        """(left class, right class) for every twin pair."""
        return [(1 + 2 * k, 2 + 2 * k) for k in range(self.n_pairs)]

    def intensities(self) -> np.ndarray:
        """Per-class mean intensity in [0, 1]; twins share one level."""
        levels = np.linspace(0.4, 0.95, max(1, self.n_pairs + self.n_unpaired))
        out = np.empty(self.num_classes)
        out[0] = self.background
        for k, (a, b) in enumerate(self.twin_pairs):
            out[a] = out[b] = levels[k]
        for j in range(self.n_unpaired):
            out[1 + 2 * self.n_pairs + j] = levels[self.n_pairs + j]
        return out


@dataclass
class _Blob:
    cls: int
    cy: float
    cx: float
    radius: float
    harmonics: np.ndarray  # (lobes, 2): amplitude, phase
    drift: np.ndarray  # (2,) peak centre displacement over a morph cycle
    morph_phase: float

    def reach(self, spec: "SynthSpec") -> float:
        lobe = float(self.harmonics[:, 0].sum())
        return self.radius * (1 + lobe) * (1 + spec.morph_amplitude) + float(np.hypot(*self.drift))


@dataclass
class Sample:
    image: np.ndarray  # uint8 (h, w)
    labels: np.ndarray  # uint8 (h, w)
    series: str
    slice_index: int


def _draw_anatomy(spec: SynthSpec, rng: np.random.Generator) -> list[_Blob]:
    n = spec.side
    lo, hi = spec.radius_range
    jit = spec.position_jitter * n

    def blob(cls, cy, cx):
        r = rng.uniform(lo, hi) * n
        amps = rng.uniform(0, spec.lobe_amplitude, spec.lobes) / np.arange(1, spec.lobes + 1)
        phases = rng.uniform(0, 2 * np.pi, spec.lobes)
        return _Blob(cls, cy, cx, r, np.stack([amps, phases], 1),
                     rng.uniform(-1, 1, 2) * 0.5 * jit, rng.uniform(0, 2 * np.pi))

    for _ in range(500):
        blobs = []
        mid = n / 2 + rng.uniform(-1, 1) * spec.midline_shift * n
        for left, right in spec.twin_pairs:
            cy = rng.uniform(*spec.vertical_range) * n
            dx = rng.uniform(*spec.pair_offset_range) * n
            blobs.append(blob(left, cy + rng.uniform(-jit, jit), mid - dx + rng.uniform(-jit, jit)))
            blobs.append(blob(right, cy + rng.uniform(-jit, jit), mid + dx + rng.uniform(-jit, jit)))
        for j in range(spec.n_unpaired):
            cy = rng.uniform(*spec.vertical_range) * n
            blobs.append(blob(1 + 2 * spec.n_pairs + j, cy, mid + rng.uniform(-jit, jit)))
        if _placement_ok(blobs, spec):
            return blobs
    raise GenerationError(
        f"could not place {len(spec.class_names) - 1} blobs without overlap in a {n}x{n} image; "
        "reduce radius_range or the class count"
    )


def _placement_ok(blobs: list[_Blob], spec: SynthSpec) -> bool:
    n = spec.side
    reach = [b.reach(spec) for b in blobs]
    twins = {c for p in spec.twin_pairs for c in p}
    for b, r in zip(blobs, reach):
        if b.cx - r < 1 or b.cy - r < 1 or b.cx + r > n - 2 or b.cy + r > n - 2:
            return False
        if b.cls in twins and abs(b.cx - n / 2) < r + 1:
            return False
    for i in range(len(blobs)):
        for j in range(i + 1, len(blobs)):
            d = math.hypot(blobs[i].cx - blobs[j].cx, blobs[i].cy - blobs[j].cy)
            if d < reach[i] + reach[j] + spec.margin:
                return False
    return True


def _render(blobs: list[_Blob], spec: SynthSpec, t: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = spec.side
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    labels = np.zeros((n, n), dtype=np.uint8)
    phase = 2 * np.pi * t / spec.morph_period
    for b in blobs:
        cy, cx = b.cy + b.drift[0] * np.sin(phase), b.cx + b.drift[1] * np.sin(phase)
        theta = np.arctan2(yy - cy, xx - cx)
        r = np.hypot(yy - cy, xx - cx)
        k = np.arange(1, len(b.harmonics) + 1)[:, None, None]
        amp, lobe_phase = b.harmonics[:, 0, None, None], b.harmonics[:, 1, None, None]
        boundary = 1 + np.sum(amp * np.cos(k * theta + lobe_phase + 0.5 * np.sin(phase + b.morph_phase)), axis=0)
        boundary *= b.radius * (1 + spec.morph_amplitude * np.sin(phase + b.morph_phase))
        labels[r <= boundary] = b.cls
    image = spec.intensities()[labels]
    if spec.blur > 0:
        image = gaussian_filter(image, spec.blur, mode="nearest")
    if spec.noise > 0:
        image = image + rng.normal(0, spec.noise, image.shape)
    return np.clip(np.round(image * 255), 0, 255).astype(np.uint8), labels


def generate_samples(spec: SynthSpec, n_series: int, slices_per_series: int) -> list[Sample]:
    """In-memory generation; deterministic for a given ``spec.seed``."""
    if n_series < 1 or slices_per_series < 1:
        raise ConfigError("n_series and slices_per_series must be positive")
    master = np.random.SeedSequence(spec.seed)
    samples = []
    for s, child in enumerate(master.spawn(n_series)):
        rng = np.random.default_rng(child)
        blobs = _draw_anatomy(spec, rng)
        for k in range(slices_per_series):
            image, labels = _render(blobs, spec, float(k), rng)
            samples.append(Sample(image, labels, f"series{s:03d}", k))
    return samples


def mirror_swap(image: np.ndarray, labels: np.ndarray, twin_pairs) -> tuple[np.ndarray, np.ndarray]:
    """Reflect left/right and exchange every twin pair's class ids."""
    lut = np.arange(256, dtype=np.uint8)
    for a, b in twin_pairs:
        lut[a], lut[b] = b, a
    return image[:, ::-1].copy(), lut[labels[:, ::-1]]


# --------------------------------------------------------------------- I/O


def save_image(path, image: np.ndarray) -> None:
    """Write an 8-bit grayscale image; format follows the suffix (.png or .pgm)."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise DataError(f"{path}: expected a 2-D uint8 array, got {arr.dtype} {arr.shape}")
    Image.fromarray(arr).save(path)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I;16", "1") and im.mode != "RGB":
                raise DecodeError(f"{path}: unsupported image mode {im.mode}")
            arr = np.asarray(im.convert("L") if im.mode != "L" else im).copy()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(f"{path}: cannot decode image ({exc})") from exc
    return arr


def save_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DataError(f"{path}: label map must be 2-D, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise DataError(f"{path}: label values must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8)).save(path)


def load_labels(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DecodeError(f"{path}: label file must be 8-bit single channel, got mode {im.mode}")
            arr = np.asarray(im).copy()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(f"{path}: cannot decode label map ({exc})") from exc
    return arr


# --------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    image: str
    labels: str
    series: str
    slice_index: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    num_classes: int
    class_names: list[str]
    image_side: int
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def series_ids(self) -> list[str]:
        return sorted({e.series for e in self.entries})

    def subset(self, series: set[str]) -> "DatasetManifest":
        return DatasetManifest(
            [e for e in self.entries if e.series in series],
            self.num_classes, list(self.class_names), self.image_side, self.root,
        )

    def validate(self) -> None:
        """Check every file exists, decodes, and matches dims and class range."""
        for e in self.entries:
            img_path, lab_path = self.resolve(e.image), self.resolve(e.labels)
            for p in (img_path, lab_path):
                if not p.exists():
                    raise DataError(f"manifest entry references missing file {p}")
            img, lab = load_image(img_path), load_labels(lab_path)
            if img.shape != lab.shape:
                raise DataError(f"{img_path} is {img.shape} but {lab_path} is {lab.shape}")
            if img.shape != (self.image_side, self.image_side):
                raise DataError(f"{img_path} is {img.shape}, manifest declares side {self.image_side}")
            bad = (lab >= self.num_classes) & (lab != IGNORE_LABEL)
            if bad.any():
                y, x = np.argwhere(bad)[0]
                raise DataError(f"{lab_path}: label {lab[y, x]} at (y={y}, x={x}) >= num_classes {self.num_classes}")

    def load_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack every entry into (n, h, w) uint8 images and labels."""
        images, labels = [], []
        for e in self.entries:
            img, lab = load_image(self.resolve(e.image)), load_labels(self.resolve(e.labels))
            if img.shape != lab.shape:
                raise DataError(f"{e.image} is {img.shape} but {e.labels} is {lab.shape}")
            images.append(img)
            labels.append(lab)
        return np.stack(images), np.stack(labels)


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [
        MANIFEST_HEADER,
        f"# num_classes={manifest.num_classes}",
        f"# class_names={','.join(manifest.class_names)}",
        f"# image_side={manifest.image_side}",
    ]
    lines += [f"{e.image}\t{e.labels}\t{e.series}\t{e.slice_index}" for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DecodeError(f"{path}: cannot read manifest ({exc})") from exc
    meta, entries = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].strip().split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DecodeError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(parts)}")
        try:
            entries.append(ManifestEntry(parts[0], parts[1], parts[2], int(parts[3])))
        except ValueError as exc:
            raise DecodeError(f"{path}:{lineno}: bad slice index {parts[3]!r}") from exc
    try:
        num_classes = int(meta["num_classes"])
        side = int(meta["image_side"])
    except (KeyError, ValueError) as exc:
        raise DecodeError(f"{path}: header must declare num_classes and image_side") from exc
    names = meta.get("class_names", "")
    names = names.split(",") if names else [str(i) for i in range(num_classes)]
    return DatasetManifest(entries, num_classes, names, side, path.parent)


def split_by_series(manifest: DatasetManifest, fractions=(0.7, 0.15, 0.15), seed: int = 0,
                    names=("train", "val", "test")) -> dict[str, DatasetManifest]:
    """Partition whole series into splits; a series never straddles two splits."""
    ids = manifest.series_ids
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    fr = np.asarray(fractions, dtype=float)
    counts = np.floor(fr / fr.sum() * len(ids)).astype(int)
    for i in np.argsort(-fr)[: len(ids) - counts.sum()]:
        counts[i] += 1
    splits, start = {}, 0
    for name, c in zip(names, counts):
        splits[name] = manifest.subset(set(order[start:start + c]))
        start += c
    assert_disjoint_series(splits.values())
    return splits


def assert_disjoint_series(manifests) -> None:
    seen: dict[str, int] = {}
    for i, m in enumerate(manifests):
        for s in m.series_ids:
            if s in seen and seen[s] != i:
                raise DataError(f"series {s} appears in more than one split")
            seen[s] = i


def generate(spec: SynthSpec, n_series: int, slices_per_series: int, out_dir) -> DatasetManifest:
    """Generate samples, write them as PNGs under ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in generate_samples(spec, n_series, slices_per_series):
        stem = f"{s.series}_{s.slice_index:03d}.png"
        save_image(out / "images" / stem, s.image)
        save_labels(out / "labels" / stem, s.labels)
        entries.append(ManifestEntry(f"images/{stem}", f"labels/{stem}", s.series, s.slice_index))
    manifest = DatasetManifest(entries, spec.num_classes, spec.class_names, spec.side, out)
    write_manifest(out / "manifest.tsv", manifest)
    return manifest


@dataclass
class SegDataset:
    """In-memory images (uint8) and labels with series ids, ready for training."""

    images: np.ndarray
    labels: np.ndarray
    series: list[str]
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_samples(cls, samples: list[Sample], num_classes: int, class_names=None) -> "SegDataset":
        return cls(
            np.stack([s.image for s in samples]),
            np.stack([s.labels for s in samples]),
            [s.series for s in samples],
            num_classes,
            list(class_names or []),
        )

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "SegDataset":
        images, labels = manifest.load_arrays()
        return cls(images, labels, [e.series for e in manifest.entries], manifest.num_classes, manifest.class_names)


def to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (n, h, w) -> float (n, 1, h, w), scaled to [0, 1] and shifted so
    each image's median (its background level) sits at zero."""
    x = np.asarray(images, dtype=np.float64) / 255.0
    x -= np.median(x.reshape(len(x), -1), axis=1)[:, None, None]
    return x[:, None].astype(dtype)
