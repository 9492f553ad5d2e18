"""Deformation augmentation with affine moving least squares, plus the
conventional mirror/resize/rotate augmentation used as a comparison arm.

Points are (x, y) = (column, row) in pixel units throughout.

Warping is done by backward mapping: for every destination pixel we need
the source location to sample. MLS gives a forward map p -> q; the backward
map is approximated by the MLS map built from the swapped pairs q -> p.
This is not the exact inverse of the forward deformation, only a smooth
deformation with the same control displacements reversed, which is all
augmentation requires.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

COINCIDENT = 1e-9


@dataclass
class ControlPointSet:
    p: np.ndarray
    q: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 2)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 2)
        if self.p.shape != self.q.shape:
            raise ShapeError(f"p has {len(self.p)} points but q has {len(self.q)}")
        if len(self.p) < 3:
            raise ValueError("affine MLS needs at least 3 control points")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        centred = self.p - self.p.mean(axis=0)
        if np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 2:
            raise NumericError("control points p are collinear; the affine moment matrix is singular")

    def swapped(self) -> "ControlPointSet":
        return ControlPointSet(self.q, self.p, self.alpha)


def mls_affine_field(points: np.ndarray, cps: ControlPointSet) -> np.ndarray:
    """Evaluate the affine MLS deformation at an (m, 2) array of points."""
    v = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if np.array_equal(cps.p, cps.q):
        return v.copy()
    px, py = cps.p[:, 0], cps.p[:, 1]
    qx, qy = cps.q[:, 0], cps.q[:, 1]
    d2 = (px[None] - v[:, :1]) ** 2 + (py[None] - v[:, 1:]) ** 2  # (m, k)
    hit = d2 < COINCIDENT ** 2
    exact = hit.any(axis=1)
    d2[hit] = 1.0
    w = d2 ** -cps.alpha if cps.alpha != 1.0 else 1.0 / d2
    wsum = w.sum(axis=1)
    pxs, pys = w @ px / wsum, w @ py / wsum
    qxs, qys = w @ qx / wsum, w @ qy / wsum
    phx, phy = px[None] - pxs[:, None], py[None] - pys[:, None]
    qhx, qhy = qx[None] - qxs[:, None], qy[None] - qys[:, None]
    wx, wy = w * phx, w * phy
    # moment matrix [[a, b], [b, c]] and cross moments [[e, f], [g, h]]
    a, b_, c = (wx * phx).sum(1), (wx * phy).sum(1), (wy * phy).sum(1)
    e, f = (wx * qhx).sum(1), (wx * qhy).sum(1)
    g, h = (wy * qhx).sum(1), (wy * qhy).sum(1)
    det = a * c - b_ * b_
    singular = (np.abs(det) <= 1e-12 * (a + c) ** 2) & ~exact
    if singular.any():
        raise NumericError(
            f"weighted moment matrix is singular at point {v[np.argmax(singular)]}: "
            "the effective control points are collinear"
        )
    det = np.where(exact, 1.0, det)
    # rows of M = A^-1 B
    m00, m01 = (c * e - b_ * g) / det, (c * f - b_ * h) / det
    m10, m11 = (a * g - b_ * e) / det, (a * h - b_ * f) / det
    dx, dy = v[:, 0] - pxs, v[:, 1] - pys
    out = np.stack([dx * m00 + dy * m10 + qxs, dx * m01 + dy * m11 + qys], axis=1)
    if exact.any():
        out[exact] = cps.q[np.argmax(hit[exact], axis=1)]
    return out


def mls_affine_map(v, cps: ControlPointSet) -> np.ndarray:
    """Affine MLS image of a single point ``v``."""
    return mls_affine_field(np.asarray(v, dtype=np.float64)[None], cps)[0]


@dataclass
class DeformSpec:
    grid: int = 4
    max_displacement: float | None = None
    seed: int = 0
    alpha: float = 1.0

    def displacement(self, side: int) -> float:
        return 0.05 * side if self.max_displacement is None else float(self.max_displacement)


def lattice(side_h: int, side_w: int, grid: int) -> np.ndarray:
    xs = np.linspace(0, side_w - 1, grid)
    ys = np.linspace(0, side_h - 1, grid)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def control_points(side_h: int, side_w: int, spec: DeformSpec) -> ControlPointSet:
    """Lattice sources with seeded uniform displacements as targets."""
    if spec.grid < 2:
        raise ValueError("the control lattice needs at least 2 points per axis")
    d = spec.displacement(min(side_h, side_w))
    spacing = (min(side_h, side_w) - 1) / (spec.grid - 1)
    if not d < spacing / 2:
        raise ValueError(f"max displacement {d:.2f} must be below half the lattice spacing {spacing / 2:.2f}")
    p = lattice(side_h, side_w, spec.grid)
    rng = np.random.default_rng(spec.seed)
    q = p + rng.uniform(-d, d, p.shape)
    return ControlPointSet(p, q, spec.alpha)


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample the trailing (h, w) axes at float coordinates, clamped to bounds."""
    h, w = image.shape[-2:]
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = image[..., y0, x0] * (1 - fx) + image[..., y0, x1] * fx
    bottom = image[..., y1, x0] * (1 - fx) + image[..., y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def sample_nearest(labels: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill=None) -> np.ndarray:
    """Nearest-neighbour sampling; out-of-bounds coordinates clamp unless ``fill`` is given."""
    h, w = labels.shape[-2:]
    xi = np.floor(xs + 0.5).astype(np.intp)
    yi = np.floor(ys + 0.5).astype(np.intp)
    out = labels[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    if fill is not None:
        outside = (xi < 0) | (xi >= w) | (yi < 0) | (yi >= h)
        out = np.where(outside, fill, out)
    return out


def _resample_pair(image, labels, xs, ys, image_fill=None, label_fill=None):
    img = np.asarray(image)
    warped = sample_bilinear(img.astype(np.float64), xs, ys)
    if image_fill is not None:
        h, w = img.shape[-2:]
        outside = (xs < -0.5) | (xs > w - 0.5) | (ys < -0.5) | (ys > h - 0.5)
        warped = np.where(outside, image_fill, warped)
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        warped = np.clip(np.round(warped), info.min, info.max)
    return warped.astype(img.dtype), sample_nearest(np.asarray(labels), xs, ys, label_fill)


def warp_pair(image: np.ndarray, labels: np.ndarray, spec: DeformSpec) -> tuple[np.ndarray, np.ndarray]:
    """Deform an image (bilinear) and its label map (nearest) with one shared field.

    ``image`` may carry leading channel axes; the trailing two axes must
    match ``labels``.
    """
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.shape[-2:] != labels.shape:
        raise ShapeError(f"image spatial axes {image.shape[-2:]} differ from labels {labels.shape}")
    h, w = labels.shape
    if spec.displacement(min(h, w)) == 0:
        return image.copy(), labels.copy()
    return warp_with_control_points(image, labels, control_points(h, w, spec))


def warp_with_control_points(image, labels, cps: ControlPointSet) -> tuple[np.ndarray, np.ndarray]:
    """Warp so that content at each ``p`` moves to its ``q``; see :func:`warp_pair`."""
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.shape[-2:] != labels.shape:
        raise ShapeError(f"image spatial axes {image.shape[-2:]} differ from labels {labels.shape}")
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dst = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    src = mls_affine_field(dst, cps.swapped())
    return _resample_pair(image, labels, src[:, 0].reshape(h, w), src[:, 1].reshape(h, w))


@dataclass
class CommonAugParams:
    mirror: bool = False
    scale: float = 1.0
    angle: float = 0.0  # degrees


def draw_common_params(rng: np.random.Generator) -> CommonAugParams:
    return CommonAugParams(
        mirror=bool(rng.random() < 0.5),
        scale=float(rng.uniform(0.75, 1.25)),
        angle=float(rng.uniform(-10.0, 10.0)),
    )


def apply_common(image, labels, params: CommonAugParams, label_fill: int = 0):
    """Mirror, then scale and rotate about the image centre, keeping the size.

    Zooming in crops the borders; zooming out pads with zero intensity and
    ``label_fill``.
    """
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.shape[-2:] != labels.shape:
        raise ShapeError(f"image spatial axes {image.shape[-2:]} differ from labels {labels.shape}")
    if params.mirror:
        image = image[..., ::-1]
        labels = labels[:, ::-1]
    if params.scale == 1.0 and params.angle == 0.0:
        return image.copy(), labels.copy()
    h, w = labels.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = np.deg2rad(params.angle)
    c, s = np.cos(t), np.sin(t)
    dx, dy = xx - cx, yy - cy
    # inverse of "rotate by t then scale"
    xs = (c * dx + s * dy) / params.scale + cx
    ys = (-s * dx + c * dy) / params.scale + cy
    return _resample_pair(image, labels, xs, ys, image_fill=0, label_fill=label_fill)


def common_augment(image, labels, seed: int, label_fill: int = 0):
    return apply_common(image, labels, draw_common_params(np.random.default_rng(seed)), label_fill)
