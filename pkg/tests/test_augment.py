import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apnet.augment import (
    CommonAugParams,
    ControlPointSet,
    DeformSpec,
    apply_common,
    common_augment,
    control_points,
    draw_common_params,
    lattice,
    mls_affine_field,
    mls_affine_map,
    sample_bilinear,
    warp_pair,
    warp_with_control_points,
)
from apnet.errors import NumericError, ShapeError


def naive_mls(v, p, q, alpha=1.0):
    """Affine MLS written straight from its definition with explicit matrices."""
    d = np.linalg.norm(p - v, axis=1)
    if d.min() < 1e-9:
        return q[np.argmin(d)]
    w = 1 / d ** (2 * alpha)
    ps, qs = w @ p / w.sum(), w @ q / w.sum()
    ph, qh = p - ps, q - qs
    a = sum(wi * np.outer(x, x) for wi, x in zip(w, ph))
    b = sum(wi * np.outer(x, y) for wi, x, y in zip(w, ph, qh))
    return (v - ps) @ np.linalg.inv(a) @ b + qs


def random_cps(seed, k=9, spread=30.0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, spread, (k, 2))
    q = p + rng.normal(0, 2.0, (k, 2))
    return ControlPointSet(p, q, float(rng.uniform(0.5, 2.0)))


def pixel_grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.stack([xx.ravel(), yy.ravel()], 1).astype(float)


def test_matches_naive_definition():
    for seed in range(5):
        cps = random_cps(seed)
        pts = np.random.default_rng(seed + 100).uniform(-5, 35, (40, 2))
        expected = np.array([naive_mls(v, cps.p, cps.q, cps.alpha) for v in pts])
        np.testing.assert_allclose(mls_affine_field(pts, cps), expected, atol=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_identity_control_points(seed):
    cps = random_cps(seed)
    same = ControlPointSet(cps.p, cps.p, cps.alpha)
    grid = pixel_grid(32, 32)
    np.testing.assert_array_equal(mls_affine_field(grid, same), grid)


@pytest.mark.parametrize("seed", range(20))
def test_translation_reproduction(seed):
    cps = random_cps(seed)
    t = np.random.default_rng(seed).uniform(-4, 4, 2)
    moved = ControlPointSet(cps.p, cps.p + t, cps.alpha)
    grid = pixel_grid(32, 32)
    np.testing.assert_allclose(mls_affine_field(grid, moved), grid + t, atol=1e-6, rtol=0)


@pytest.mark.parametrize("seed", range(20))
def test_interpolates_control_points(seed):
    cps = random_cps(seed)
    for i in range(len(cps.p)):
        assert np.allclose(mls_affine_map(cps.p[i], cps), cps.q[i], atol=1e-5, rtol=0)
        near = cps.p[i] + np.array([1e-9, 0.0])
        assert np.allclose(mls_affine_map(near, cps), cps.q[i], atol=1e-5, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_affine_reproduction(seed):
    """MLS reproduces any global affine map exactly."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 20, (6, 2))
    m = np.eye(2) + rng.uniform(-0.3, 0.3, (2, 2))
    t = rng.uniform(-3, 3, 2)
    cps = ControlPointSet(p, p @ m + t)
    v = rng.uniform(0, 20, (25, 2))
    np.testing.assert_allclose(mls_affine_field(v, cps), v @ m + t, atol=1e-7)


def test_control_point_validation():
    with pytest.raises(NumericError, match="collinear"):
        ControlPointSet([[0, 0], [1, 1], [2, 2]], [[0, 0], [1, 1], [2, 2]])
    with pytest.raises(ValueError):
        ControlPointSet([[0, 0], [1, 0]], [[0, 0], [1, 0]])
    with pytest.raises(ShapeError):
        ControlPointSet([[0, 0], [1, 0], [0, 1]], [[0, 0], [1, 0]])
    with pytest.raises(ValueError):
        ControlPointSet([[0, 0], [1, 0], [0, 1]], [[0, 0], [1, 0], [0, 1]], alpha=0)


def test_lattice_and_displacement_bound():
    pts = lattice(16, 16, 4)
    assert pts.shape == (16, 2) and pts.min() == 0 and pts.max() == 15
    cps = control_points(64, 64, DeformSpec(seed=3))
    assert np.abs(cps.q - cps.p).max() <= 0.05 * 64
    with pytest.raises(ValueError, match="half the lattice spacing"):
        control_points(64, 64, DeformSpec(grid=4, max_displacement=11.0))


def sample_pair(seed=0, side=32):
    rng = np.random.default_rng(seed)
    labels = np.zeros((side, side), np.uint8)
    labels[5:15, 4:12] = 1
    labels[18:28, 10:26] = 2
    labels[8:12, 20:30] = 3
    image = (labels * 60 + rng.integers(0, 20, labels.shape)).astype(np.uint8)
    return image, labels


def test_zero_displacement_is_identity():
    img, lab = sample_pair()
    wi, wl = warp_pair(img, lab, DeformSpec(max_displacement=0.0))
    np.testing.assert_array_equal(wi, img)
    np.testing.assert_array_equal(wl, lab)


def test_uniform_translation_matches_integer_shift():
    img, lab = sample_pair(1)
    p = lattice(32, 32, 4)
    t = np.array([3.0, -2.0])  # content moves right 3, up 2
    wi, wl = warp_with_control_points(img, lab, ControlPointSet(p, p + t))
    core = (slice(4, 28), slice(4, 28))
    shifted_lab = np.roll(lab, (-2, 3), axis=(0, 1))
    shifted_img = np.roll(img, (-2, 3), axis=(0, 1))
    np.testing.assert_array_equal(wl[core], shifted_lab[core])
    np.testing.assert_array_equal(wi[core], shifted_img[core])


def test_warp_is_deterministic_and_seeded():
    img, lab = sample_pair(2)
    a = warp_pair(img, lab, DeformSpec(seed=11))
    b = warp_pair(img, lab, DeformSpec(seed=11))
    c = warp_pair(img, lab, DeformSpec(seed=12))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[1], c[1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_warp_never_invents_classes(seed):
    img, lab = sample_pair(seed % 7)
    _, wl = warp_pair(img, lab, DeformSpec(seed=seed))
    assert set(np.unique(wl)) <= set(np.unique(lab))


def test_joint_consistency_with_one_hot():
    img, lab = sample_pair(3)
    spec = DeformSpec(seed=5, max_displacement=3.0)
    onehot = np.eye(4)[lab].transpose(2, 0, 1)
    warped_hot, wl = warp_pair(onehot, lab, spec)
    # recover the source coordinates to find pixels whose 4 neighbours agree
    cps = control_points(32, 32, spec).swapped()
    src = mls_affine_field(pixel_grid(32, 32), cps)
    xs, ys = np.clip(src[:, 0], 0, 31), np.clip(src[:, 1], 0, 31)
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    x1, y1 = np.minimum(x0 + 1, 31), np.minimum(y0 + 1, 31)
    corners = np.stack([lab[y0, x0], lab[y0, x1], lab[y1, x0], lab[y1, x1]])
    agree = (corners == corners[0]).all(axis=0).reshape(32, 32)
    assert agree.mean() > 0.5
    np.testing.assert_array_equal(warped_hot.argmax(axis=0)[agree], wl[agree])


def test_warp_shape_mismatch():
    with pytest.raises(ShapeError):
        warp_pair(np.zeros((8, 8)), np.zeros((8, 9)), DeformSpec())


def test_sample_bilinear_values():
    im = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert sample_bilinear(im, np.array(0.5), np.array(0.5)) == 1.5
    assert sample_bilinear(im, np.array(-4.0), np.array(9.0)) == 2.0  # clamped


# --------------------------------------------------------------- common DA


def test_common_identity_draw():
    img, lab = sample_pair(4)
    wi, wl = apply_common(img, lab, CommonAugParams())
    np.testing.assert_array_equal(wi, img)
    np.testing.assert_array_equal(wl, lab)


def test_common_mirror_only():
    img, lab = sample_pair(5)
    wi, wl = apply_common(img, lab, CommonAugParams(mirror=True))
    np.testing.assert_array_equal(wl, lab[:, ::-1])
    np.testing.assert_array_equal(wi, img[:, ::-1])
    # class 1 sits on the left; after mirroring it sits on the right
    assert np.nonzero(wl == 1)[1].min() > 16


def test_common_determinism_and_ranges():
    img, lab = sample_pair(6)
    a, b = common_augment(img, lab, 9), common_augment(img, lab, 9)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    rng = np.random.default_rng(0)
    draws = [draw_common_params(rng) for _ in range(200)]
    assert all(0.75 <= d.scale <= 1.25 and -10 <= d.angle <= 10 for d in draws)
    assert 50 < sum(d.mirror for d in draws) < 150


def test_common_zoom_out_pads():
    img, lab = sample_pair(7)
    wi, wl = apply_common(img, lab, CommonAugParams(scale=0.75), label_fill=0)
    assert (wl[0] == 0).all() and (wi[0] == 0).all()
    assert set(np.unique(wl)) <= set(np.unique(lab))
