import math

import numpy as np
import pytest

from apnet.attention import AttentionWeights, ScaleOutputs, deep_supervision_loss, downsample_labels, fuse
from apnet.errors import ShapeError
from apnet.tensor import Tensor, softmax_cross_entropy


def test_equal_initialisation():
    for s in (1, 2, 3):
        w = AttentionWeights.equal(s).weights
        assert (w == 1.0 / s).all()


def test_fuse_weighted_constant_maps():
    maps = [Tensor(np.full((1, 2, 4, 4), v)) for v in (1.0, 2.0, 3.0)]
    att = AttentionWeights(Tensor(np.log([0.5, 0.3, 0.2])))
    np.testing.assert_allclose(fuse(ScaleOutputs(maps, [1.0, 0.75, 0.5]), att).data, 1.7, atol=1e-14)


def test_single_scale_ignores_logits():
    m = Tensor(np.random.default_rng(0).standard_normal((1, 3, 4, 4)))
    for z in (0.0, 5.0, -3.0):
        out = fuse(ScaleOutputs([m], [1.0]), AttentionWeights(Tensor(np.array([z]))))
        np.testing.assert_array_equal(out.data, m.data)


def test_fuse_resizes_to_reference():
    rng = np.random.default_rng(1)
    maps = [Tensor(rng.standard_normal((1, 2, s, s))) for s in (3, 6, 5)]
    out = fuse(ScaleOutputs(maps, [0.5, 1.0, 0.75]), AttentionWeights.equal(3, np.float64))
    assert out.shape == (1, 2, 6, 6)


def test_fuse_permutation_equivariant():
    rng = np.random.default_rng(2)
    maps = [Tensor(rng.standard_normal((1, 2, s, s))) for s in (6, 5, 3)]
    logits = rng.standard_normal(3)
    a = fuse(ScaleOutputs(maps, [1.0, 0.75, 0.5]), AttentionWeights(Tensor(logits))).data
    perm = [2, 0, 1]
    b = fuse(ScaleOutputs([maps[i] for i in perm], [[1.0, 0.75, 0.5][i] for i in perm]),
             AttentionWeights(Tensor(logits[perm]))).data
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_logit_shift_invariance():
    rng = np.random.default_rng(3)
    maps = [Tensor(rng.standard_normal((1, 4, 5, 5))) for _ in range(3)]
    logits = np.array([0.25, -0.5, 0.125])
    outs = ScaleOutputs(maps, [1.0, 0.75, 0.5])
    a = fuse(outs, AttentionWeights(Tensor(logits))).data
    b = fuse(outs, AttentionWeights(Tensor(logits + 3.0))).data
    np.testing.assert_array_equal(a.argmax(axis=1), b.argmax(axis=1))
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_fuse_empty():
    with pytest.raises(ValueError):
        fuse(ScaleOutputs([], []), AttentionWeights(Tensor(np.zeros(0))))


def test_scale_outputs_length_mismatch():
    with pytest.raises(ShapeError):
        ScaleOutputs([Tensor(np.zeros((1, 1, 2, 2)))], [1.0, 0.5])


def test_downsample_labels_nearest():
    lab = np.arange(16).reshape(1, 4, 4)
    np.testing.assert_array_equal(downsample_labels(lab, 2, 2)[0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(downsample_labels(lab, 4, 4), lab)
    assert set(np.unique(downsample_labels(lab, 3, 3))) <= set(range(16))


def test_uniform_logits_loss():
    c = 4
    maps = [Tensor(np.zeros((2, c, s, s))) for s in (4, 3, 2)]
    outs = ScaleOutputs(maps, [1.0, 0.75, 0.5])
    fused = fuse(outs, AttentionWeights.equal(3, np.float64))
    gt = np.random.default_rng(4).integers(0, c, (2, 32, 32))
    assert deep_supervision_loss(outs, fused, gt).item() == pytest.approx(4 * math.log(c), rel=1e-14)


def test_perfect_logits_loss_vanishes():
    gt = np.random.default_rng(5).integers(0, 3, (1, 8, 8))
    onehot = np.eye(3)[gt].transpose(0, 3, 1, 2) * 80.0
    m = Tensor(onehot)
    outs = ScaleOutputs([m], [1.0])
    assert deep_supervision_loss(outs, fuse(outs, AttentionWeights.equal(1, np.float64)), gt).item() < 1e-20


def test_single_scale_without_auxiliary_is_plain_ce():
    rng = np.random.default_rng(6)
    m = Tensor(rng.standard_normal((2, 3, 8, 8)))
    gt = rng.integers(0, 3, (2, 8, 8))
    outs = ScaleOutputs([m], [1.0])
    loss = deep_supervision_loss(outs, fuse(outs, AttentionWeights.equal(1, np.float64)), gt, auxiliary=False)
    assert loss.item() == softmax_cross_entropy(m, gt).item()


def test_loss_rejects_bad_ground_truth():
    m = Tensor(np.zeros((2, 3, 4, 4)))
    outs = ScaleOutputs([m], [1.0])
    with pytest.raises(ShapeError):
        deep_supervision_loss(outs, m, np.zeros((1, 4, 4), int))


def test_logits_get_gradient_when_maps_differ():
    rng = np.random.default_rng(7)
    maps = [Tensor(rng.standard_normal((1, 3, 4, 4)), True) for _ in range(2)]
    att = AttentionWeights(Tensor(np.zeros(2), True))
    outs = ScaleOutputs(maps, [1.0, 0.75])
    deep_supervision_loss(outs, fuse(outs, att), rng.integers(0, 3, (1, 8, 8))).backward()
    assert np.abs(att.logits.grad).max() > 0
    # gradient of softmax logits always sums to zero
    assert abs(att.logits.grad.sum()) < 1e-12
