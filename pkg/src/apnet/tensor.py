"""A small reverse-mode differentiation engine over NCHW numpy arrays.

Only the operations the segmentation network needs are provided. Each op
computes its forward result eagerly and, when any input requires a
gradient, records a closure that maps the output gradient to gradients
for its inputs. ``Tensor.backward`` replays those closures in reverse
topological order.

Training runs in float32; gradient checks run in float64 (see
:func:`grad_check`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, ShapeError

NARROW = np.float32
WIDE = np.float64


class Tensor:
    """Array value plus optional gradient storage and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(NARROW)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_rank4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 (n, c, h, w), got shape {x.shape}")


@dataclass
class ConvParams:
    """Weights and geometry of one 2-D convolution.

    ``weight`` has shape (out_c, in_c, k, k) with odd ``k``; ``bias`` has
    shape (out_c,).
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 4 or w[2] != w[3]:
            raise ShapeError(f"conv weight must be (out_c, in_c, k, k), got {w}")
        if w[2] % 2 != 1:
            raise ShapeError(f"conv kernel size must be odd, got {w[2]}")
        if self.bias.shape != (w[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match out_c={w[0]}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be positive, padding non-negative")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_output_size(h, self.kernel, self.stride, self.dilation, self.padding),
            conv_output_size(w, self.kernel, self.stride, self.dilation, self.padding),
        )

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


def conv_output_size(size: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Dilated, strided cross-correlation with zero padding."""
    _check_rank4(x, "conv2d input")
    n, c, h, w = x.shape
    weight, bias = params.weight.data, params.bias.data
    out_c, in_c, k, _ = weight.shape
    if c != in_c:
        raise ShapeError(f"conv2d: input channel axis is {c} but weight in_c axis is {in_c}")
    s, d, p = params.stride, params.dilation, params.padding
    ho, wo = params.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output height/width axes would be {ho}x{wo} for input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    taps = []
    for i in range(k):
        for j in range(k):
            rows = slice(i * d, i * d + s * (ho - 1) + 1, s)
            cs = slice(j * d, j * d + s * (wo - 1) + 1, s)
            cols[:, :, i, j] = xp[:, :, rows, cs]
            taps.append((i, j, rows, cs))
    out = np.tensordot(weight, cols, axes=([1, 2, 3], [1, 2, 3]))  # (out_c, n, ho, wo)
    out = out.transpose(1, 0, 2, 3) + bias[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(weight, g, axes=([0], [1]))  # (c, k, k, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i, j, rows, cs in taps:
                gxp[:, :, rows, cs] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw.astype(weight.dtype, copy=False), gb.astype(bias.dtype, copy=False)

    return _result(out, (x, params.weight, params.bias), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward)


@lru_cache(maxsize=256)
def _window_matrix(size: int, kernel: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    starts = range(0, size, stride)
    m = np.zeros((len(starts), size), dtype=WIDE)
    for o, a in enumerate(starts):
        m[o, a:min(a + kernel, size)] = 1.0
    counts = m.sum(axis=1)
    m.setflags(write=False)
    counts.setflags(write=False)
    return m, counts


def pool_matrix(size: int, kernel: int, stride: int) -> np.ndarray:
    """1-D clipped averaging operator, shape (ceil(size/stride), size)."""
    m, counts = window_matrix(size, kernel, stride)
    return m / counts[:, None]


def window_matrix(size: int, kernel: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """0/1 window membership matrix and the number of valid elements per window."""
    if kernel < 1 or stride < 1:
        raise ValueError(f"kernel and stride must be positive, got kernel={kernel}, stride={stride}")
    return _window_matrix(size, kernel, stride)


def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    """Apply ``mh @ X @ mw.T`` to every (n, c) plane."""
    mh = mh.astype(x.dtype, copy=False)
    mw = mw.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _result(out, (x,), backward)


def avg_pool_clipped(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Average pooling whose windows are clipped at the far edges.

    Windows start at multiples of ``stride``; each output averages only the
    in-bounds elements of its window, so the output is
    ceil(h/stride) x ceil(w/stride) and constant fields stay constant.
    """
    _check_rank4(x, "avg_pool_clipped input")
    _, _, h, w = x.shape
    mh, ch = window_matrix(h, kernel, stride)
    mw, cw = window_matrix(w, kernel, stride)
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    counts = np.outer(ch, cw).astype(x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T) / counts

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g / counts), mw),)

    return _result(out, (x,), backward)


@lru_cache(maxsize=256)
def _bilinear_matrix(size_in: int, size_out: int) -> np.ndarray:
    m = np.zeros((size_out, size_in), dtype=WIDE)
    scale = size_in / size_out
    for o in range(size_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), size_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, size_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m.setflags(write=False)
    return m


def bilinear_matrix(size_in: int, size_out: int) -> np.ndarray:
    """1-D half-pixel-centre interpolation operator, shape (size_out, size_in)."""
    if size_in < 1 or size_out < 1:
        raise ValueError(f"sizes must be positive, got {size_in} -> {size_out}")
    return _bilinear_matrix(size_in, size_out)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the two trailing axes with half-pixel-centre bilinear sampling.

    Source coordinate ``(dst + 0.5) * in / out - 0.5`` is clamped to
    ``[0, in - 1]``. Same-size resizing is the exact identity.
    """
    _check_rank4(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _result(x.data.copy(), (x,), lambda g: (g,))
    return _separable(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    for t in inputs:
        _check_rank4(t, "concat_channels input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(
                f"concat_channels: batch/height/width axes {t.shape[0], t.shape[2], t.shape[3]} "
                f"differ from {ref[0], ref[2], ref[3]}"
            )
    offsets = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def backward(g):
        return tuple(g[:, a:b] for a, b in zip(offsets[:-1], offsets[1:]))

    return _result(out, tuple(inputs), backward)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of concatenation for plain arrays given per-part channel counts."""
    offsets = np.cumsum([0, *sizes])
    return [x[:, a:b] for a, b in zip(offsets[:-1], offsets[1:])]


def add(*terms: Tensor) -> Tensor:
    out = terms[0].data
    for t in terms[1:]:
        out = out + t.data

    def backward(g):
        return tuple(g for _ in terms)

    return _result(np.asarray(out), terms, backward)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def weighted_sum(maps: Sequence[Tensor], logits: Tensor) -> Tensor:
    """``sum_i softmax(logits)_i * maps[i]`` for equally shaped maps."""
    if not maps:
        raise ValueError("weighted_sum needs at least one map")
    if logits.shape != (len(maps),):
        raise ShapeError(f"logits shape {logits.shape} does not match {len(maps)} maps")
    ref = maps[0].shape
    for m in maps[1:]:
        if m.shape != ref:
            raise ShapeError(f"weighted_sum: map shape {m.shape} differs from {ref}")
    lam = softmax(logits.data)
    dtype = maps[0].dtype
    out = lam[0].astype(dtype) * maps[0].data
    for li, m in zip(lam[1:], maps[1:]):
        out = out + li.astype(dtype) * m.data

    def backward(g):
        gmaps = [li.astype(dtype) * g for li in lam]
        glam = np.array([np.sum(g * m.data, dtype=WIDE) for m in maps])
        glog = lam * (glam - np.dot(lam, glam))
        return (*gmaps, glog.astype(logits.dtype))

    return _result(out, (*maps, logits), backward)


def softmax_cross_entropy(logits: Tensor, target: np.ndarray, ignore_label: int | None = None) -> Tensor:
    """Mean per-pixel cross-entropy over all non-ignored pixels of the batch.

    ``target`` has shape (n, h, w). Returns a scalar tensor; zero (with a
    zero gradient) when every pixel is ignored.
    """
    _check_rank4(logits, "softmax_cross_entropy logits")
    n, c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits batch/spatial axes {(n, h, w)}")
    valid = np.ones(target.shape, dtype=bool) if ignore_label is None else target != ignore_label
    bad = valid & ((target < 0) | (target >= c))
    if bad.any():
        loc = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(f"target class {int(target[loc])} at (n, y, x)={loc} outside [0, {c})")
    count = int(valid.sum())
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    tgt = np.where(valid, target, 0).astype(np.intp)
    picked = np.take_along_axis(shifted, tgt[:, None], axis=1)[:, 0]
    nll = (lse - picked)[valid]
    loss = nll.mean(dtype=WIDE) if count else 0.0

    def backward(g):
        if count == 0:
            return (np.zeros_like(z),)
        prob = np.exp(shifted - lse[:, None])
        np.put_along_axis(prob, tgt[:, None], np.take_along_axis(prob, tgt[:, None], axis=1) - 1, axis=1)
        prob *= valid[:, None]
        return ((prob * (g / count)).astype(z.dtype, copy=False),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), backward)


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<44s} max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e}, {self.n_checked} entries)"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    seed: int = 0,
    name: str = "op",
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central finite differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. Every entry of every input with
    ``requires_grad`` is perturbed; inputs must be float64. The relative
    error of one entry is ``|a - f| / max(|a|, |f|, floor)``.
    """
    for t in inputs:
        if t.requires_grad and t.dtype != WIDE:
            raise TypeError("grad_check needs float64 inputs")
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    proj = None if probe.data.size == 1 else rng.standard_normal(probe.shape)

    def scalar() -> float:
        out = fn(*inputs).data
        return float(out) if proj is None else float(np.sum(out * proj))

    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    out.backward(None if proj is None else proj)

    worst = 0.0
    n_checked = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = scalar()
            flat[idx] = orig - step
            fm = scalar()
            flat[idx] = orig
            numeric = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            n_checked += 1
    for t in inputs:
        t.zero_grad()
    return GradCheckReport(name, worst, tolerance, n_checked)
