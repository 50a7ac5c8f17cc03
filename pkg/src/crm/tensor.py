"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure and their parents; :func:`backward` walks
the recorded nodes in reverse creation order and accumulates gradients into
leaf tensors.

Spatial layers work on ``H x W x C`` arrays and also accept a leading batch
axis (``B x H x W x C``).
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from crm import kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf.

    Nodes are visited in exact reverse creation order, so a graph is replayed
    the same way on every call. Calling twice without ``zero_grad`` adds the
    gradients twice.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


# ----------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]

    def fn(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _make(a.data.mean(axis=axis), (a,), fn)


def relu(x: Tensor) -> Tensor:
    # np.maximum keeps NaN, so a diverging network still shows up in the loss
    mask = x.data > 0
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum_squared_error(pred: Tensor, truth) -> Tensor:
    """Plain (unaveraged) sum of squared differences."""
    truth = truth.data if isinstance(truth, Tensor) else np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"sum_squared_error: {pred.shape} vs {truth.shape}")
    diff = pred.data - truth
    return _make(np.asarray(np.sum(diff * diff)), (pred,), lambda g: (2.0 * float(g) * diff,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (x,), fn)


def neg_log_pick(probs: Tensor, onehot, floor: float = 1e-12) -> Tensor:
    """``-sum(onehot * log(max(probs, floor)))`` over all entries."""
    onehot = np.asarray(onehot, dtype=np.float64)
    if probs.shape != onehot.shape:
        raise ShapeError(f"neg_log_pick: {probs.shape} vs {onehot.shape}")
    clamped = np.maximum(probs.data, floor)
    val = -np.sum(onehot * np.log(clamped))

    def fn(g):
        return (np.where(probs.data > floor, -float(g) * onehot / clamped, 0.0),)

    return _make(np.asarray(val), (probs,), fn)


# ----------------------------------------------------------------------------
# spatial layers


def _batched(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected HxWxC or BxHxWxC input, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with "same" zero padding.

    ``kernel`` is ``k x k x Cin x Cout`` with odd ``k``.
    """
    xd, squeeze = _batched(x.data, "conv2d")
    k, k2, cin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kernel.shape}")
    if xd.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {xd.shape[-1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    B, H, W, _ = xd.shape
    xd = np.ascontiguousarray(xd)
    if kernels.use_direct_conv(k, cin, cout):
        return _conv2d_direct(x, kernel, bias, xd, squeeze)
    wmat = kernel.data.reshape(k * k * cin, cout)
    cols = xd.reshape(-1, cin) if k == 1 else kernels.im2col(xd, k)
    out = (cols @ wmat + bias.data).reshape(B, H, W, cout)
    if squeeze:
        out = out[0]

    def fn(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(g2 @ wmat.T)
            if k == 1:
                gx = dcols.reshape(x.shape)
            else:
                gx = kernels.col2im(dcols, B, H, W, cin, k).reshape(x.shape)
        if kernel.requires_grad:
            c = xd.reshape(-1, cin) if k == 1 else kernels.im2col(xd, k)
            gw = (c.T @ g2).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _make(out, (x, kernel, bias), fn)


def _pad_same(a: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    return np.pad(a, ((0, 0), (p, p), (p, p), (0, 0)))


def _conv2d_direct(x: Tensor, kernel: Tensor, bias: Tensor, xd: np.ndarray, squeeze: bool) -> Tensor:
    k, _, cin, cout = kernel.shape
    w = np.ascontiguousarray(kernel.data)
    xp = _pad_same(xd, k)
    out = kernels.conv2d_padded(xp, w, np.ascontiguousarray(bias.data))
    if squeeze:
        out = out[0]

    def fn(g):
        g4 = np.ascontiguousarray(g.reshape(out.shape if not squeeze else (1,) + out.shape))
        gx = gw = gb = None
        if x.requires_grad:
            # the input gradient is a convolution with the flipped, transposed kernel
            flipped = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
            gx = kernels.conv2d_padded(_pad_same(g4, k), flipped, np.zeros(cin)).reshape(x.shape)
        if kernel.requires_grad:
            gw = kernels.conv2d_weight_grad_padded(xp, g4, k)
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 1, 2))
        return gx, gw, gb

    return _make(out, (x, kernel, bias), fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; edge windows may be partial (ceil mode).

    The first maximum in row-major window order receives the gradient.
    """
    xd, squeeze = _batched(x.data, "maxpool2")
    B, H, W, C = xd.shape
    out, idx = kernels.maxpool2_forward(np.ascontiguousarray(xd))

    def fn(g):
        g4 = np.ascontiguousarray(g.reshape(out.shape))
        return (kernels.maxpool2_backward(g4, idx, H, W).reshape(x.shape),)

    return _make(out[0] if squeeze else out, (x,), fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels: spatial shapes {a.shape[:-1]} and {b.shape[:-1]} differ")
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _make(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: ``HxWxC -> C`` (or ``BxHxWxC -> BxC``)."""
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: bad shape {x.shape}")
    H, W = x.shape[-3], x.shape[-2]
    if H * W < 1:
        raise ShapeError("global_avg_pool: empty spatial extent")
    out = x.data.sum(axis=(-3, -2)) / (H * W)

    def fn(g):
        return (np.broadcast_to(g[..., None, None, :] / (H * W), x.shape).copy(),)

    return _make(out, (x,), fn)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``n_out x n_in`` interpolation weights, half-pixel (align_corners=False)."""
    if n_in < 1 or n_out < 1:
        raise ShapeError("bilinear_matrix: sizes must be positive")
    m = np.zeros((n_out, n_in))
    s = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * s - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def resize_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    xd, squeeze = _batched(x.data, "resize_bilinear")
    h, w = xd.shape[1:3]
    Ho, Wo = out_hw
    if (h, w) == (Ho, Wo):
        return x
    ry = bilinear_matrix(h, Ho)
    rx = bilinear_matrix(w, Wo)
    out = np.einsum("Yh,bhwc,Xw->bYXc", ry, xd, rx, optimize=True)

    def fn(g):
        g4 = g.reshape(out.shape)
        return (np.einsum("Yh,bYXc,Xw->bhwc", ry, g4, rx, optimize=True).reshape(x.shape),)

    return _make(out[0] if squeeze else out, (x,), fn)


# ----------------------------------------------------------------------------
# verification


def grad_check(
    forward: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    corrupt: float = 1.0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The error of a coordinate is ``|analytic - numeric| / |numeric|``.
    ``forward`` must rebuild the graph from ``params`` each call. When
    ``max_coords`` is set, that many coordinates are sampled per parameter.
    Coordinates where ``|analytic| + |numeric| < floor`` are skipped.
    ``corrupt`` multiplies the analytic gradient (harness self-test).
    """
    return max(grad_check_report(forward, params, eps, max_coords, rng, floor, corrupt).values(), default=0.0)


def grad_check_report(forward, params, eps=1e-6, max_coords=None, rng=None, floor=1e-8, corrupt=1.0):
    """Per-parameter worst relative error; keys are parameter names or indices."""
    details = grad_check_details(forward, params, eps, max_coords, rng, floor, corrupt)
    return {name: worst for name, (worst, _) in details.items()}


def grad_check_details(forward, params, eps=1e-6, max_coords=None, rng=None, floor=1e-8, corrupt=1.0):
    """``{name: (worst relative error, coordinates compared)}``.

    Coordinates where both gradients are below ``floor`` in magnitude are
    skipped and not counted. ``corrupt`` scales the analytic gradient, which
    lets callers confirm that the checker catches a wrong backward.
    """
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    backward(forward())
    report: dict[str, tuple[float, int]] = {}
    for n, p in enumerate(params):
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)) * corrupt
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        used = 0
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = forward().item()
                flat[i] = orig - eps
                fm = forward().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = analytic.reshape(-1)[i]
                if abs(ana) + abs(num) < floor:
                    continue
                used += 1
                err = abs(ana - num) / abs(num) if num != 0 else math.inf
                worst = max(worst, err)
        report[p.name or str(n)] = (worst, used)
    return report
