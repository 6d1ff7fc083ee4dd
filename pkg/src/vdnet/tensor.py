"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the output keeps a :class:`Node` that links it to its inputs and
holds the vector-Jacobian rule. :func:`backward` linearises the reachable
nodes into a :class:`Tape` and sweeps it once in reverse.

Image-like operations take a single sample ``[c, h, w]`` or a batch
``[b, c, h, w]``; the batch axis is carried through untouched.
"""

from __future__ import annotations

import itertools
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "GradientMap",
    "ShapeError",
    "GeometryError",
    "GraphError",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "conv2d",
    "relu",
    "maxpool2d",
    "dense",
    "softmax_cross_entropy",
    "cross_entropy_rows",
    "smooth_l1",
    "sum_all",
    "mean_all",
    "spatial_sum",
    "spatial_mean",
    "reshape",
    "transpose",
    "take_rows",
    "abs_",
    "backward",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Window/stride/padding geometry does not tile the input."""


class GraphError(RuntimeError):
    """The loss cannot be differentiated (non-scalar or detached)."""


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An immutable n-dimensional array of 64-bit floats."""

    __slots__ = ("data", "requires_grad", "node", "id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, node: Node | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad or node is not None)
        self.node = node
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, node: Node | None) -> "Tensor":
        # internal constructor: skips the defensive copy for freshly computed arrays
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = node is not None
        t.node = node
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, None)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor._wrap(out, Node(op, inputs, vjp))
    return Tensor._wrap(out, None)


# ---------------------------------------------------------------- elementwise


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; this is also the masking primitive."""
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    active = x.data > 0
    return _make("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def smooth_l1(x: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 d^2 / beta when |d| < beta, else |d| - beta/2."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != x.shape:
        raise ShapeError(f"smooth_l1: prediction {x.shape} vs target {t.shape}")
    d = x.data - t
    ad = np.abs(d)
    quad = ad < beta
    out = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    dgrad = np.where(quad, d / beta, np.sign(d))
    return _make("smooth_l1", out, (x,), lambda g: (g * dgrad,))


# ---------------------------------------------------------------- reductions


def _innermost_sum(a: np.ndarray, axes: int) -> np.ndarray:
    # fixed reduction order (innermost axis first) so nested sums agree bit for bit
    for _ in range(axes):
        a = a.sum(axis=-1)
    return np.asarray(a)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("sum_all", _innermost_sum(x.data, x.ndim), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make("mean_all", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, float(np.ravel(g)[0]) / n),))


def spatial_sum(x: Tensor) -> Tensor:
    """Sum over the last two axes: ``[..., h, w] -> [...]``."""
    if x.ndim < 3:
        raise ShapeError(f"spatial_sum expects rank >= 3, got {x.shape}")
    shape = x.shape
    return _make("spatial_sum", _innermost_sum(x.data, 2), (x,),
                 lambda g: (np.broadcast_to(g[..., None, None], shape).copy(),))


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pooling over the last two axes."""
    if x.ndim < 3:
        raise ShapeError(f"spatial_mean expects rank >= 3, got {x.shape}")
    shape = x.shape
    area = shape[-1] * shape[-2]
    return _make("spatial_mean", x.data.mean(axis=(-2, -1)), (x,),
                 lambda g: (np.broadcast_to(g[..., None, None] / area, shape).copy(),))


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather ``x[index]`` along the first axis; repeated indices accumulate."""
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make("take_rows", x.data[idx], (x,), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weights @ x + bias`` for ``x`` of shape ``[n]`` or ``[batch, n]``."""
    if weights.ndim != 2 or bias.shape != (weights.shape[0],) or x.shape[-1] != weights.shape[1] \
            or x.ndim not in (1, 2):
        raise ShapeError(
            f"dense: x {x.shape}, weights {weights.shape}, bias {bias.shape} do not agree")
    xd, wd = x.data, weights.data
    out = xd @ wd.T + bias.data

    def vjp(g):
        if xd.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make("dense", out, (x, weights, bias), vjp)


# ---------------------------------------------------------------- convolution


def _as_batch(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op} expects [c,h,w] or [b,c,h,w], got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel`` (no flip).

    Args:
        x: input ``[c_in, h, w]`` or ``[b, c_in, h, w]``.
        kernel: ``[c_out, c_in, kh, kw]``.
        bias: optional ``[c_out]``.
        stride: positive step between windows.
        padding: zero padding added on every side.

    Returns:
        ``[c_out, h', w']`` (batched input keeps its batch axis) with
        ``h' = (h + 2*padding - kh) / stride + 1``.
    """
    xb, single = _as_batch(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[1] != xb.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} vs kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise GeometryError(f"conv2d: stride={stride} padding={padding}")
    _, _, h, w = xb.shape
    c_out, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp or (hp - kh) % stride or (wp - kw) % stride:
        raise GeometryError(
            f"conv2d: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding} "
            "do not give an integral output extent")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [b, c, ho, wo, kh, kw]
    kd = kernel.data
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if single:
        out = out[0]

    def vjp(g):
        gb = g[None] if single else g
        gk = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(kd[:, :, i, j], gb, axes=([0], [1])).transpose(1, 0, 2, 3)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if single:
            gx = gx[0]
        gbias = gb.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk) if bias is None else (gx, gk, gbias)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make("conv2d", out, inputs, vjp)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Window maximum; the gradient goes to the first (lowest flat index) maximum."""
    stride = window if stride is None else stride
    xb, single = _as_batch(x, "maxpool2d")
    _, _, h, w = xb.shape
    if window < 1 or stride < 1 or window > h or window > w \
            or (h - window) % stride or (w - window) % stride:
        raise GeometryError(f"maxpool2d: input {h}x{w}, window {window}, stride {stride}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xb, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(*xb.shape[:2], ho, wo, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]
    in_shape = xb.shape

    def vjp(g):
        gb = g[None] if single else g
        gx = np.zeros(in_shape)
        for k in range(window * window):
            i, j = divmod(k, window)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == k, gb, 0.0)
        return (gx[0] if single else gx,)

    return _make("maxpool2d", out, (x,), vjp)


# ---------------------------------------------------------------- losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single ``[k]`` logit vector."""
    if logits.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy expects [k], got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= int(label) < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    label = int(label)
    logp = _log_softmax(logits.data)

    def vjp(g):
        grad = np.exp(logp)
        grad[label] -= 1.0
        return (grad * g,)

    return _make("softmax_cross_entropy", np.asarray(-logp[label]), (logits,), vjp)


def cross_entropy_rows(logits: Tensor, labels) -> Tensor:
    """Per-row softmax cross-entropy: ``[n, k]`` logits and ``n`` labels give ``[n]`` losses."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_rows: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels out of range for {k} classes")
    logp = _log_softmax(logits.data)
    rows = np.arange(labels.size)

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * g[:, None],)

    return _make("cross_entropy_rows", -logp[rows, labels], (logits,), vjp)


# ---------------------------------------------------------------- backward


@dataclass
class Tape:
    """Topologically ordered operation records reachable from one output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.id in seen:
                continue
            seen.add(t.id)
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if parent.requires_grad and parent.id not in seen:
                        stack.append((parent, False))
        return cls([t for t in order if t.node is not None])


class GradientMap(Mapping):
    """Gradients keyed by tensor; ``grads[t]`` has the shape of ``t``."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._owners: dict[int, Tensor] = {}

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        if t.id in self._grads:
            self._grads[t.id] = self._grads[t.id] + g
        else:
            self._grads[t.id] = g
            self._owners[t.id] = t

    def __getitem__(self, key) -> Tensor:
        tid = key.id if isinstance(key, Tensor) else key
        return Tensor._wrap(self._grads[tid], None)

    def __contains__(self, key) -> bool:
        tid = key.id if isinstance(key, Tensor) else key
        return tid in self._grads

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def array(self, key) -> np.ndarray:
        tid = key.id if isinstance(key, Tensor) else key
        return self._grads[tid]


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode sweep from a scalar loss.

    Returns gradients for every tensor with ``requires_grad`` that the loss
    depends on, including intermediates.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no input requires a gradient")
    grads = GradientMap()
    grads._accumulate(loss, np.ones(loss.shape))
    for t in reversed(Tape.from_output(loss).nodes):
        g = grads.array(t)
        for parent, pg in zip(t.node.inputs, t.node.vjp(g)):
            if pg is not None and parent.requires_grad:
                grads._accumulate(parent, np.asarray(pg, dtype=np.float64).reshape(parent.shape))
    return grads
