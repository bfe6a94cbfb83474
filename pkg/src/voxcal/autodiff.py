"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation goes through :func:`apply_primitive`, which runs
the forward kernel and, when any input requires a gradient, appends a record
to the active :class:`Tape`.  :func:`backward` walks that tape in reverse.

Arrays are float32 by default.  Primitives preserve the dtype numpy produces,
so a float64 input promotes the whole downstream computation; ``grad_check``
relies on that to run its finite differences in double precision.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

DTYPE = np.float32

_node_ids = itertools.count(1)
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when input shapes do not satisfy a primitive's shape rule."""


class Tensor:
    """A dense array that may participate in gradient recording."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or DTYPE)
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = next(_node_ids) if requires_grad else None
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = next(_node_ids) if requires_grad else None
        t.grad = None
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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE), False)


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    saved: Any


@dataclass
class Tape:
    """Ordered log of primitive applications.

    Records are appended in execution order, so inputs always precede the
    records that consume them.
    """

    records: list[Record] = field(default_factory=list)

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)


_tape_stack: list[Tape] = [Tape()]


def current_tape() -> Tape:
    return _tape_stack[-1]


@contextmanager
def no_grad():
    """Run forward passes without recording anything on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


# --------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable
    check: Callable | None = None


PRIMITIVES: dict[str, Primitive] = {}


def _primitive(name, check=None):
    def deco(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.backward, check)
        return cls

    return deco


def apply_primitive(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` and record it when needed."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    attrs = dict(attrs or {})
    tensors = tuple(as_tensor(x) for x in inputs)
    arrays = [t.data for t in tensors]
    if prim.check is not None:
        prim.check(arrays, attrs)
    out, saved = prim.forward(arrays, attrs)
    needs = _grad_enabled and any(t.requires_grad for t in tensors)
    result = Tensor._wrap(np.asarray(out), needs)
    if needs:
        attrs["_needs"] = tuple(t.requires_grad for t in tensors)
        current_tape().records.append(Record(kind, tensors, result, attrs, saved))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(arrays, attrs):
    try:
        np.broadcast_shapes(arrays[0].shape, arrays[1].shape)
    except ValueError:
        raise ShapeError(
            f"cannot broadcast shapes {arrays[0].shape} and {arrays[1].shape}"
        ) from None


@_primitive("add", _check_broadcast)
class _Add:
    def forward(a, attrs):
        return a[0] + a[1], None

    def backward(g, a, out, saved, attrs):
        return _unbroadcast(g, a[0].shape), _unbroadcast(g, a[1].shape)


@_primitive("sub", _check_broadcast)
class _Sub:
    def forward(a, attrs):
        return a[0] - a[1], None

    def backward(g, a, out, saved, attrs):
        return _unbroadcast(g, a[0].shape), _unbroadcast(-g, a[1].shape)


@_primitive("mul", _check_broadcast)
class _Mul:
    def forward(a, attrs):
        return a[0] * a[1], None

    def backward(g, a, out, saved, attrs):
        return _unbroadcast(g * a[1], a[0].shape), _unbroadcast(g * a[0], a[1].shape)


def _check_matmul(arrays, attrs):
    x, y = arrays
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {x.shape} @ {y.shape}")


@_primitive("matmul", _check_matmul)
class _Matmul:
    def forward(a, attrs):
        return np.matmul(a[0], a[1]), None

    def backward(g, a, out, saved, attrs):
        x, y = a
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)


def _check_reshape(arrays, attrs):
    shape = tuple(attrs["shape"])
    known = [n for n in shape if n != -1]
    total = int(np.prod(known)) if known else 1
    size = arrays[0].size
    if (-1 not in shape and total != size) or (-1 in shape and (total == 0 or size % total)):
        raise ShapeError(f"cannot reshape {arrays[0].shape} to {shape}")


@_primitive("reshape", _check_reshape)
class _Reshape:
    def forward(a, attrs):
        return a[0].reshape(attrs["shape"]), None

    def backward(g, a, out, saved, attrs):
        return (g.reshape(a[0].shape),)


def _check_concat(arrays, attrs):
    axis = attrs.get("axis", 0)
    ref = list(arrays[0].shape)
    for arr in arrays[1:]:
        other = list(arr.shape)
        if len(other) != len(ref) or any(
            i != axis % len(ref) and p != q for i, (p, q) in enumerate(zip(ref, other))
        ):
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes {[x.shape for x in arrays]}"
            )


@_primitive("concat", _check_concat)
class _Concat:
    def forward(a, attrs):
        return np.concatenate(a, axis=attrs.get("axis", 0)), None

    def backward(g, a, out, saved, attrs):
        axis = attrs.get("axis", 0)
        cuts = np.cumsum([x.shape[axis] for x in a])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@_primitive("slice")
class _Slice:
    def forward(a, attrs):
        return a[0][attrs["index"]].copy(), None

    def backward(g, a, out, saved, attrs):
        gx = np.zeros_like(a[0])
        if attrs.get("fancy"):
            np.add.at(gx, attrs["index"], g)
        else:
            gx[attrs["index"]] += g
        return (gx,)


@_primitive("relu")
class _Relu:
    def forward(a, attrs):
        return np.maximum(a[0], 0), None

    def backward(g, a, out, saved, attrs):
        return (g * (a[0] > 0),)


@_primitive("leaky_relu")
class _LeakyRelu:
    def forward(a, attrs):
        alpha = attrs.get("alpha", 0.2)
        return np.where(a[0] > 0, a[0], a[0] * alpha), None

    def backward(g, a, out, saved, attrs):
        alpha = attrs.get("alpha", 0.2)
        return (np.where(a[0] > 0, g, g * alpha),)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@_primitive("sigmoid")
class _Sigmoid:
    def forward(a, attrs):
        return _sigmoid(a[0]), None

    def backward(g, a, out, saved, attrs):
        return (g * out * (1 - out),)


@_primitive("tanh")
class _Tanh:
    def forward(a, attrs):
        return np.tanh(a[0]), None

    def backward(g, a, out, saved, attrs):
        return (g * (1 - out * out),)


@_primitive("softplus")
class _Softplus:
    def forward(a, attrs):
        x = a[0]
        return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))), None

    def backward(g, a, out, saved, attrs):
        return (g * _sigmoid(a[0]),)


@_primitive("softmax")
class _Softmax:
    def forward(a, attrs):
        axis = attrs.get("axis", -1)
        e = np.exp(a[0] - a[0].max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True), None

    def backward(g, a, out, saved, attrs):
        axis = attrs.get("axis", -1)
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
    return np.broadcast_to(g, shape)


def _reduced_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[ax] for ax in axes]))


@_primitive("sum")
class _Sum:
    def forward(a, attrs):
        return a[0].sum(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    def backward(g, a, out, saved, attrs):
        axis, keep = attrs.get("axis"), attrs.get("keepdims", False)
        return (_expand_reduced(g, a[0].shape, axis, keep).copy(),)


@_primitive("mean")
class _Mean:
    def forward(a, attrs):
        return a[0].mean(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    def backward(g, a, out, saved, attrs):
        axis, keep = attrs.get("axis"), attrs.get("keepdims", False)
        n = _reduced_count(a[0].shape, axis)
        return (_expand_reduced(g, a[0].shape, axis, keep) / n,)


# --------------------------------------------------------------------------
# convolutions (N, C, *spatial) layout, generic over 2 or 3 spatial dims.
# Column buffers use the layout (*k, C, N, *out) so that each kernel offset
# is one contiguous block and every contraction is a single matmul.


def _offset_slices(kidx, osp, stride):
    return tuple(slice(k, k + stride * (o - 1) + 1, stride) for k, o in zip(kidx, osp))


def _im2col(xp: np.ndarray, ksize, stride: int, osp) -> np.ndarray:
    """Gather every kernel window of a padded input into (*k, C, N, *out)."""
    n, c = xp.shape[:2]
    cols = np.empty(tuple(ksize) + (c, n) + tuple(osp), dtype=xp.dtype)
    xt = xp.swapaxes(0, 1)
    for kidx in itertools.product(*(range(k) for k in ksize)):
        cols[kidx] = xt[(slice(None), slice(None)) + _offset_slices(kidx, osp, stride)]
    return cols


def _scatter_windows(cols: np.ndarray, full_shape, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: sum (*k, C, N, *out) columns into (N, C, *full).

    Kernel offsets sharing a residue modulo ``stride`` land on the same
    sub-lattice, so they are accumulated densely first and written once.
    """
    nd = len(full_shape) - 2
    ksize = cols.shape[:nd]
    osp = cols.shape[nd + 2 :]
    n, c = full_shape[:2]
    full = np.zeros((c, n) + tuple(full_shape[2:]), dtype=cols.dtype)
    lead = (slice(None), slice(None))
    for res in itertools.product(*(range(min(stride, k)) for k in ksize)):
        qs = [range((k - r + stride - 1) // stride) for k, r in zip(ksize, res)]
        sub_sp = tuple(o + len(q) - 1 for o, q in zip(osp, qs))
        sub = np.zeros((c, n) + sub_sp, dtype=cols.dtype)
        for q in itertools.product(*qs):
            k = tuple(r + stride * j for r, j in zip(res, q))
            sub[lead + tuple(slice(j, j + o) for j, o in zip(q, osp))] += cols[k]
        full[lead + tuple(slice(r, r + stride * (m - 1) + 1, stride) for r, m in zip(res, sub_sp))] += sub
    return np.ascontiguousarray(full.swapaxes(0, 1))


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    nd = x.ndim - 2
    return np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nd)


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    nd = x.ndim - 2
    return x[(slice(None), slice(None)) + (slice(pad, -pad),) * nd]


def _to_channels_first(y2: np.ndarray, c: int, n: int, sp) -> np.ndarray:
    """(C, N * prod(sp)) matmul result -> contiguous (N, C, *sp)."""
    return np.ascontiguousarray(y2.reshape((c, n) + tuple(sp)).swapaxes(0, 1))


def _flat_channels(x: np.ndarray) -> np.ndarray:
    """(N, C, *sp) -> (C, N * prod(sp))."""
    return x.swapaxes(0, 1).reshape(x.shape[1], -1)


def _conv_check(nd):
    def check(arrays, attrs):
        x, w = arrays
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        if x.ndim != nd + 2 or w.ndim != nd + 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv{nd}d: input {x.shape} incompatible with weight {w.shape}")
        for s, k in zip(x.shape[2:], w.shape[2:]):
            if s + 2 * pad < k:
                raise ShapeError(f"conv{nd}d: kernel {w.shape[2:]} larger than padded input {x.shape}")
        if stride < 1 or pad < 0:
            raise ShapeError(f"conv{nd}d: bad stride/pad {stride}/{pad}")

    return check


class _ConvNd:
    def forward(a, attrs):
        x, w = a
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        xp = _pad(x, pad)
        ksize = w.shape[2:]
        osp = tuple((s - k) // stride + 1 for s, k in zip(xp.shape[2:], ksize))
        cols = _im2col(xp, ksize, stride, osp)
        kc = cols.shape[0 : len(ksize) + 1]
        cout, kp = w.shape[0], int(np.prod(ksize))
        w2 = w.reshape(cout, w.shape[1], kp).transpose(0, 2, 1).reshape(cout, -1)
        out = w2 @ cols.reshape(int(np.prod(kc)), -1)
        return _to_channels_first(out, cout, x.shape[0], osp), cols

    def backward(g, a, out, saved, attrs):
        x, w = a
        need_x, need_w = attrs.get("_needs", (True, True))
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        cols = saved
        ksize = w.shape[2:]
        cout, cin, kp = w.shape[0], w.shape[1], int(np.prod(ksize))
        g2 = _flat_channels(g)
        gx = gw = None
        if need_w:
            gw2 = g2 @ cols.reshape(kp * cin, -1).T  # (Cout, K*C)
            gw = np.moveaxis(gw2.reshape((cout,) + tuple(ksize) + (cin,)), -1, 1)
        if need_x:
            w2 = w.reshape(cout, cin, kp).transpose(0, 2, 1).reshape(cout, -1)
            gcols = (w2.T @ g2).reshape(cols.shape)
            full = tuple(s + 2 * pad for s in x.shape[2:])
            gx = _unpad(_scatter_windows(gcols, x.shape[:2] + full, stride), pad)
        return gx, gw


PRIMITIVES["conv2d"] = Primitive(_ConvNd.forward, _ConvNd.backward, _conv_check(2))
PRIMITIVES["conv3d"] = Primitive(_ConvNd.forward, _ConvNd.backward, _conv_check(3))


def _check_conv_transpose3d(arrays, attrs):
    x, w = arrays
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d: input {x.shape} incompatible with weight {w.shape}")
    stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
    for s, k in zip(x.shape[2:], w.shape[2:]):
        if (s - 1) * stride + k - 2 * pad < 1:
            raise ShapeError(f"conv_transpose3d: empty output for input {x.shape}, weight {w.shape}")


@_primitive("conv_transpose3d", _check_conv_transpose3d)
class _ConvTranspose:
    def forward(a, attrs):
        x, w = a
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        cin, cout = w.shape[:2]
        ksize = w.shape[2:]
        kp = int(np.prod(ksize))
        w2 = w.reshape(cin, cout, kp).transpose(2, 1, 0).reshape(kp * cout, cin)
        cols = (w2 @ _flat_channels(x)).reshape(tuple(ksize) + (cout, x.shape[0]) + x.shape[2:])
        full_sp = tuple((s - 1) * stride + k for s, k in zip(x.shape[2:], ksize))
        full = _scatter_windows(cols, (x.shape[0], cout) + full_sp, stride)
        return np.ascontiguousarray(_unpad(full, pad)), None

    def backward(g, a, out, saved, attrs):
        x, w = a
        need_x, need_w = attrs.get("_needs", (True, True))
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        cin, cout = w.shape[:2]
        ksize = w.shape[2:]
        kp = int(np.prod(ksize))
        gcols = _im2col(_pad(g, pad), ksize, stride, x.shape[2:]).reshape(kp * cout, -1)
        gx = gw = None
        if need_x:
            w2 = w.reshape(cin, cout, kp).transpose(2, 1, 0).reshape(kp * cout, cin)
            gx = _to_channels_first(w2.T @ gcols, cin, x.shape[0], x.shape[2:])
        if need_w:
            gw2 = _flat_channels(x) @ gcols.T  # (Cin, K*Cout)
            gw = np.moveaxis(gw2.reshape((cin,) + tuple(ksize) + (cout,)), -1, 1)
        return gx, gw


@_primitive("instance_norm")
class _InstanceNorm:
    def forward(a, attrs):
        x = a[0]
        axes = tuple(range(2, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + attrs.get("eps", 1e-5))
        xhat = (x - mu) * inv
        return xhat, (xhat, inv)

    def backward(g, a, out, saved, attrs):
        xhat, inv = saved
        axes = tuple(range(2, g.ndim))
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)


@_primitive("dropout")
class _Dropout:
    def forward(a, attrs):
        rate = attrs.get("rate", 0.5)
        if rate <= 0:
            return a[0], np.ones_like(a[0])
        rng = np.random.default_rng(attrs.get("seed"))
        keep = (rng.random(a[0].shape) >= rate).astype(a[0].dtype) / (1.0 - rate)
        return a[0] * keep, keep

    def backward(g, a, out, saved, attrs):
        return (g * saved,)


def _check_pair(arrays, attrs):
    if arrays[0].shape != arrays[1].shape:
        raise ShapeError(f"loss inputs differ in shape: {arrays[0].shape} vs {arrays[1].shape}")


@_primitive("l1_loss", _check_pair)
class _L1:
    def forward(a, attrs):
        return np.abs(a[0] - a[1]).mean(), None

    def backward(g, a, out, saved, attrs):
        s = np.sign(a[0] - a[1]) * (g / a[0].size)
        return s, -s


@_primitive("mse_loss", _check_pair)
class _MSE:
    def forward(a, attrs):
        return ((a[0] - a[1]) ** 2).mean(), None

    def backward(g, a, out, saved, attrs):
        d = (a[0] - a[1]) * (2.0 * g / a[0].size)
        return d, -d


@_primitive("bce_with_logits", _check_pair)
class _BCE:
    def forward(a, attrs):
        x, t = a
        loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
        return loss.mean(), None

    def backward(g, a, out, saved, attrs):
        x, t = a
        n = x.size
        return (_sigmoid(x) - t) * (g / n), -x * (g / n)


def _check_ce(arrays, attrs):
    logits = arrays[0]
    labels = np.asarray(attrs["labels"])
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy: label out of range for {logits.shape[1]} classes")


@_primitive("cross_entropy", _check_ce)
class _CrossEntropy:
    def forward(a, attrs):
        x = a[0]
        labels = np.asarray(attrs["labels"])
        m = x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
        logp = x - lse
        return -logp[np.arange(x.shape[0]), labels].mean(), np.exp(logp)

    def backward(g, a, out, saved, attrs):
        labels = np.asarray(attrs["labels"])
        gx = saved.copy()
        gx[np.arange(gx.shape[0]), labels] -= 1.0
        return (gx * (g / gx.shape[0]),)


# --------------------------------------------------------------------------
# functional front-end


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def reshape(x, shape):
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


def concat(xs, axis=0):
    return apply_primitive("concat", list(xs), {"axis": axis})


def slice_(x, index):
    if not isinstance(index, tuple):
        index = (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in index)
    return apply_primitive("slice", [x], {"index": index, "fancy": fancy})


def relu(x):
    return apply_primitive("relu", [x])


def leaky_relu(x, alpha=0.2):
    return apply_primitive("leaky_relu", [x], {"alpha": alpha})


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def softplus(x):
    return apply_primitive("softplus", [x])


def softmax(x, axis=-1):
    return apply_primitive("softmax", [x], {"axis": axis})


def sum_(x, axis=None, keepdims=False):
    return apply_primitive("sum", [x], {"axis": axis, "keepdims": keepdims})


def mean(x, axis=None, keepdims=False):
    return apply_primitive("mean", [x], {"axis": axis, "keepdims": keepdims})


def conv2d(x, w, stride=1, pad=0):
    return apply_primitive("conv2d", [x, w], {"stride": stride, "pad": pad})


def conv3d(x, w, stride=1, pad=0):
    return apply_primitive("conv3d", [x, w], {"stride": stride, "pad": pad})


def conv_transpose3d(x, w, stride=1, pad=0):
    return apply_primitive("conv_transpose3d", [x, w], {"stride": stride, "pad": pad})


def instance_norm(x, eps=1e-5):
    return apply_primitive("instance_norm", [x], {"eps": eps})


def dropout(x, rate=0.5, seed=None):
    return apply_primitive("dropout", [x], {"rate": rate, "seed": seed})


def l1_loss(a, b):
    return apply_primitive("l1_loss", [a, b])


def mse_loss(a, b):
    return apply_primitive("mse_loss", [a, b])


def bce_with_logits(logits, target):
    return apply_primitive("bce_with_logits", [logits, target])


def cross_entropy(logits, labels):
    return apply_primitive("cross_entropy", [logits], {"labels": np.asarray(labels, dtype=np.int64)})


# --------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) through the tape.

    Returns a map from node id to gradient for every requires-grad ancestor of
    ``loss``; the same arrays are attached as ``.grad`` on those tensors.  The
    tape itself is left untouched.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    tape = tape or current_tape()
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output.node_id)
        if g is None:
            continue
        prim = PRIMITIVES[rec.kind]
        in_grads = prim.backward(g, [t.data for t in rec.inputs], rec.output.data, rec.saved, rec.attrs)
        for t, gi in zip(rec.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
    for rec in tape.records:
        for t in rec.inputs + (rec.output,):
            if t.requires_grad and t.node_id in grads:
                t.grad = grads[t.node_id]
    return grads


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-3,
    samples: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` may be one tensor or several; ``f`` is called with no arguments when
    a list is given (it closes over the tensors) and with ``x`` otherwise.  The
    checked tensors are promoted to float64 for the duration of the check.
    ``samples`` limits the number of coordinates probed per tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    many = not isinstance(x, Tensor)
    xs = list(x) if many else [x]
    call = f if many else (lambda: f(xs[0]))
    originals = [t.data for t in xs]
    flags = [t.requires_grad for t in xs]
    rng = np.random.default_rng(seed)
    try:
        for t in xs:
            t.data = t.data.astype(np.float64)
            if not t.requires_grad:
                t.requires_grad = True
                t.node_id = next(_node_ids)
        with Tape() as tape:
            out = call()
            if out.size != 1:
                raise ValueError("grad_check needs a scalar-valued function")
            grads = backward(out, tape)
        with no_grad():
            again = call()
        if not np.array_equal(out.data, again.data):
            raise ValueError("function is not deterministic (unseeded dropout?)")
        worst = 0.0
        with no_grad():
            for t in xs:
                analytic = grads.get(t.node_id, np.zeros_like(t.data)).reshape(-1)
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if samples is not None and samples < flat.size:
                    idx = rng.choice(flat.size, size=samples, replace=False)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = float(call().data)
                    flat[i] = orig - eps
                    lo = float(call().data)
                    flat[i] = orig
                    numeric = (hi - lo) / (2 * eps)
                    a = float(analytic[i])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                    worst = max(worst, err)
        return worst
    finally:
        for t, data, flag in zip(xs, originals, flags):
            t.data = data
            t.requires_grad = flag
            if not flag:
                t.node_id = None

