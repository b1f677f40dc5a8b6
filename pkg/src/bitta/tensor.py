"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive appends one entry to the active :class:`ComputationRecord`.
``backward`` walks the record in reverse; ``ComputationRecord.replay``
re-runs it forward from new leaf values.

Only scalar-scale broadcasting is supported. Everything else must be shaped
explicitly by the caller.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ShapeError",
    "primitive_forward",
    "backward",
    "grad",
    "record",
    "current_record",
    "finite_diff_check",
    "tensor",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives non-conforming shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {shown}")


class Tensor:
    """A float64 array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Computation record


@dataclass
class RecordEntry:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict
    saved: Any
    needs: tuple[bool, ...] = ()


@dataclass
class ComputationRecord:
    """Ordered primitive applications, topologically sorted by construction."""

    entries: list[RecordEntry] = field(default_factory=list)
    values: dict[int, np.ndarray] = field(default_factory=dict)

    def append(self, entry: RecordEntry, inputs: Sequence[Tensor], out: Tensor):
        for t in inputs:
            self.values.setdefault(t.id, t.data)
        self.values[out.id] = out.data
        self.entries.append(entry)

    def leaf_ids(self) -> list[int]:
        produced = {e.output for e in self.entries}
        seen: list[int] = []
        for e in self.entries:
            for i in e.inputs:
                if i not in produced and i not in seen:
                    seen.append(i)
        return seen

    def replay(self, leaves: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Recompute every recorded value from leaf values.

        Leaves not given in ``leaves`` keep their recorded values.
        """
        vals = {i: self.values[i] for i in self.leaf_ids()}
        if leaves:
            vals.update({k: np.asarray(v, dtype=np.float64) for k, v in leaves.items()})
        for e in self.entries:
            out, _ = _OPS[e.op].forward([vals[i] for i in e.inputs], e.attrs)
            vals[e.output] = out
        return vals


_local = threading.local()


def current_record() -> ComputationRecord:
    stack = getattr(_local, "stack", None)
    if not stack:
        _local.stack = [ComputationRecord()]
    return _local.stack[-1]


@contextmanager
def record():
    """Open a fresh record for the duration of the block."""
    rec = ComputationRecord()
    if not getattr(_local, "stack", None):
        _local.stack = []
    _local.stack.append(rec)
    try:
        yield rec
    finally:
        _local.stack.pop()


# ---------------------------------------------------------------------------
# Primitive table


@dataclass(frozen=True)
class _Op:
    forward: Callable
    backward: Callable


_OPS: dict[str, _Op] = {}


def _register(name):
    def deco(cls):
        _OPS[name] = _Op(cls.forward, cls.backward)
        return cls

    return deco


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


@_register("add")
class _Add:
    @staticmethod
    def forward(x, attrs):
        a, b = x
        _same_shape("add", a, b)
        return a + b, None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [g, g]


@_register("subtract")
class _Sub:
    @staticmethod
    def forward(x, attrs):
        a, b = x
        _same_shape("subtract", a, b)
        return a - b, None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [g, -g]


@_register("multiply")
class _Mul:
    @staticmethod
    def forward(x, attrs):
        a, b = x
        _same_shape("multiply", a, b)
        return a * b, None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        a, b = x
        return [g * b, g * a]


@_register("scale")
class _Scale:
    @staticmethod
    def forward(x, attrs):
        return x[0] * attrs["factor"], None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [g * attrs["factor"]]


@_register("matmul")
class _Matmul:
    @staticmethod
    def forward(x, attrs):
        a, b = x
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return a @ b, None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        a, b = x
        return [g @ b.T, a.T @ g]


def _im2col(xp, kh, kw, stride):
    # xp: (H, W, C) padded; returns (Ho, Wo, kh, kw, C)
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    return win.transpose(0, 1, 3, 4, 2)


@_register("conv2d")
class _Conv2d:
    """Channels-last convolution: x (H, W, Cin), k (kh, kw, Cin, Cout), b (Cout,)."""

    @staticmethod
    def forward(x, attrs):
        inp, k = x[0], x[1]
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        if inp.ndim != 3 or k.ndim != 4 or inp.shape[2] != k.shape[2]:
            raise ShapeError("conv2d", inp.shape, k.shape)
        if len(x) == 3 and x[2].shape != (k.shape[3],):
            raise ShapeError("conv2d", k.shape, x[2].shape)
        kh, kw, cin, cout = k.shape
        xp = np.pad(inp, ((pad, pad), (pad, pad), (0, 0))) if pad else inp
        if xp.shape[0] < kh or xp.shape[1] < kw:
            raise ShapeError("conv2d", inp.shape, k.shape)
        cols = _im2col(xp, kh, kw, stride)
        ho, wo = cols.shape[:2]
        cols = cols.reshape(ho * wo, kh * kw * cin)
        out = cols @ k.reshape(kh * kw * cin, cout)
        if len(x) == 3:
            out = out + x[2]
        return out.reshape(ho, wo, cout), (cols, xp.shape)

    @staticmethod
    def backward(g, x, out, saved, attrs):
        k = x[1]
        cols, padded_shape = saved
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        kh, kw, cin, cout = k.shape
        ho, wo = g.shape[:2]
        g2 = g.reshape(ho * wo, cout)
        gk = (cols.T @ g2).reshape(k.shape)
        if not attrs.get("needs", (True,))[0]:
            grads = [None, gk]
            if len(x) == 3:
                grads.append(g2.sum(axis=0))
            return grads
        gcols = (g2 @ k.reshape(kh * kw * cin, cout).T).reshape(ho, wo, kh, kw, cin)
        gxp = np.zeros(padded_shape)
        for i in range(kh):
            for j in range(kw):
                gxp[i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[pad : padded_shape[0] - pad, pad : padded_shape[1] - pad] if pad else gxp
        grads = [gx, gk]
        if len(x) == 3:
            grads.append(g2.sum(axis=0))
        return grads


@_register("relu")
class _Relu:
    @staticmethod
    def forward(x, attrs):
        return np.maximum(x[0], 0.0), None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [g * (x[0] > 0)]


@_register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(x, attrs):
        return 0.5 * (1.0 + np.tanh(0.5 * x[0])), None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [g * out * (1.0 - out)]


@_register("abs")
class _Abs:
    @staticmethod
    def forward(x, attrs):
        return np.abs(x[0]), None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [g * np.sign(x[0])]


@_register("hinge")
class _Hinge:
    """max(0, x - c); subgradient 0 at the kink."""

    @staticmethod
    def forward(x, attrs):
        return np.maximum(x[0] - attrs["c"], 0.0), None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [g * (x[0] > attrs["c"])]


@_register("sum")
class _Sum:
    @staticmethod
    def forward(x, attrs):
        return np.asarray(x[0].sum()), None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [np.full(x[0].shape, float(g))]


@_register("mean")
class _Mean:
    @staticmethod
    def forward(x, attrs):
        return np.asarray(x[0].mean()), None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [np.full(x[0].shape, float(g) / x[0].size)]


@_register("slice")
class _Slice:
    @staticmethod
    def forward(x, attrs):
        return x[0][attrs["index"]].copy(), None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        gx = np.zeros(x[0].shape)
        gx[attrs["index"]] += g
        return [gx]


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(x, attrs):
        shape = tuple(attrs["shape"])
        if int(np.prod(shape)) != x[0].size:
            raise ShapeError("reshape", x[0].shape, shape)
        return x[0].reshape(shape).copy(), None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        return [g.reshape(x[0].shape)]


@_register("concatenate")
class _Concat:
    @staticmethod
    def forward(x, attrs):
        axis = attrs.get("axis", 0)
        ref = list(x[0].shape)
        for a in x[1:]:
            other = list(a.shape)
            if len(other) != len(ref) or any(
                p != q for d, (p, q) in enumerate(zip(ref, other)) if d != axis % len(ref)
            ):
                raise ShapeError("concatenate", x[0].shape, a.shape)
        return np.concatenate(x, axis=axis), None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        axis = attrs.get("axis", 0)
        cuts = np.cumsum([a.shape[axis] for a in x])[:-1]
        return list(np.split(g, cuts, axis=axis))


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation matrix with endpoints aligned."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


@_register("interp1d")
class _Interp1d:
    """Linear interpolation along axis 0 to ``length`` samples."""

    @staticmethod
    def forward(x, attrs):
        m = interp_matrix(x[0].shape[0], attrs["length"])
        flat = x[0].reshape(x[0].shape[0], -1)
        return (m @ flat).reshape((attrs["length"],) + x[0].shape[1:]), m

    @staticmethod
    def backward(g, x, out, m, attrs):
        return [(m.T @ g.reshape(g.shape[0], -1)).reshape(x[0].shape)]


@_register("avgpool")
class _AvgPool:
    """Non-overlapping mean pooling over the first two axes of (H, W, C)."""

    @staticmethod
    def forward(x, attrs):
        ph, pw = attrs["factors"]
        h, w, c = x[0].shape
        if h % ph or w % pw:
            raise ShapeError("avgpool", x[0].shape, (ph, pw))
        out = x[0].reshape(h // ph, ph, w // pw, pw, c).mean(axis=(1, 3))
        return out, None

    @staticmethod
    def backward(g, x, out, saved, attrs):
        ph, pw = attrs["factors"]
        gx = np.repeat(np.repeat(g, ph, axis=0), pw, axis=1) / (ph * pw)
        return [gx]


@_register("instnorm")
class _InstNorm:
    """Per-channel standardisation over all leading axes of (..., C)."""

    @staticmethod
    def forward(x, attrs):
        a = x[0]
        axes = tuple(range(a.ndim - 1))
        mu = a.mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(a.var(axis=axes, keepdims=True) + attrs.get("eps", 1e-5))
        xhat = (a - mu) * inv
        return xhat, inv

    @staticmethod
    def backward(g, x, out, inv, attrs):
        axes = tuple(range(g.ndim - 1))
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * out).mean(axis=axes, keepdims=True)
        return [inv * (g - gm - out * gx)]


OP_KINDS = tuple(_OPS)


def primitive_forward(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply one primitive and append it to the active record."""
    if kind not in _OPS:
        raise KeyError(f"unknown primitive {kind!r}")
    attrs = dict(attrs or {})
    data, saved = _OPS[kind].forward([t.data for t in inputs], attrs)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    current_record().append(
        RecordEntry(kind, tuple(t.id for t in inputs), out.id, attrs, saved,
                    tuple(t.requires_grad for t in inputs)),
        inputs,
        out,
    )
    return out


def add(a, b):
    return primitive_forward("add", [a, b])


def subtract(a, b):
    return primitive_forward("subtract", [a, b])


def multiply(a, b):
    return primitive_forward("multiply", [a, b])


def scale(a, factor: float):
    return primitive_forward("scale", [a], {"factor": float(factor)})


def matmul(a, b):
    return primitive_forward("matmul", [a, b])


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0):
    ins = [x, kernel] if bias is None else [x, kernel, bias]
    return primitive_forward("conv2d", ins, {"stride": stride, "pad": pad})


def relu(x):
    return primitive_forward("relu", [x])


def sigmoid(x):
    return primitive_forward("sigmoid", [x])


def abs_(x):
    return primitive_forward("abs", [x])


def hinge(x, c: float):
    return primitive_forward("hinge", [x], {"c": float(c)})


def sum_(x):
    return primitive_forward("sum", [x])


def mean(x):
    return primitive_forward("mean", [x])


def slice_(x, index):
    return primitive_forward("slice", [x], {"index": index})


def reshape(x, shape):
    return primitive_forward("reshape", [x], {"shape": tuple(shape)})


def concatenate(xs, axis: int = 0):
    return primitive_forward("concatenate", list(xs), {"axis": axis})


def instnorm(x, eps: float = 1e-5):
    return primitive_forward("instnorm", [x], {"eps": float(eps)})


def interp1d(x, length: int):
    return primitive_forward("interp1d", [x], {"length": int(length)})


def avgpool(x, factors):
    return primitive_forward("avgpool", [x], {"factors": tuple(factors)})


# ---------------------------------------------------------------------------
# Reverse pass


def backward(loss: Tensor, rec: ComputationRecord | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``rec``; returns node id -> gradient."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    rec = rec if rec is not None else current_record()
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for e in reversed(rec.entries):
        g = grads.pop(e.output, None) if e.output != loss.id else grads.get(e.output)
        if g is None or not any(e.needs):
            continue
        xs = [rec.values[i] for i in e.inputs]
        attrs = dict(e.attrs, needs=e.needs)
        for i, need, gi in zip(e.inputs, e.needs, _OPS[e.op].backward(g, xs, rec.values[e.output], e.saved, attrs)):
            if not need:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = np.asarray(gi, dtype=np.float64)
    return grads


def grad(loss: Tensor, params: Sequence[Tensor], rec: ComputationRecord | None = None) -> list[np.ndarray]:
    """Gradients of ``loss`` for each of ``params``; zeros where unreachable.

    Also stores each result in ``param.grad``.
    """
    gmap = backward(loss, rec)
    out = []
    for p in params:
        g = gmap.get(p.id)
        g = np.zeros(p.shape) if g is None else g.reshape(p.shape)
        p.grad = g
        out.append(g)
    return out


def finite_diff_check(
    loss_fn: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    indices: Sequence[tuple[int, int]] | None = None,
    directions: Sequence[Sequence[np.ndarray]] = (),
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (loss, grads)``. By default every coordinate is
    probed; ``indices`` restricts to (param, flat index) pairs. Each entry of
    ``directions`` adds one directional-derivative probe.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    _, analytic = loss_fn(base)
    if indices is None:
        indices = [(k, j) for k, p in enumerate(base) for j in range(p.size)]

    def shifted(delta):
        up = [p + epsilon * d for p, d in zip(base, delta)]
        dn = [p - epsilon * d for p, d in zip(base, delta)]
        return (loss_fn(up)[0] - loss_fn(dn)[0]) / (2 * epsilon)

    worst = 0.0
    for k, j in indices:
        delta = [np.zeros_like(p) for p in base]
        delta[k].reshape(-1)[j] = 1.0
        numeric = shifted(delta)
        a = float(np.asarray(analytic[k]).reshape(-1)[j])
        worst = max(worst, abs(a - numeric) / max(1e-12, abs(numeric)))
    for d in directions:
        numeric = shifted(d)
        a = float(sum(np.vdot(g, di) for g, di in zip(analytic, d)))
        worst = max(worst, abs(a - numeric) / max(1e-12, abs(numeric)))
    return worst
