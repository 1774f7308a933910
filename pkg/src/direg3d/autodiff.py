"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tape-style dynamic graph: every operation creates a new Tensor that records
its inputs and a backward rule. Node ids increase with creation order, so
ascending id order is a topological order of any graph and the backward
sweep visits reachable nodes exactly once, in reverse.

Double precision is the reference mode (all gradient acceptance is defined
there); single precision is permitted for training throughput.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DoubleBackward, NonScalarLoss, ShapeMismatch

_node_ids = itertools.count()


class Tensor:
    """Value node in the computation graph.

    ``grad`` matches ``value`` in shape once backward has run. Leaf tensors
    created with ``requires_grad=True`` are the trainable parameters.
    """

    __slots__ = ("value", "grad", "requires_grad", "op", "inputs", "backward_rule",
                 "node_id", "name")

    def __init__(self, value, requires_grad=False, op="leaf", inputs=(), backward_rule=None,
                 name=None):
        self.value = np.asarray(value, dtype=np.float64 if not isinstance(value, np.ndarray)
                                else value.dtype)
        if self.value.dtype not in (np.float64, np.float32):
            self.value = self.value.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.inputs = inputs
        self.backward_rule = backward_rule
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __float__(self):
        if self.value.size != 1:
            raise ShapeMismatch(f"cannot convert shape {self.shape} tensor to float")
        return float(self.value.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, id={self.node_id})"

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # convenience operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def val(x) -> np.ndarray:
    """Plain numpy value of a Tensor or array-like."""
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _make(op: str, value: np.ndarray, inputs: Sequence[Tensor],
          backward_rule: Callable | None) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    return Tensor(value, requires_grad=needs, op=op, inputs=tuple(inputs),
                  backward_rule=backward_rule if needs else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise binaries ---------------------------------------------------

def _binary(op, a, b, fwd, bwd_a, bwd_b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = fwd(a.value, b.value)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape}: {exc}") from exc

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(bwd_a(g, a.value, b.value, out), a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(bwd_b(g, a.value, b.value, out), b.shape))

    return _make(op, value, (a, b), backward)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y))


def atan2(y, x):
    return _binary("atan2", y, x, np.arctan2,
                   lambda g, yv, xv, o: g * xv / (xv * xv + yv * yv),
                   lambda g, yv, xv, o: -g * yv / (xv * xv + yv * yv))


# --- elementwise unaries ----------------------------------------------------

def _unary(op, a, fwd, bwd):
    a = as_tensor(a)
    value = fwd(a.value)

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(bwd(g, a.value, out))

    return _make(op, value, (a,), backward)


def neg(a):
    return _unary("neg", a, lambda x: -x, lambda g, x, o: -g)


def relu(a):
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, o: g * (x > 0))


def abs_(a):
    return _unary("abs", a, np.abs, lambda g, x, o: g * np.sign(x))


def square(a):
    return _unary("square", a, np.square, lambda g, x, o: g * 2.0 * x)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt, lambda g, x, o: g * 0.5 / o)


def exp(a):
    return _unary("exp", a, np.exp, lambda g, x, o: g * o)


def log(a):
    return _unary("log", a, np.log, lambda g, x, o: g / x)


def softplus(a):
    return _unary("softplus", a, lambda x: np.logaddexp(0.0, x),
                  lambda g, x, o: g / (1.0 + np.exp(-x)))


def sin(a):
    return _unary("sin", a, np.sin, lambda g, x, o: g * np.cos(x))


def cos(a):
    return _unary("cos", a, np.cos, lambda g, x, o: -g * np.sin(x))


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def acos(a):
    """Callers must keep inputs strictly inside (-1, 1); pair with clip."""
    return _unary("acos", a, np.arccos,
                  lambda g, x, o: -g / np.sqrt(1.0 - x * x))


def clip(a, lo: float, hi: float):
    """Clamp values; gradient passes only through the interior."""
    return _unary("clip", a, lambda x: np.clip(x, lo, hi),
                  lambda g, x, o: g * ((x > lo) & (x < hi)))


# --- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    old_shape = a.shape
    value = a.value.reshape(shape)

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old_shape))

    return _make("reshape", value, (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    value = np.transpose(a.value, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inverse))

    return _make("transpose", value, (a,), backward)


def slice_(a, key):
    a = as_tensor(a)
    value = a.value[key]

    def backward(g, out):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            np.add.at(full, key, g)
            a.accumulate_grad(full)

    return _make("slice", value, (a,), backward)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g, out):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make("concat", value, ts, backward)


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    value = np.stack([t.value for t in ts], axis=axis)

    def backward(g, out):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(ts, parts):
            if t.requires_grad:
                t.accumulate_grad(part)

    return _make("stack", value, ts, backward)


# --- reductions ----------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(_expand_reduced(g, a.shape, axis, keepdims))

    return _make("sum", value, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    value = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g, out):
        if a.requires_grad:
            a.accumulate_grad(_expand_reduced(g, a.shape, axis, keepdims) / count)

    return _make("mean", value, (a,), backward)


# --- matmul ----------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batch-dimension broadcasting. Operands >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def backward(g, out):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.value, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.value, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make("matmul", value, (a, b), backward)


# --- conv2d ----------------------------------------------------------------

def _same_pad(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)  # ceil
    total = max(0, (out - 1) * stride + k - size)
    return total // 2, total - total // 2


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """x (B, C, Hp, Wp) -> columns (B, C*kh*kw, Ho*Wo) plus output size."""
    b, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows.reshape(b, c * kh * kw, ho * wo).copy(), ho, wo


def conv2d(x, w, stride: int = 1):
    """Same-padded 2-D convolution: x (B, C, H, W), w (O, C, kh, kw), stride 1 or 2."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d needs 4-D input/kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if stride not in (1, 2):
        raise DataError("conv2d supports stride 1 or 2")
    b, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    ph = _same_pad(h, kh, stride)
    pw = _same_pad(wid, kw, stride)
    xp = np.pad(x.value, ((0, 0), (0, 0), ph, pw))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.value.reshape(o, c * kh * kw)
    value = (wmat @ cols).reshape(b, o, ho, wo)

    def backward(g, out):
        gmat = g.reshape(b, o, ho * wo)
        if w.requires_grad:
            gw = np.einsum("bop,bcp->oc", gmat, cols, optimize=True)
            w.accumulate_grad(gw.reshape(w.shape))
        if x.requires_grad:
            gcols = np.einsum("oc,bop->bcp", wmat, gmat, optimize=True)
            gx = np.zeros_like(xp)
            gc = gcols.reshape(b, c, kh, kw, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += gc[:, :, i, j]
            hs, ws_ = ph[0], pw[0]
            x.accumulate_grad(gx[:, :, hs:hs + h, ws_:ws_ + wid])

    return _make("conv2d", value, (x, w), backward)


# --- graph and backward ----------------------------------------------------

@dataclass
class Graph:
    """Reachable subgraph behind an output node, in topological order."""

    nodes: list = field(default_factory=list)

    @staticmethod
    def from_output(output: Tensor) -> "Graph":
        seen = set()
        reachable = []
        stack = [output]
        while stack:
            node = stack.pop()
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            reachable.append(node)
            stack.extend(node.inputs)
        reachable.sort(key=lambda n: n.node_id)
        return Graph(reachable)


def backward(loss: Tensor) -> None:
    """Populate gradients of everything the scalar loss depends on.

    A second backward through the same loss node raises DoubleBackward;
    rebuild the graph (or a fresh loss) per step.
    """
    if not isinstance(loss, Tensor):
        raise DataError("backward expects a Tensor")
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss.op == "_consumed":
        raise DoubleBackward("backward already ran for this loss node")
    graph = Graph.from_output(loss)
    loss.accumulate_grad(np.ones_like(loss.value))
    for node in reversed(graph.nodes):
        if node.backward_rule is not None and node.grad is not None:
            node.backward_rule(node.grad, node.value)
    loss.op = "_consumed"


# --- Adam optimizer ----------------------------------------------------------

@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def for_param(value: np.ndarray) -> "AdamState":
        return AdamState(np.zeros_like(value), np.zeros_like(value), 0)


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
                   hyper: AdamHyper) -> np.ndarray:
    """One bias-corrected Adam update. Pure: returns new parameter values."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape:
        raise ShapeMismatch(f"param shape {params.shape} != grad shape {grads.shape}")
    state.step += 1
    state.m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grads
    state.v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grads * grads
    mhat = state.m / (1.0 - hyper.beta1 ** state.step)
    vhat = state.v / (1.0 - hyper.beta2 ** state.step)
    return params - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)


class Adam:
    """Stateful convenience wrapper applying optimizer_step to Tensors in place."""

    def __init__(self, params: Sequence[Tensor], hyper: AdamHyper | None = None):
        self.params = list(params)
        self.hyper = hyper if hyper is not None else AdamHyper()
        self.state = {id(p): AdamState.for_param(p.value) for p in self.params}

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            p.value = optimizer_step(p.value, p.grad, self.state[id(p)], self.hyper)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# --- checkpoint file ----------------------------------------------------------

CKPT_MAGIC = b"direg3d-ckpt v1\n"

_DTYPE_CODES = {np.dtype("<f8"): b"d", np.dtype("<f4"): b"f", np.dtype("<i8"): b"q"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    meta: dict[str, str] | None = None) -> None:
    """Flat binary file of named little-endian arrays plus a text metadata block."""
    meta_text = "".join(f"{k}={v}\n" for k, v in sorted((meta or {}).items()))
    meta_bytes = meta_text.encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_CODES:
                arr = arr.astype("<f8")
                dt = np.dtype("<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(_DTYPE_CODES[dt])
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype(dt).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise DataError(f"{path}: missing checkpoint magic")
    off = len(CKPT_MAGIC)

    def take(n):
        nonlocal off
        chunk = data[off:off + n]
        if len(chunk) != n:
            raise DataError(f"{path}: truncated checkpoint")
        off += n
        return chunk

    meta_len = struct.unpack("<I", take(4))[0]
    meta: dict[str, str] = {}
    for line in take(meta_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    count = struct.unpack("<I", take(4))[0]
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2))[0]
        name = take(name_len).decode("utf-8")
        code = take(1)
        if code not in _CODE_DTYPES:
            raise DataError(f"{path}: unknown dtype code {code!r}")
        dt = _CODE_DTYPES[code]
        ndim = struct.unpack("<B", take(1))[0]
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        nbytes = int(np.prod(shape)) * dt.itemsize if shape else dt.itemsize
        arrays[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    return arrays, meta
