"""Dense tensors with a reverse-mode gradient tape.

Operations are recorded on the innermost active :class:`GradTape` whenever
one of their inputs requires a gradient. Outside a tape every op is a plain
forward computation, which is what evaluation code relies on::

    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with GradTape() as tape:
        y = sum_all(relu(x))
    tape.backward(y)
    x.grad  # -> ones

Only the op set needed by the encoder, projection head, classifier and the
two losses is provided. Every op preserves the float dtype of its inputs, so
the same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, NumericalError, ShapeError

NORM_EPS = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self._tape: Optional[GradTape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not produced on a gradient tape")
        self._tape.backward(self, grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, c: float) -> "Tensor":
        if isinstance(c, Tensor):
            return mul(self, c)
        return scale(self, c)

    __rmul__ = __mul__


@dataclass
class _Node:
    op: str
    inputs: tuple
    backward: BackwardFn


@dataclass
class GradTape:
    """Ordered record of ops; ``backward`` walks it once in reverse."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, op: str, out: Tensor, inputs: tuple, backward: BackwardFn) -> None:
        out.tape_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(op, inputs, backward))

    def backward(self, out: Tensor, grad=None) -> None:
        if out._tape is not self or out.tape_id is None:
            raise RuntimeError("tensor does not belong to this tape")
        if grad is None:
            if out.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(out.data)
        pending = {out.tape_id: np.asarray(grad, dtype=out.dtype)}
        for idx in range(out.tape_id, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self and t.tape_id is not None:
                    prev = pending.get(t.tape_id)
                    pending[t.tape_id] = gi if prev is None else prev + gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, data: np.ndarray, inputs: tuple, backward: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: non-finite values in output")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(op, out, inputs, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", A @ B, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=dtype),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``x`` of shape (B, in) and ``w`` of shape (in, out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match weight {w.shape}")
    X, W = x.data, w.data
    out = X @ W
    if b is not None:
        out = out + b.data

    def backward(g):
        return g @ W.T, X.T @ g, (g.sum(axis=0) if b is not None else None)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit("dense", out, inputs, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    bsz, ch, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))

    def backward(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (bsz, ch, h, w)).copy(),)

    return _emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


def _out_size(n: int, stride: int) -> int:
    return (n + 2 - 3) // stride + 1


def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    bsz, ch = xp.shape[:2]
    cols = np.empty((bsz, ho, wo, ch, 3, 3), dtype=xp.dtype)
    for ki in range(3):
        for kj in range(3):
            patch = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
            cols[..., ki, kj] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(bsz * ho * wo, ch * 9)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1.

    ``x`` is (B, C, H, W), ``kernel`` is (F, C, 3, 3), ``bias`` is (F,).
    """
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: bad shapes {x.shape} / {kernel.shape}")
    bsz, ch, h, w = x.shape
    nf = kernel.shape[0]
    if kernel.shape[1] != ch:
        raise ShapeError(f"conv2d: input has {ch} channels, kernel expects {kernel.shape[1]}")
    if h < 3 or w < 3:
        raise ShapeError(f"conv2d: spatial dims must be >= 3, got {h}x{w}")
    if bias is not None and bias.shape != (nf,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {nf} filters")

    ho, wo = _out_size(h, stride), _out_size(w, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, ho, wo)
    wmat = kernel.data.reshape(nf, ch * 9)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, nf).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, nf)
        dk = (gmat.T @ cols).reshape(kernel.shape)
        dcols = (gmat @ wmat).reshape(bsz, ho, wo, ch, 3, 3)
        dxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += (
                    dcols[..., ki, kj].transpose(0, 3, 1, 2)
                )
        db = gmat.sum(axis=0) if bias is not None else None
        return dxp[:, :, 1:-1, 1:-1], dk, db

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _emit("conv2d", out, inputs, backward)


def l2_normalize(v: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale ``v`` (or each row of a 2-d ``v``) to unit Euclidean norm."""
    norms = np.sqrt(np.sum(v.data * v.data, axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise DegenerateInputError("l2_normalize: vector norm below %g" % eps)
    y = v.data / norms

    def backward(g):
        return ((g - y * np.sum(y * g, axis=-1, keepdims=True)) / norms,)

    return _emit("l2_normalize", y, (v,), backward)


def log_sum_exp(v: Tensor) -> Tensor:
    """Max-shifted ``log(sum(exp(v)))`` over the last axis."""
    m = np.max(v.data, axis=-1, keepdims=True)
    e = np.exp(v.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    soft = e / s

    def backward(g):
        return (np.asarray(g)[..., None] * soft,)

    return _emit("log_sum_exp", out, (v,), backward)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6, floor: float = 1e-2) -> float:
    """Largest per-coordinate relative error between tape and central-difference gradients.

    The relative error of coordinate i is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``;
    ``floor`` keeps near-zero gradients from amplifying rounding noise.
    """
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with GradTape() as tape:
        out = f(probe)
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    tape.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xm = base.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(base.shape))).data)
        fm = float(f(Tensor(xm.reshape(base.shape))).data)
        flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
