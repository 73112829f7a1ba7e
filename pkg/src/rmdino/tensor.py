"""Minimal dense tensor engine with tape-based reverse-mode autodiff.

Ops executed while a :class:`Tape` is active are recorded in order; ``backward``
replays the records in reverse, which is a valid reverse topological order
because every record's inputs were produced before it. Ops executed with no
active tape (or with no grad-requiring input) are plain numpy computations,
which is how the teacher branch stays gradient-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_TAPES: list["Tape"] = []


class Tensor:
    """Row-major dense array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; nested tapes record into the innermost one.
    """

    records: list[TapeRecord] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(TapeRecord(op, inputs, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_suffix(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    """Only trailing-dimension broadcasting is supported."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"{op}: shapes {a} and {b} are not suffix-compatible")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)

    def bwd(g):
        return (g * g.dtype.type(c),)

    return _emit("scale", out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy ``@`` semantics; a 2-D right operand is treated as a shared weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*ad.shape[:-1], bd.shape[-1])

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

    else:
        out = ad @ bd

        def bwd(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", out, (a, b), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(src),)

    return _emit("reshape", out, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _emit("transpose", out, (a,), bwd)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    src_shape, dtype = a.shape, a.dtype
    out = np.ascontiguousarray(a.data[key])

    def bwd(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _emit("getitem", out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", out, tensors, bwd)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    inner = c * (x + k * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        dinner = c * (1.0 + 3.0 * k * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _emit("gelu", out, (a,), bwd)


# ---------------------------------------------------------------------------
# fused numerics


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def softmax_temp(x, tau: float = 1.0) -> Tensor:
    """Softmax of ``x / tau`` over the last axis, max-subtracted."""
    _check_tau(tau)
    x = as_tensor(x)
    z = x.data / x.dtype.type(tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / x.dtype.type(tau),)

    return _emit("softmax", p, (x,), bwd)


def log_softmax_temp(x, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    x = as_tensor(x)
    z = x.data / x.dtype.type(tau)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bwd(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=-1, keepdims=True)) / x.dtype.type(tau),)

    return _emit("log_softmax", out, (x,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last dim {d}")
    if not eps > 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx = g * gamma.data
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", out, (x, gamma, beta), bwd)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)``; the guard maps a zero vector to zero."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    guarded = n <= eps
    denom = np.where(guarded, xd.dtype.type(eps), n)
    y = xd / denom

    def bwd(g):
        proj = (y * g).sum(axis=axis, keepdims=True)
        dx = np.where(guarded, g / denom, (g - y * proj) / denom)
        return (dx,)

    return _emit("l2_normalize", y, (x,), bwd)


def scaled_dot_attention(q, k, v) -> tuple[Tensor, np.ndarray]:
    """Softmax(q kᵀ / sqrt(d)) v over the last two axes.

    Returns the output and the attention probabilities (as a plain array, for
    visualization capture).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: head_dim mismatch {q.shape} vs {k.shape}")
    if v.shape[-2] != k.shape[-2]:
        raise ValueError(f"attention: V rows {v.shape[-2]} != K rows {k.shape[-2]}")
    perm = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = scale(matmul(q, transpose(k, perm)), 1.0 / math.sqrt(q.shape[-1]))
    attn = softmax_temp(scores, 1.0)
    return matmul(attn, v), attn.data


# ---------------------------------------------------------------------------
# gradients


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring tensor."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype)
            inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        # intermediates are not needed once consumed
        rec.output.grad = None if rec.output is not loss else rec.output.grad


def numerical_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to the entries of ``t``."""
    out = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max|a - n| scaled by the tensor's largest numeric gradient magnitude."""
    denom = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def gradcheck(build: Callable[[], Tensor], leaves: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must recompute the scalar loss from the current leaf values.
    """
    leaves = list(leaves)
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        loss = build()
    backward(loss, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

    def f() -> float:
        return float(build().data)

    worst = 0.0
    for t, a in zip(leaves, analytic):
        worst = max(worst, relative_error(a, numerical_grad(f, t, h)))
    return worst
