"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records every operation applied to its tensors as an append-only list of nodes,
each holding a pullback closure over whatever the forward pass saved. `backward` walks
the list once in reverse and accumulates gradients for the named parameters.

Binary ops accept equal shapes, or shapes where one operand is a trailing suffix of the
other (leading-batch broadcasting). Anything else raises ShapeError; use broadcast_to or
reshape explicitly.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from typing import Any

import numpy as np
from pydantic import BaseModel
from scipy import fft as sp_fft
from scipy import special as sp_special

from app.config import settings
from app.signal_core import reflect_frame_indices

_log = logging.getLogger("app.autodiff")

Pullback = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ShapeError(ValueError):
    """Operands whose shapes an op cannot combine."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while the tape runs in debug mode."""


class _Node:
    __slots__ = ("kind", "inputs", "pullback")

    def __init__(self, kind: str, inputs: tuple[int | None, ...], pullback: Pullback | None):
        self.kind = kind
        self.inputs = inputs
        self.pullback = pullback


class Tensor:
    """Immutable array bound to a Tape. node_id is None for constants (no gradient)."""

    __slots__ = ("value", "tape", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, value: np.ndarray, tape: Tape, node_id: int | None = None,
                 name: str | None = None):
        value.flags.writeable = False
        self.value = value
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def __repr__(self) -> str:
        label = self.name or ("const" if self.node_id is None else f"#{self.node_id}")
        return f"Tensor({label}, shape={self.shape}, dtype={self.value.dtype})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        return take_slice(self, key)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Append-only op record plus the named trainable tensors it owns."""

    def __init__(self, dtype: Any = np.float32, debug: bool | None = None):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"tape dtype must be float32 or float64, got {self.dtype}")
        self.debug = settings.debug if debug is None else debug
        self.nodes: list[_Node] = []
        self.parameters: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, name: str, value: Any) -> Tensor:
        """Register a trainable leaf. The value is copied."""
        if name in self.parameters:
            raise ValueError(f"parameter {name!r} already on this tape")
        arr = np.array(value, dtype=self.dtype)
        self.nodes.append(_Node("param", (), None))
        t = Tensor(arr, self, len(self.nodes) - 1, name=name)
        self.parameters[name] = t
        return t

    def constant(self, value: Any) -> Tensor:
        return Tensor(np.array(value, dtype=self.dtype), self, None)

    def record(self, kind: str, value: np.ndarray, inputs: Sequence[Tensor],
               pullback: Pullback) -> Tensor:
        """Append an op node. Ops whose inputs are all constants fold to a constant."""
        value = np.asarray(value, dtype=self.dtype)
        if self.debug and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{kind} produced non-finite values (shape {value.shape})")
        ids = tuple(t.node_id for t in inputs)
        if all(i is None for i in ids):
            return Tensor(value, self, None)
        self.nodes.append(_Node(kind, ids, pullback))
        return Tensor(value, self, len(self.nodes) - 1)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every parameter on the tape (zeros when unreachable)."""
    if loss.tape is not tape:
        raise ValueError("loss does not belong to this tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    if loss.node_id is not None:
        grads[loss.node_id] = np.ones(loss.shape, dtype=tape.dtype)
        for i in range(loss.node_id, -1, -1):
            g = grads[i]
            node = tape.nodes[i]
            if g is None or node.pullback is None:
                continue
            for inp, part in zip(node.inputs, node.pullback(g)):
                if inp is None or part is None:
                    continue
                grads[inp] = part if grads[inp] is None else grads[inp] + part
            grads[i] = None
    out: dict[str, np.ndarray] = {}
    for name, t in tape.parameters.items():
        g = grads[t.node_id]
        out[name] = np.zeros(t.shape, tape.dtype) if g is None else np.array(g, dtype=tape.dtype)
    return out


# ------------------------------------------------------------------ #
# Shape helpers                                                       #
# ------------------------------------------------------------------ #

def _lift(tape: Tape, x: Any) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _pair(a: Any, b: Any) -> tuple[Tape, Tensor, Tensor]:
    tape = a.tape if isinstance(a, Tensor) else b.tape
    return tape, _lift(tape, a), _lift(tape, b)


def _binary_shape(op: str, sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    if sa == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _unary(kind: str, a: Tensor, value: np.ndarray, local: Callable[[np.ndarray], np.ndarray]
           ) -> Tensor:
    return a.tape.record(kind, value, (a,), lambda g: (local(g),))


# ------------------------------------------------------------------ #
# Elementwise                                                         #
# ------------------------------------------------------------------ #

def add(a: Any, b: Any) -> Tensor:
    tape, a, b = _pair(a, b)
    _binary_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return tape.record("add", a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Any, b: Any) -> Tensor:
    tape, a, b = _pair(a, b)
    _binary_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return tape.record("sub", a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Any, b: Any) -> Tensor:
    tape, a, b = _pair(a, b)
    _binary_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return tape.record("mul", av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a: Any, b: Any) -> Tensor:
    tape, a, b = _pair(a, b)
    _binary_shape("div", a.shape, b.shape)
    av, bv = a.value, b.value
    y = av / bv
    return tape.record(
        "div", y, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * y / bv, bv.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _unary("neg", a, -a.value, lambda g: -g)


def matmul(a: Any, b: Any) -> Tensor:
    """a [..., n, k] @ b, where b is [k, m] or shares a's leading dims."""
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ in {a.shape} and {b.shape}")
    shared = bv.ndim == 2
    if not shared and (bv.ndim != av.ndim or bv.shape[:-2] != av.shape[:-2]):
        raise ShapeError(f"matmul: batch dims differ in {a.shape} and {b.shape}")

    def pullback(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            k, m = bv.shape
            gb = av.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return tape.record("matmul", av @ bv, (a, b), pullback)


def sigmoid(a: Tensor) -> Tensor:
    y = sp_special.expit(a.value)
    return _unary("sigmoid", a, y, lambda g: g * y * (1.0 - y))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _unary("tanh", a, y, lambda g: g * (1.0 - y * y))


def relu(a: Tensor) -> Tensor:
    on = a.value > 0
    return _unary("relu", a, np.where(on, a.value, 0), lambda g: g * on)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return _unary("exp", a, y, lambda g: g * y)


def log(a: Tensor) -> Tensor:
    x = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _unary("log", a, y, lambda g: g / x)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    x = a.value
    y = x ** p
    return _unary("power", a, y, lambda g: g * p * x ** (p - 1))


def absolute(a: Tensor) -> Tensor:
    x = a.value
    return _unary("abs", a, np.abs(x), lambda g: g * np.sign(x))


# ------------------------------------------------------------------ #
# Reductions and shape ops                                            #
# ------------------------------------------------------------------ #

def _norm_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else axis
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a: Tensor, axis: int | tuple[int, ...] | None = None,
               keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return a.tape.record("sum", a.value.sum(axis=axes, keepdims=keepdims), (a,), pullback)


def reduce_mean(a: Tensor, axis: int | tuple[int, ...] | None = None,
                keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(reduce_sum(a, axes, keepdims), 1.0 / max(count, 1))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums back to a's shape."""
    shape = tuple(shape)
    src = a.shape
    try:
        y = np.broadcast_to(a.value, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from e
    return a.tape.record("broadcast_to", y, (a,), lambda g: (_sum_to_shape(g, src),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        y = a.value.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from e
    return a.tape.record("reshape", y, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat of no tensors")
    tape = tensors[0].tape
    ts = [_lift(tape, t) for t in tensors]
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        off_axis = t.shape[:ax] + t.shape[ax + 1:]
        if t.ndim != ndim or off_axis != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    y = np.concatenate([t.value for t in ts], axis=ax)
    return tape.record("concat", y, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


_BASIC_INDEX = (int, np.integer, slice, type(Ellipsis), type(None))


def take_slice(a: Tensor, key: Any) -> Tensor:
    """Basic indexing (ints, slices, Ellipsis, None)."""
    parts = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(p, _BASIC_INDEX) for p in parts):
        raise TypeError(f"take_slice supports basic indexing only, got {key!r}")
    shape, dtype = a.shape, a.value.dtype

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(shape, dtype)
        out[key] = g
        return (out,)

    return a.tape.record("slice", np.array(a.value[key]), (a,), pullback)


# ------------------------------------------------------------------ #
# Fused ops                                                           #
# ------------------------------------------------------------------ #

def normalize(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit variance along one axis."""
    x = a.value
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    y = xc * inv

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return a.tape.record("normalize", y, (a,), pullback)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift by per-feature gain and bias."""
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must match last dim of {a.shape}"
        )
    return add(mul(normalize(a, -1, eps), gain), bias)


def fft_real_mag(a: Tensor) -> Tensor:
    """|rfft| along the last axis. Bins with zero magnitude get zero gradient."""
    x = a.value
    n = x.shape[-1]
    spec = sp_fft.rfft(x, axis=-1)
    mag = np.abs(spec)

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        safe = np.where(mag > 0, mag, 1.0)
        w = np.where(mag > 0, spec / safe, 0.0) * g
        w[..., 1:(n + 1) // 2] *= 0.5
        return (n * sp_fft.irfft(w, n=n, axis=-1),)

    return a.tape.record("fft_real_mag", mag, (a,), pullback)


def frame(a: Tensor, size: int, hop: int) -> Tensor:
    """[..., L] -> [..., ceil(L/hop), size] centred frames with reflection padding."""
    shape = a.shape
    length = shape[-1]
    idx = reflect_frame_indices(length, size, hop)
    flat_idx = idx.ravel()

    def pullback(g: np.ndarray) -> tuple[np.ndarray]:
        rows = g.reshape(-1, flat_idx.size)
        out = np.stack([np.bincount(flat_idx, weights=r, minlength=length) for r in rows])
        return (out.reshape(shape),)

    return a.tape.record("frame", a.value[..., idx], (a,), pullback)


def overlap_add_array(x: np.ndarray, hop: int) -> np.ndarray:
    """[..., F, size] -> [..., (F-1)*hop + size], summing frames placed every hop samples."""
    n_frames, size = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    out = np.zeros((*lead, (n_frames - 1) * hop + size), x.dtype)
    if size % hop == 0:
        parts = x.reshape(*lead, n_frames, size // hop, hop)
        for j in range(size // hop):
            out[..., j * hop: j * hop + n_frames * hop] += parts[..., :, j, :].reshape(
                *lead, n_frames * hop
            )
    else:
        for t in range(n_frames):
            out[..., t * hop: t * hop + size] += x[..., t, :]
    return out


def overlap_indices(n_frames: int, size: int, hop: int) -> np.ndarray:
    """[F, size] output positions covered by each frame of an overlap-add."""
    return np.arange(n_frames)[:, None] * hop + np.arange(size)[None, :]


def overlap_add(a: Tensor, hop: int) -> Tensor:
    """Differentiable overlap_add_array; the pullback gathers each frame's span."""
    idx = overlap_indices(a.shape[-2], a.shape[-1], hop)
    return a.tape.record("overlap_add", overlap_add_array(a.value, hop), (a,),
                         lambda g: (g[..., idx],))


# ------------------------------------------------------------------ #
# Finite-difference verification                                      #
# ------------------------------------------------------------------ #

class GradCheckResult(BaseModel):
    """Per-parameter outcome of a finite-difference check."""
    name: str
    max_rel_error: float
    checked: int
    excluded: list[int]


LossFn = Callable[[Tape, Mapping[str, Tensor]], Tensor]


def _evaluate(f: LossFn, values: Mapping[str, np.ndarray]) -> float:
    tape = Tape(np.float64, debug=False)
    params = {name: tape.param(name, v) for name, v in values.items()}
    return float(f(tape, params).value)


def grad_check(
    f: LossFn,
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    coords: int = 64,
    seed: int = 0,
    abs_floor: float = 1e-8,
    rel_floor: float = 1e-3,
    kink_tol: float = 1e-2,
) -> dict[str, GradCheckResult]:
    """Compare analytic gradients against central differences in 64-bit.

    Up to `coords` random coordinates per parameter are perturbed by +-eps. The relative
    error uses the denominator max(|analytic|, |numeric|, floor), where floor is the larger
    of abs_floor and rel_floor times the parameter's largest analytic gradient. Coordinates
    whose one-sided differences disagree by more than kink_tol (a kink such as relu at 0)
    are excluded and listed.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    values = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
    tape = Tape(np.float64, debug=False)
    tensors = {name: tape.param(name, v) for name, v in values.items()}
    loss = f(tape, tensors)
    analytic = backward(tape, loss)
    base = float(loss.value)
    rng = np.random.default_rng(seed)
    results: dict[str, GradCheckResult] = {}
    for name, v in values.items():
        flat_grad = analytic[name].reshape(-1)
        picks = np.sort(rng.choice(v.size, size=min(coords, v.size), replace=False))
        floor = max(abs_floor, rel_floor * float(np.max(np.abs(flat_grad), initial=0.0)))
        worst = 0.0
        excluded: list[int] = []
        for c in picks:
            flat = v.reshape(-1)
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = _evaluate(f, values)
            flat[c] = orig - eps
            f_minus = _evaluate(f, values)
            flat[c] = orig
            fwd, bwd = (f_plus - base) / eps, (base - f_minus) / eps
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor):
                excluded.append(int(c))
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(flat_grad[c])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        results[name] = GradCheckResult(
            name=name, max_rel_error=worst, checked=len(picks) - len(excluded), excluded=excluded
        )
        _log.debug("grad_check %s: max rel err %.3g over %d coords (%d kinks)",
                   name, worst, len(picks) - len(excluded), len(excluded))
    return results
