"""Differentiable numeric substrate.

Dense float64/complex128 arrays, a reverse-mode gradient tape over a fixed
operation vocabulary, and real FFT ops with exact adjoints.

Conventions
-----------
* Tensors are immutable after creation (the underlying buffer is marked
  read-only) and therefore safe to share across threads.
* Recording happens only while a :class:`Tape` is active and at least one
  operand requires gradients. Without an active tape every op is pure
  inference.
* Gradients of complex intermediates use the pair convention
  ``g = dL/d(Re z) + 1j * dL/d(Im z)``; learnable parameters are always
  real arrays, so optimizer state never sees complex values.
* Everything is double precision. ``set_debug_checks(True)`` additionally
  validates finiteness of every op output (off by default: it is a full
  memory scan per op).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "constant",
    "parameter",
    "forward",
    "set_debug_checks",
    "check_gradients",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op finiteness validation (expensive, for tests/debugging)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes incompatible with an op."""

    def __init__(self, op: str, *shapes: tuple) -> None:
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class TapeError(RuntimeError):
    """Tape misuse: non-scalar backward, reuse of a consumed tape, etc."""


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if np.iscomplexobj(arr):
        arr = arr.astype(np.complex128, copy=False)
    else:
        arr = arr.astype(np.float64, copy=False)
    return arr


class Tensor:
    """Immutable dense array of float64 or complex128 values."""

    __slots__ = ("data", "requires_grad", "is_leaf")

    def __init__(self, values, requires_grad: bool = False, _leaf: bool = True):
        arr = _as_array(values)
        if not np.all(np.isfinite(arr.view(np.float64) if arr.dtype == np.complex128 else arr)):
            raise ValueError("Tensor values must be finite (no NaN/Inf)")
        arr = arr.copy() if not arr.flags.owndata else arr
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.is_leaf = _leaf

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return self.data.dtype == np.complex128

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # Operator sugar; python scalars are promoted to constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def constant(values) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    """A leaf tensor that accumulates gradients; must be real-valued."""
    t = Tensor(values, requires_grad=True)
    if t.is_complex:
        raise ValueError("parameters must be real; store complex weights as re/im planes")
    return t


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


_TAPE_STACK: list = []


class Tape:
    """Ordered record of executed ops; backward walks it in exact reverse order."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, output: Tensor, inputs: Sequence[Tensor] | None = None):
        """Gradients of a scalar `output` w.r.t. requires_grad leaves.

        Returns a dict keyed by tensor identity. When `inputs` is given the
        result instead is a list aligned with it (zeros for unreached leaves).
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if output.shape != ():
            raise TapeError(f"backward requires a scalar output, got shape {output.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(output): np.ones((), dtype=np.float64)}
        seen: dict[int, Tensor] = {id(output): output}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, dt in zip(rec.inputs, rec.vjp(g)):
                if dt is None or not t.requires_grad:
                    continue
                dt = _coerce_grad(dt, t)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + dt
                else:
                    grads[key] = dt
                seen[key] = t
        leaf_grads = {seen[k]: g for k, g in grads.items() if seen[k].is_leaf}
        if inputs is None:
            return leaf_grads
        out = []
        for t in inputs:
            if not t.requires_grad:
                raise TapeError("gradient requested for a tensor with requires_grad=False")
            out.append(leaf_grads.get(t, np.zeros(t.shape, dtype=t.data.dtype)))
        return out


def backward(tape: Tape, output: Tensor, inputs: Sequence[Tensor] | None = None):
    """Functional alias for :meth:`Tape.backward`."""
    return tape.backward(output, inputs)


def forward(fn: Callable, *inputs: Tensor):
    """Run `fn(*inputs)` under a fresh tape; returns (output, tape)."""
    with Tape() as tape:
        out = fn(*inputs)
    return out, tape


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _coerce_grad(g: np.ndarray, t: Tensor) -> np.ndarray:
    if not t.is_complex and np.iscomplexobj(g):
        g = g.real
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    return g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _emit(op: str, inputs: tuple, out_data: np.ndarray, vjp: Callable) -> Tensor:
    if _DEBUG_CHECKS:
        flat = out_data.view(np.float64) if out_data.dtype == np.complex128 else out_data
        if not np.all(np.isfinite(flat)):
            raise FloatingPointError(f"{op}: non-finite values in output")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    arr = out_data if out_data.dtype in (np.float64, np.complex128) else _as_array(out_data)
    arr.setflags(write=False)
    out.data = arr
    out.requires_grad = needs
    out.is_leaf = False
    if needs:
        tape.records.append(_Record(op, inputs, out, vjp))
    return out


def _require_real(op: str, *ts: Tensor) -> None:
    for t in ts:
        if t.is_complex:
            raise TypeError(f"{op}: complex input not supported")


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _emit("add", (a, b), out, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _emit("sub", (a, b), out, lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), out, lambda g: (g * np.conj(bd), g * np.conj(ad)))


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None
    ad, bd = a.data, b.data
    return _emit(
        "div",
        (a, b),
        out,
        lambda g: (g * np.conj(1.0 / bd), g * np.conj(-ad / (bd * bd))),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """`a @ b` with `b` 2-D and `a` of rank >= 2 (leading axes are batch)."""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        da = g @ np.conj(bd).T
        db = np.conj(ad).reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return da, db

    return _emit("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities (real only)
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    _require_real("exp", a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def sin(a: Tensor) -> Tensor:
    _require_real("sin", a)
    ad = a.data
    return _emit("sin", (a,), np.sin(ad), lambda g: (g * np.cos(ad),))


def cos(a: Tensor) -> Tensor:
    _require_real("cos", a)
    ad = a.data
    return _emit("cos", (a,), np.cos(ad), lambda g: (-g * np.sin(ad),))


def sigmoid(a: Tensor) -> Tensor:
    _require_real("sigmoid", a)
    out = expit(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    _require_real("tanh", a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    _require_real("gelu", a)
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out = ad * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT_2PI
        return (g * (cdf + ad * pdf),)

    return _emit("gelu", (a,), out, vjp)


def relu(a: Tensor) -> Tensor:
    _require_real("relu", a)
    ad = a.data
    mask = ad > 0.0
    return _emit("relu", (a,), np.where(mask, ad, 0.0), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _emit("sum", (a,), out, vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, shape).copy(),)

    return _emit("mean", (a,), out, vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int, step: int = 1) -> Tensor:
    idx = [np.s_[:]] * a.ndim
    idx[axis] = np.s_[start:stop:step]
    idx = tuple(idx)
    out = a.data[idx].copy()
    shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        da = np.zeros(shape, dtype=g.dtype if np.iscomplexobj(g) else dtype)
        da[idx] = g
        return (da,)

    return _emit("slice", (a,), out, vjp)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[p.shape for p in parts]) from None
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _emit("concat", parts, out, vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    old = a.shape
    return _emit("reshape", (a,), out.copy(), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2).copy()
    return _emit("swapaxes", (a,), out, lambda g: (np.swapaxes(g, ax1, ax2),))


def repeat_interleave(a: Tensor, repeats: int, axis: int) -> Tensor:
    out = np.repeat(a.data, repeats, axis=axis)
    shape = a.shape

    def vjp(g):
        tmp_shape = shape[:axis] + (shape[axis], repeats) + shape[axis + 1:]
        return (g.reshape(tmp_shape).sum(axis=axis + 1),)

    return _emit("repeat", (a,), out, vjp)


def stop_gradient(a: Tensor) -> Tensor:
    """Detach: same values, no tape connection."""
    return constant(a.data)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 1-D convolution; x [B,C,T], w [O,C,K] with odd K, b [O]."""
    _require_real("conv1d", x, w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or w.shape[2] % 2 != 1:
        raise ShapeError("conv1d", x.shape, w.shape)
    B, C, T = x.shape
    O, _, K = w.shape
    p = K // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p)))
    win = sliding_window_view(xp, K, axis=2)              # [B,C,T,K]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * T, C * K)
    wm = w.data.reshape(O, C * K)
    y = (cols @ wm.T).reshape(B, T, O).transpose(0, 2, 1)
    if b is not None:
        if b.shape != (O,):
            raise ShapeError("conv1d.bias", b.shape, (O,))
        y = y + b.data[None, :, None]

    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * T, O)
        dw = (gm.T @ cols).reshape(O, C, K)
        dcols = (gm @ wm).reshape(B, T, C, K)
        dxp = np.zeros_like(xp)
        for k in range(K):
            dxp[:, :, k:k + T] += dcols[:, :, :, k].transpose(0, 2, 1)
        dx = dxp[:, :, p:p + T]
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2))

    return _emit("conv1d", inputs, y, vjp)


# ---------------------------------------------------------------------------
# complex plumbing and Fourier transforms
# ---------------------------------------------------------------------------

def to_complex(re: Tensor, im: Tensor) -> Tensor:
    _require_real("to_complex", re, im)
    if re.shape != im.shape:
        raise ShapeError("to_complex", re.shape, im.shape)
    out = re.data + 1j * im.data
    return _emit("to_complex", (re, im), out, lambda g: (g.real, g.imag))


def real(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.real)
    return _emit("real", (a,), out, lambda g: (g.astype(np.complex128),))


def imag(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.imag)
    return _emit("imag", (a,), out, lambda g: (1j * g,))


def complex_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise complex product (alias of mul; kept for vocabulary clarity)."""
    return mul(a, b)


def mode_matmul(z: Tensor, r: Tensor) -> Tensor:
    """Per-mode channel mixing: z [B,M,C] x r [M,C,O] -> [B,M,O].

    Contractions run as mode-batched BLAS matmuls (much faster than einsum
    for complex operands on this shape family).
    """
    if z.ndim != 3 or r.ndim != 3 or z.shape[1:] != r.shape[:2]:
        raise ShapeError("mode_matmul", z.shape, r.shape)
    zd, rd = z.data, r.data
    out = np.matmul(zd.transpose(1, 0, 2), rd).transpose(1, 0, 2)

    def vjp(g):
        gm = g.transpose(1, 0, 2)                                    # [M,B,O]
        dz = np.matmul(gm, np.conj(rd).transpose(0, 2, 1)).transpose(1, 0, 2)
        dr = np.matmul(np.conj(zd).transpose(1, 2, 0), gm)
        return dz, dr

    return _emit("mode_matmul", (z, r), out, vjp)


def rfft(a: Tensor, axis: int = -1) -> Tensor:
    """Forward real FFT along `axis`; output length floor(N/2)+1."""
    _require_real("rfft", a)
    n = a.shape[axis]
    if n < 2:
        raise ShapeError("rfft", a.shape)
    out = np.fft.rfft(a.data, axis=axis)

    def vjp(g):
        # adjoint via a real inverse transform: scale interior modes by 1/2
        # so irfft's Hermitian doubling reproduces the one-sided sum exactly
        h = g.shape[axis]
        scale = np.full(h, 0.5)
        scale[0] = 1.0
        if n % 2 == 0:
            scale[-1] = 1.0
        shape = [1] * g.ndim
        shape[axis] = h
        return (np.fft.irfft(g * scale.reshape(shape), n=n, axis=axis) * n,)

    return _emit("rfft", (a,), out, vjp)


def irfft(a: Tensor, n: int, axis: int = -1) -> Tensor:
    """Inverse real FFT along `axis` producing a length-`n` real signal."""
    if not a.is_complex:
        raise TypeError("irfft: input must be complex")
    if n < 2 or a.shape[axis] != n // 2 + 1:
        raise ShapeError("irfft", a.shape, (n,))
    out = np.fft.irfft(a.data, n=n, axis=axis)

    def vjp(g):
        dz = np.fft.rfft(g, axis=axis)
        scale = np.full(n // 2 + 1, 2.0)
        scale[0] = 1.0
        if n % 2 == 0:
            scale[-1] = 1.0
        shape = [1] * g.ndim
        shape[axis] = n // 2 + 1
        return (dz * scale.reshape(shape) / n,)

    return _emit("irfft", (a,), out, vjp)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def check_gradients(fn: Callable, inputs: Sequence[Tensor], rtol: float = 1e-4,
                    h: float = 1e-5, atol: float = 1e-7) -> None:
    """Compare tape gradients of scalar `fn(*inputs)` with central differences.

    Raises AssertionError on mismatch. Inputs must be real leaves.
    """
    for t in inputs:
        if t.is_complex:
            raise TypeError("check_gradients: real inputs only")
    out, tape = forward(fn, *inputs)
    grads = tape.backward(out, inputs=[t for t in inputs if t.requires_grad])
    gi = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        g = grads[gi]
        gi += 1
        flat = t.data.ravel()
        num = np.zeros(flat.size)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            plus = fn(*[Tensor(bumped.reshape(t.shape)) if u is t else constant(u.data)
                        for u in inputs]).item()
            bumped[i] = flat[i] - h
            minus = fn(*[Tensor(bumped.reshape(t.shape)) if u is t else constant(u.data)
                         for u in inputs]).item()
            num[i] = (plus - minus) / (2.0 * h)
        got = np.asarray(g).ravel()
        err = np.abs(got - num)
        tol = atol + rtol * np.abs(num)
        if not np.all(err <= tol):
            worst = int(np.argmax(err - tol))
            raise AssertionError(
                f"gradient mismatch at flat index {worst}: tape={got[worst]:.10g} "
                f"fd={num[worst]:.10g} (shape {t.shape})"
            )
