"""Minimal dense tensor engine with reverse-mode autodiff.

Tensors wrap numpy arrays; each operation records a backward closure and its
parents, and backward() walks the graph in reverse topological order. The
primitive set is exactly what the models here need: elementwise arithmetic,
matmul, reductions, softmax, 3D convolution and its transpose, and a rotary
pair rotation. Convolutions run as im2col plus one BLAS matmul; their
backward passes reuse the same two helpers, which makes the transposed
convolution the exact adjoint of the forward convolution by construction.

f64 everywhere for verification suites; f32 is fine for toy training.
Forward results are deterministic for a fixed seed and thread count (the
per-output-element summation order never changes).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import CapabilityError, DimensionError

# When enabled, every op output is checked for NaN/Inf.
DEBUG_FINITE = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64 if not isinstance(data, np.ndarray) else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None
        self._prev: tuple[Tensor, ...] = ()

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, prev: Sequence["Tensor"], backward: Callable[[np.ndarray], None]) -> "Tensor":
        if DEBUG_FINITE and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite value in forward op")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in prev)
        if out.requires_grad:
            out._prev = tuple(p for p in prev if p.requires_grad)
            out._backward = lambda g=None: backward(out.grad)
        else:
            out._prev = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        if self.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.data.dtype)
        data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._op(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return Tensor._op(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.data.dtype)
        data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._op(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return _as_tensor(other) * self ** -1.0

    def __pow__(self, p: float):
        data = self.data ** p

        def backward(g):
            self._accumulate(g * p * self.data ** (p - 1.0))

        return Tensor._op(data, (self,), backward)

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            self._accumulate(g * data)

        return Tensor._op(data, (self,), backward)

    def log(self):
        def backward(g):
            self._accumulate(g / self.data)

        return Tensor._op(np.log(self.data), (self,), backward)

    def relu(self):
        mask = self.data > 0

        def backward(g):
            self._accumulate(g * mask)

        return Tensor._op(self.data * mask, (self,), backward)

    def abs(self):
        sign = np.sign(self.data)

        def backward(g):
            self._accumulate(g * sign)

        return Tensor._op(np.abs(self.data), (self,), backward)

    def gelu(self):
        # exact (erf) form; derivative is Phi(x) + x*phi(x)
        phi_cdf = 0.5 * (1.0 + erf(self.data * _INV_SQRT2))
        data = self.data * phi_cdf

        def backward(g):
            pdf = np.exp(-0.5 * self.data ** 2) * _INV_SQRT2PI
            self._accumulate(g * (phi_cdf + self.data * pdf))

        return Tensor._op(data, (self,), backward)

    def maximum_const(self, c: float):
        """Elementwise max(x, c); gradient passes only where x > c."""
        mask = self.data > c

        def backward(g):
            self._accumulate(g * mask)

        return Tensor._op(np.maximum(self.data, c), (self,), backward)

    # -- matmul ---------------------------------------------------------------

    def __matmul__(self, other):
        other = _as_tensor(other)
        data = np.matmul(self.data, other.data)

        def backward(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accumulate(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accumulate(_unbroadcast(gb, other.data.shape))

        return Tensor._op(data, (self, other), backward)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(g):
            self._accumulate(g.reshape(self.data.shape))

        return Tensor._op(data, (self,), backward)

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def backward(g):
            self._accumulate(g.transpose(inv))

        return Tensor._op(self.data.transpose(axes), (self,), backward)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, idx):
        data = self.data[idx]

        def backward(g):
            buf = np.zeros_like(self.data)
            buf[idx] += g
            self._accumulate(buf)

        return Tensor._op(data, (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor._op(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else _axis_extent(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _axis_extent(shape: tuple[int, ...], axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def cat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._op(data, tensors, backward)


def softmax_lastdim(logits: Tensor) -> Tensor:
    """Row-stochastic softmax over the last dimension, max-subtracted."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        logits._accumulate((g - dot) * y)

    return Tensor._op(y, (logits,), backward)


def apply_rotary(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate interleaved pairs of the last dim: pair i by angles[..., i].

    x has last dimension 2P; angles has shape x.shape[:-1] + (P,) (or
    broadcastable to it). The backward pass rotates the gradient by -angles.
    """
    if x.shape[-1] % 2 != 0:
        raise DimensionError(f"rotary input needs an even last dim, got {x.shape}")
    cos, sin = np.cos(angles), np.sin(angles)
    ev, od = x.data[..., 0::2], x.data[..., 1::2]
    data = np.empty_like(x.data)
    data[..., 0::2] = ev * cos - od * sin
    data[..., 1::2] = ev * sin + od * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        buf = np.empty_like(x.data)
        buf[..., 0::2] = ge * cos + go * sin
        buf[..., 1::2] = -ge * sin + go * cos
        x._accumulate(buf)

    return Tensor._op(data, (x,), backward)


# -- 3D convolution ----------------------------------------------------------


def _conv_out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _check_conv_args(stride, padding) -> None:
    if len(stride) != 3 or len(padding) != 3:
        raise DimensionError("stride and padding must be length-3 tuples")
    if min(stride) < 1:
        raise DimensionError(f"strides must be >= 1, got {stride}")
    if min(padding) < 0:
        raise DimensionError(f"padding must be >= 0, got {padding}")


def _im2col(xp: np.ndarray, ksize, stride, out_shape) -> np.ndarray:
    """(C,Dp,Hp,Wp) -> (C*kd*kh*kw, Do*Ho*Wo) patch matrix."""
    c = xp.shape[0]
    kd, kh, kw = ksize
    sd, sh, sw = stride
    do, ho, wo = out_shape
    cols = np.empty((c, kd, kh, kw, do, ho, wo), dtype=xp.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                cols[:, a, b, e] = xp[
                    :,
                    a : a + sd * do : sd,
                    b : b + sh * ho : sh,
                    e : e + sw * wo : sw,
                ]
    return cols.reshape(c * kd * kh * kw, do * ho * wo)


def _col2im(cols: np.ndarray, c: int, padded_shape, ksize, stride, out_shape) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back into a padded buffer."""
    kd, kh, kw = ksize
    sd, sh, sw = stride
    do, ho, wo = out_shape
    buf = np.zeros((c,) + tuple(padded_shape), dtype=cols.dtype)
    blocks = cols.reshape(c, kd, kh, kw, do, ho, wo)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                buf[
                    :,
                    a : a + sd * do : sd,
                    b : b + sh * ho : sh,
                    e : e + sw * wo : sw,
                ] += blocks[:, a, b, e]
    return buf


def _pad3(x: np.ndarray, padding) -> np.ndarray:
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _crop3(x: np.ndarray, padding) -> np.ndarray:
    pd, ph, pw = padding
    d, h, w = x.shape[1:]
    return x[:, pd : d - pd or None, ph : h - ph or None, pw : w - pw or None]


def conv3d(x: Tensor, weight: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Cross-correlation of (C_in,D,H,W) with (C_out,C_in,kd,kh,kw)."""
    _check_conv_args(stride, padding)
    if x.data.ndim != 4 or weight.data.ndim != 5:
        raise DimensionError(f"conv3d expects 4D input and 5D weight, got {x.shape} and {weight.shape}")
    c_out, c_in, kd, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"input channels {x.shape[0]} != weight C_in {c_in}")
    out_shape = tuple(
        _conv_out_extent(n, k, s, p)
        for n, k, s, p in zip(x.shape[1:], (kd, kh, kw), stride, padding)
    )
    if min(out_shape) < 1:
        raise DimensionError(f"kernel {weight.shape[2:]} does not fit padded input {x.shape}")
    xp = _pad3(x.data, padding)
    cols = _im2col(xp, (kd, kh, kw), stride, out_shape)
    data = (weight.data.reshape(c_out, -1) @ cols).reshape((c_out,) + out_shape)

    def backward(g):
        gm = g.reshape(c_out, -1)
        if weight.requires_grad:
            weight._accumulate((gm @ cols.T).reshape(weight.shape))
        if x.requires_grad:
            gcols = weight.data.reshape(c_out, -1).T @ gm
            gx = _col2im(gcols, c_in, xp.shape[1:], (kd, kh, kw), stride, out_shape)
            x._accumulate(_crop3(gx, padding))

    return Tensor._op(data, (x, weight), backward)


def conv3d_transposed(
    x: Tensor,
    weight: Tensor,
    stride=(1, 1, 1),
    padding=(0, 0, 0),
    output_padding=(0, 0, 0),
) -> Tensor:
    """Transposed convolution, the exact adjoint of conv3d.

    weight is (C_in, C_out, kd, kh, kw); output extent per dim is
    (n - 1)*stride - 2*padding + kernel + output_padding. output_padding
    (each component < stride) recovers positions a strided conv never read,
    so the adjoint identity holds for configurations with a stride remainder.
    """
    _check_conv_args(stride, padding)
    if x.data.ndim != 4 or weight.data.ndim != 5:
        raise DimensionError(f"conv3d_transposed expects 4D input and 5D weight, got {x.shape} and {weight.shape}")
    if any(not 0 <= op < s for op, s in zip(output_padding, stride)):
        raise DimensionError(f"output_padding must satisfy 0 <= op < stride, got {output_padding} for stride {stride}")
    c_in, c_out, kd, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"input channels {x.shape[0]} != weight C_in {c_in}")
    out_shape = tuple(
        (n - 1) * s - 2 * p + k + op
        for n, k, s, p, op in zip(x.shape[1:], (kd, kh, kw), stride, padding, output_padding)
    )
    if min(out_shape) < 1:
        raise DimensionError(f"transposed output collapsed to {out_shape}")
    padded_shape = tuple(n + 2 * p for n, p in zip(out_shape, padding))
    gcols = weight.data.reshape(c_in, -1).T @ x.data.reshape(c_in, -1)
    buf = _col2im(gcols, c_out, padded_shape, (kd, kh, kw), stride, x.shape[1:])
    data = _crop3(buf, padding)

    def backward(g):
        gp = _pad3(g, padding)
        cols = _im2col(gp, (kd, kh, kw), stride, x.shape[1:])
        if x.requires_grad:
            gx = (weight.data.reshape(c_in, -1) @ cols).reshape(x.shape)
            x._accumulate(gx)
        if weight.requires_grad:
            gw = x.data.reshape(c_in, -1) @ cols.T
            weight._accumulate(gw.reshape(weight.shape))

    return Tensor._op(data, (x, weight), backward)


# -- gradient utilities -------------------------------------------------------


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar loss for each parameter."""
    for p in params:
        if not p.requires_grad:
            raise CapabilityError("grad() requires parameters with requires_grad=True")
        p.grad = None
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def finite_diff_grad(
    f: Callable[[], float | Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> list[np.ndarray]:
    """Central finite differences of f() w.r.t. each parameter, in place."""

    def evaluate() -> float:
        v = f()
        return v.item() if isinstance(v, Tensor) else float(v)

    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = evaluate()
            flat[i] = orig - step
            lo = evaluate()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        out.append(g)
    return out


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> tuple[bool, float]:
    """Compare reverse-mode and finite-difference gradients.

    Passes when |a - b| <= atol + rtol*max(|a|,|b|) elementwise for every
    parameter; returns (ok, worst relative error).
    """
    analytic = grad(f(), params)
    numeric = finite_diff_grad(f, params, step=step)
    ok = True
    worst = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        if not np.all(diff <= atol + rtol * scale):
            ok = False
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(scale > atol, diff / np.maximum(scale, 1e-300), 0.0)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return ok, worst


def parameter(rng: np.random.Generator, shape, scale: float = 0.1, dtype=np.float64) -> Tensor:
    """Gaussian-initialized trainable tensor."""
    return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)
