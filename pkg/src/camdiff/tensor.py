"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Values are numpy arrays: float64 by default (the reference precision used by
every test and gradient check), float32 as an opt-in fast mode for long
training runs. Gradients are plain numpy arrays of the same shape as the
value.

Differentiable ops record themselves onto the active :class:`Tape`. Calling
``tape.backward(loss)`` walks the record once in reverse execution order and
populates ``grad`` on every ``requires_grad`` leaf that influenced the loss.
A tape serves a single forward/backward cycle and must be reset explicitly
before reuse. Tensors are treated as immutable once created; ops never write
into their inputs.

Only first-order gradients are supported: backward functions compute with raw
numpy and are never themselves taped.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "swapaxes",
    "concat",
    "tsum",
    "tmean",
    "softmax",
    "layer_norm",
    "gelu",
    "conv1d",
    "embedding",
]

# python floats: numpy treats them as weak scalars, so float32 stays float32
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_FLOAT_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class TapeError(RuntimeError):
    """Invalid tape state: nested tapes, consumed tape, or non-scalar loss."""


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_on_path")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._on_path = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


_ACTIVE: "Tape | None" = None


class Tape:
    """Ordered record of executed differentiable ops.

    Used as a context manager around a forward pass; ``backward`` consumes
    the record. Each logical worker must own a private tape — nothing here
    is shared-state safe.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise TapeError("a tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def reset(self):
        self._nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every requires_grad leaf reachable from loss.

        The loss must be scalar (size 1). The traversal visits each recorded
        op exactly once, in reverse execution order, and consumes the tape.
        """
        if self._consumed:
            raise TapeError("tape already consumed; call reset() to reuse")
        if loss.data.size != 1:
            raise TapeError(f"backward target must be scalar, got shape {loss.data.shape}")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for out, inputs, bwd in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, bwd(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp.requires_grad:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self._nodes.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_pair(a, b):
    """Coerce operands to Tensors; python scalars adopt the other's dtype
    (mirroring numpy's weak-scalar promotion, so float32 graphs stay float32)."""
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        if isinstance(b, (int, float)):
            return a, Tensor(np.asarray(b, dtype=a.data.dtype))
        return a, Tensor(b)
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def _track(out: Tensor, inputs, bwd):
    """Record an op on the active tape when any input is on the grad path."""
    tape = _ACTIVE
    if tape is None or tape._consumed:
        return out
    if any(i.requires_grad or i._on_path for i in inputs):
        out._on_path = True
        tape._nodes.append((out, inputs, bwd))
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._on_path


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = Tensor(a.data + b.data)
    na, nb = _needs(a), _needs(b)

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(g, b.data.shape) if nb else None,
        )

    return _track(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = Tensor(a.data - b.data)
    na, nb = _needs(a), _needs(b)

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(-g, b.data.shape) if nb else None,
        )

    return _track(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = Tensor(a.data * b.data)
    na, nb = _needs(a), _needs(b)
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g * bd, ad.shape) if na else None,
            _unbroadcast(g * ad, bd.shape) if nb else None,
        )

    return _track(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = Tensor(a.data / b.data)
    na, nb = _needs(a), _needs(b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape) if na else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if nb else None
        return ga, gb

    return _track(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    na = _needs(a)

    def bwd(g):
        return ((-g) if na else None,)

    return _track(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``.

    Batch dims broadcast; gradients are reduced back over broadcast axes so
    shared weight matrices accumulate correctly.
    """
    a, b = _as_pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    try:
        out = Tensor(a.data @ b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims incompatible: {a.data.shape} @ {b.data.shape}") from exc
    na, nb = _needs(a), _needs(b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape) if na else None
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape) if nb else None
        return ga, gb

    return _track(out, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    na = _needs(a)

    def bwd(g):
        return (g.reshape(old) if na else None,)

    return _track(out, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    na = _needs(a)

    def bwd(g):
        return (g.transpose(inv) if na else None,)

    return _track(out, (a,), bwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.swapaxes(ax1, ax2))
    na = _needs(a)

    def bwd(g):
        return (g.swapaxes(ax1, ax2) if na else None,)

    return _track(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    needs = [_needs(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _track(out, tuple(tensors), bwd)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))
    na = _needs(a)
    shape = a.data.shape

    def bwd(g):
        if not na:
            return (None,)
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _track(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.data.ndim)
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    na = _needs(a)
    shape = a.data.shape
    if axes is None:
        count = a.data.size
    else:
        count = int(np.prod([shape[ax] for ax in axes]))

    def bwd(g):
        if not na:
            return (None,)
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _track(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max-subtracted)."""
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    na = _needs(a)

    def bwd(g):
        if not na:
            return (None,)
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _track(out, (a,), bwd)


def layer_norm(a, gain, bias, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    na, ng, nb = _needs(a), _needs(gain), _needs(bias)
    gd = gain.data

    def bwd(g):
        ga = None
        if na:
            dy = g * gd
            ga = inv * (
                dy
                - dy.mean(axis=axis, keepdims=True)
                - xhat * (dy * xhat).mean(axis=axis, keepdims=True)
            )
        gg = _unbroadcast(g * xhat, gain.data.shape) if ng else None
        gb = _unbroadcast(g, bias.data.shape) if nb else None
        return ga, gg, gb

    return _track(out, (a, gain, bias), bwd)


def gelu(a) -> Tensor:
    """Exact GELU: ``x * Phi(x)`` with the erf form of the normal CDF."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)
    na = _needs(a)

    def bwd(g):
        if not na:
            return (None,)
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _track(out, (a,), bwd)


def conv1d(x, w, b=None) -> Tensor:
    """Same-padded cross-correlation along the second-to-last axis.

    ``x`` is ``[..., L, d_in]``, ``w`` is ``[d_out, d_in, k]`` with odd ``k``,
    ``b`` is ``[d_out]`` or None. Output is ``[..., L, d_out]``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if b is None else _as_tensor(b)
    if x.data.ndim < 2 or w.data.ndim != 3:
        raise ShapeError(f"conv1d expects x[..., L, d_in], w[d_out, d_in, k]; got {x.data.shape}, {w.data.shape}")
    d_out, d_in, k = w.data.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    if x.data.shape[-1] != d_in:
        raise ShapeError(f"conv1d channel mismatch: x has {x.data.shape[-1]}, w expects {d_in}")
    lead = x.data.shape[:-2]
    L = x.data.shape[-2]
    pad = k // 2
    xb = x.data.reshape((-1, L, d_in))
    xp = np.pad(xb, ((0, 0), (pad, pad), (0, 0)))
    y = np.zeros((xb.shape[0], L, d_out), dtype=x.data.dtype)
    wt = w.data
    for j in range(k):
        y += xp[:, j:j + L, :] @ wt[:, :, j].T
    if b is not None:
        if b.data.shape != (d_out,):
            raise ShapeError(f"conv1d bias must be [{d_out}], got {b.data.shape}")
        y = y + b.data
    out = Tensor(y.reshape(lead + (L, d_out)))
    nx, nw = _needs(x), _needs(w)
    nb = b is not None and _needs(b)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gb3 = g.reshape((-1, L, d_out))
        gx = gw = gbias = None
        if nx:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, j:j + L, :] += gb3 @ wt[:, :, j]
            gx = dxp[:, pad:pad + L, :].reshape(x.data.shape)
        if nw:
            gw = np.empty_like(wt)
            for j in range(k):
                gw[:, :, j] = np.tensordot(gb3, xp[:, j:j + L, :], axes=([0, 1], [0, 1]))
        if nb:
            gbias = gb3.sum(axis=(0, 1))
        if b is None:
            return gx, gw
        return gx, gw, gbias

    return _track(out, inputs, bwd)


def embedding(table, indices) -> Tensor:
    """Row gather ``table[indices]`` with scatter-add backward."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding indices must be integers, got dtype {idx.dtype}")
    out = Tensor(table.data[idx])
    nt = _needs(table)

    def bwd(g):
        if not nt:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _track(out, (table,), bwd)
