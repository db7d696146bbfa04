"""Minimal dense-tensor reverse-mode automatic differentiation.

Design notes
------------
A ``Tensor`` wraps a contiguous numpy array (float64 for training, float32
for inference paths).  Differentiable operations are plain module functions;
while a ``Tape`` is active every op whose inputs require gradients appends a
``(output, parents, backward_fn)`` record.  ``Tape.backward`` walks the
records in reverse (execution order is already topological), accumulating
``.grad`` on every tensor that requires it, then clears itself.

There is deliberately no general broadcasting: the op set is exactly what
the deformation / rendering stack needs, each with a hand-written backward.
Shaped helpers (``scale_leading``, ``weighted_sum0`` ...) stand in for the
few broadcast patterns that occur.
"""

from __future__ import annotations

import math
from typing import Callable, List, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TrainingError(RuntimeError):
    """Raised on non-finite values in a training-critical computation."""


# ---------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    """Dense array with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={tuple(self.shape)}, dtype={self.data.dtype}, grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


_TAPES: List["Tape"] = []


class Tape:
    """Ordered record of differentiable ops; reverse replay yields gradients.

    One tape is confined to a single worker.  The tape is cleared after each
    backward pass; leaf gradients stay on their tensors.
    """

    def __init__(self):
        self._records: List[tuple] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self._records.append((out, parents, backward))

    def backward(self, loss: Tensor):
        """Accumulate gradients of a scalar ``loss`` onto requires_grad leaves."""
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise TrainingError("non-finite loss")
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            grads = backward(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = pg
                else:
                    p.grad = p.grad + pg
            out.grad = None
        self._records.clear()

    def clear(self):
        self._records.clear()


def _active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _emit(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = a.data / b.data
    return _emit(out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _emit(a.data + s, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _emit(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)

    def backward(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _emit(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def sin(a: Tensor) -> Tensor:
    return _emit(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _emit(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def absval(a: Tensor) -> Tensor:
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def backward(g):
        mask = np.ones_like(a.data)
        if lo is not None:
            mask = mask * (a.data >= lo)
        if hi is not None:
            mask = mask * (a.data <= hi)
        return (g * mask,)

    return _emit(out, (a,), backward)


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select per element from ``a`` (mask true) or ``b``; mask is constant."""
    _check_same_shape(a, b, "where_mask")
    out = np.where(mask, a.data, b.data)
    return _emit(out, (a, b), lambda g: (g * mask, g * (~mask)))


# ---------------------------------------------------------------------------
# Reductions and shaping


def tsum(a: Tensor) -> Tensor:
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return _emit(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def sum0(a: Tensor) -> Tensor:
    """Sum over the leading axis."""
    return _emit(a.data.sum(axis=0), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_last(a: Tensor) -> Tensor:
    """Sum over the trailing axis."""
    return _emit(a.data.sum(axis=-1), (a,), lambda g: (np.repeat(g[..., None], a.shape[-1], axis=-1),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 1."""
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit(out, tuple(parts), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _emit(out, (a,), backward)


def stack0(parts: Sequence[Tensor]) -> Tensor:
    out = np.stack([p.data for p in parts], axis=0)
    return _emit(out, tuple(parts), lambda g: tuple(g[i] for i in range(len(parts))))


def index0(a: Tensor, i: int) -> Tensor:
    out = a.data[i].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return _emit(out, (a,), backward)


def gather0(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the leading axis; backward scatter-adds."""
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(out, (a,), backward)


def scatter0(n: int, idx: np.ndarray, vals: Tensor) -> Tensor:
    """Rows of ``vals`` placed at ``idx`` in a zero tensor of length ``n``.

    Indices must be unique.
    """
    out = np.zeros((n,) + vals.shape[1:], dtype=vals.dtype)
    out[idx] = vals.data
    return _emit(out, (vals,), lambda g: (g[idx],))


def repeat_row(v: Tensor, n: int) -> Tensor:
    """Tile a vector into ``n`` identical rows."""
    out = np.broadcast_to(v.data, (n,) + v.shape).copy()
    return _emit(out, (v,), lambda g: (g.sum(axis=0),))


def affine_const(a: Tensor, scale, shift) -> Tensor:
    """``a * scale + shift`` with constant (non-differentiated) operands."""
    scale = np.asarray(scale, dtype=a.dtype)
    shift = np.asarray(shift, dtype=a.dtype)
    return _emit(a.data * scale + shift, (a,), lambda g: (g * scale,))


def transpose2d(a: Tensor) -> Tensor:
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def transpose_last2(a: Tensor) -> Tensor:
    out = np.swapaxes(a.data, -1, -2).copy()
    return _emit(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Exact dense 2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return (ga, gb)

    return _emit(a.data @ b.data, (a, b), backward)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a vector to every row of a matrix."""
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {a.shape} and {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor], activation: str = "none") -> Tensor:
    """Fused ``act(x @ w + b)`` used by every MLP layer (keeps the tape short)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    z = x.data @ w.data
    if b is not None:
        z += b.data
    if activation == "relu":
        out = np.maximum(z, 0)
    elif activation == "none":
        out = z
    else:
        raise ValueError(f"unknown activation '{activation}'")

    def backward(g):
        gz = g * (out > 0) if activation == "relu" else g
        gx = gz @ w.data.T if x.requires_grad else None
        gw = x.data.T @ gz if w.requires_grad else None
        gb = gz.sum(axis=0) if (b is not None and b.requires_grad) else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _emit(out, parents, backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over a shared leading axis."""
    if a.shape[0] != b.shape[0] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (ga, gb)

    return _emit(a.data @ b.data, (a, b), backward)


def scale_leading(a: Tensor, s: Tensor) -> Tensor:
    """Multiply each leading-axis slice of ``a`` by the scalar ``s[i]``."""
    if s.data.ndim != 1 or a.shape[0] != s.shape[0]:
        raise DimensionError(f"scale_leading: {a.shape} vs {s.shape}")
    sh = (s.shape[0],) + (1,) * (a.data.ndim - 1)
    se = s.data.reshape(sh)

    def backward(g):
        ga = g * se if a.requires_grad else None
        gs = (g * a.data).reshape(s.shape[0], -1).sum(axis=1) if s.requires_grad else None
        return (ga, gs)

    return _emit(a.data * se, (a, s), backward)


def weighted_sum0(w: Tensor, p: Tensor) -> Tensor:
    """``sum_k w[k, n] * p[k, n, :]`` contracted over the leading axis."""
    if w.shape != p.shape[:2]:
        raise DimensionError(f"weighted_sum0: {w.shape} vs {p.shape}")
    out = np.einsum("kn,knd->nd", w.data, p.data, optimize=True)

    def backward(g):
        gw = np.einsum("nd,knd->kn", g, p.data, optimize=True) if w.requires_grad else None
        gp = w.data[:, :, None] * g[None, :, :] if p.requires_grad else None
        return (gw, gp)

    return _emit(out, (w, p), backward)


def weighted_sum1(w: Tensor, v: Tensor) -> Tensor:
    """``sum_n w[r, n] * v[r, n, :]`` contracted over the second axis."""
    if w.shape != v.shape[:2]:
        raise DimensionError(f"weighted_sum1: {w.shape} vs {v.shape}")
    out = np.einsum("rn,rnd->rd", w.data, v.data, optimize=True)

    def backward(g):
        gw = np.einsum("rd,rnd->rn", g, v.data, optimize=True) if w.requires_grad else None
        gv = w.data[:, :, None] * g[:, None, :] if v.requires_grad else None
        return (gw, gv)

    return _emit(out, (w, v), backward)


# ---------------------------------------------------------------------------
# Rotation helpers (batched over bones)


def skew3(v: Tensor) -> Tensor:
    """(K,3) axis vectors to (K,3,3) cross-product matrices."""
    d = v.data
    k = d.shape[0]
    out = np.zeros((k, 3, 3), dtype=d.dtype)
    out[:, 0, 1] = -d[:, 2]
    out[:, 0, 2] = d[:, 1]
    out[:, 1, 0] = d[:, 2]
    out[:, 1, 2] = -d[:, 0]
    out[:, 2, 0] = -d[:, 1]
    out[:, 2, 1] = d[:, 0]

    def backward(g):
        gv = np.stack(
            [g[:, 2, 1] - g[:, 1, 2], g[:, 0, 2] - g[:, 2, 0], g[:, 1, 0] - g[:, 0, 1]],
            axis=1,
        )
        return (gv,)

    return _emit(out, (v,), backward)


def unskew3(m: Tensor) -> Tensor:
    """(K,3,3) to (K,3): ``[M21-M12, M02-M20, M10-M01]``."""
    d = m.data
    out = np.stack(
        [d[:, 2, 1] - d[:, 1, 2], d[:, 0, 2] - d[:, 2, 0], d[:, 1, 0] - d[:, 0, 1]],
        axis=1,
    )

    def backward(g):
        gm = np.zeros_like(d)
        gm[:, 2, 1] += g[:, 0]
        gm[:, 1, 2] -= g[:, 0]
        gm[:, 0, 2] += g[:, 1]
        gm[:, 2, 0] -= g[:, 1]
        gm[:, 1, 0] += g[:, 2]
        gm[:, 0, 1] -= g[:, 2]
        return (gm,)

    return _emit(out, (m,), backward)


def trace3(m: Tensor) -> Tensor:
    out = np.trace(m.data, axis1=-2, axis2=-1)

    def backward(g):
        eye = np.eye(3, dtype=m.dtype)
        return (g[:, None, None] * eye,)

    return _emit(out, (m,), backward)


def rot_log_factor(c: Tensor) -> Tensor:
    """``theta / (2 sin theta)`` as a smooth function of ``c = cos theta``.

    Series branch near c=1 keeps the gradient finite at the identity
    rotation.  Rotations with angle near pi (c close to -1) are outside the
    supported range.
    """
    d = c.data
    if np.any(d < -0.999):
        raise TrainingError("rotation log: angle too close to pi")
    u = 1.0 - d
    near = u < 1e-4
    dc = np.clip(d, -0.999, 1.0)
    s = np.sqrt(np.maximum(1.0 - dc * dc, 1e-30))
    theta = np.arccos(dc)
    closed = theta / (2.0 * s)
    series = 0.5 * (1.0 + u / 3.0 + 2.0 * u * u / 15.0)
    out = np.where(near, series, closed)

    def backward(g):
        d_closed = (-1.0 + theta * dc / s) / (2.0 * s * s)
        d_series = -(1.0 / 6.0 + 2.0 * u / 15.0)
        return (g * np.where(near, d_series, d_closed),)

    return _emit(out, (c,), backward)


# ---------------------------------------------------------------------------
# Positional encoding

_SQ2 = math.sqrt(2.0)


def hann_band_weights(num_bands: int, alpha: float, dtype=np.float64) -> np.ndarray:
    """Truncated raised-cosine weight per frequency band for window extent ``alpha``."""
    k = np.arange(num_bands, dtype=dtype)
    x = np.clip(alpha - k, 0.0, 1.0)
    return (1.0 - np.cos(np.pi * x)) / 2.0


def posenc(p: Tensor, num_bands: int, alpha: float, include_raw: bool = True) -> Tensor:
    """Sinusoidal encoding with per-band window weights.

    Output columns: raw xyz (when ``include_raw``), then per band k the
    weighted ``sin(2^k pi p)`` and ``cos(2^k pi p)`` triples.
    """
    x = p.data
    if x.ndim != 2:
        raise DimensionError(f"posenc expects (N,3)-like input, got {p.shape}")
    n, d = x.shape
    freqs = (2.0 ** np.arange(num_bands, dtype=x.dtype)) * np.pi
    w = hann_band_weights(num_bands, alpha, dtype=x.dtype)
    ang = x[:, :, None] * freqs[None, None, :]
    s = np.sin(ang)
    cvals = np.cos(ang)
    cols = [x] if include_raw else []
    for k in range(num_bands):
        cols.append(w[k] * s[:, :, k])
        cols.append(w[k] * cvals[:, :, k])
    out = np.concatenate(cols, axis=1)

    def backward(g):
        off = d if include_raw else 0
        gp = g[:, :d].copy() if include_raw else np.zeros_like(x)
        for k in range(num_bands):
            gs = g[:, off + 2 * k * d: off + (2 * k + 1) * d]
            gc = g[:, off + (2 * k + 1) * d: off + (2 * k + 2) * d]
            gp += (w[k] * freqs[k]) * (gs * cvals[:, :, k] - gc * s[:, :, k])
        return (gp,)

    return _emit(out, (p,), backward)


def posenc_dim(num_bands: int, include_raw: bool = True, point_dim: int = 3) -> int:
    return (point_dim if include_raw else 0) + 2 * point_dim * num_bands


# ---------------------------------------------------------------------------
# Transposed 3-D convolution (weight-volume generator)


def _convt_ranges(d_in: int, d_out: int, offset: int, stride: int):
    """Input index range [lo, hi) whose scattered output index is in bounds."""
    lo = 0
    while lo * stride + offset < 0:
        lo += 1
    hi = d_in
    while hi > lo and (hi - 1) * stride + offset >= d_out:
        hi -= 1
    return lo, hi


def conv_transpose3d(x: Tensor, w: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """Scatter-accumulate transposed convolution on a cubic volume.

    ``x``: (C_in, D, D, D); ``w``: (C_in, C_out, k, k, k).
    Output spatial size is ``(D-1)*stride - 2*padding + k``.
    """
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise DimensionError(f"conv_transpose3d: got input {x.shape}, kernel {w.shape}")
    if x.shape[0] != w.shape[0]:
        raise DimensionError(
            f"conv_transpose3d: input channels {x.shape[0]} != kernel channels {w.shape[0]}"
        )
    if stride < 1:
        raise DimensionError("conv_transpose3d: stride must be >= 1")
    cin, d, _, _ = x.shape
    cout, k = w.shape[1], w.shape[2]
    d_out = (d - 1) * stride - 2 * padding + k
    if d_out < 1:
        raise DimensionError("conv_transpose3d: non-positive output size")

    offsets = []
    for kz in range(k):
        oz = kz - padding
        lz = _convt_ranges(d, d_out, oz, stride)
        for ky in range(k):
            oy = ky - padding
            ly = _convt_ranges(d, d_out, oy, stride)
            for kx in range(k):
                ox = kx - padding
                lx = _convt_ranges(d, d_out, ox, stride)
                offsets.append((kz, ky, kx, oz, oy, ox, lz, ly, lx))

    def _slices(oz, oy, ox, lz, ly, lx):
        iz = slice(lz[0], lz[1])
        iy = slice(ly[0], ly[1])
        ix = slice(lx[0], lx[1])
        sz = slice(lz[0] * stride + oz, (lz[1] - 1) * stride + oz + 1, stride)
        sy = slice(ly[0] * stride + oy, (ly[1] - 1) * stride + oy + 1, stride)
        sx = slice(lx[0] * stride + ox, (lx[1] - 1) * stride + ox + 1, stride)
        return (iz, iy, ix), (sz, sy, sx)

    out = np.zeros((cout, d_out, d_out, d_out), dtype=x.dtype)
    for kz, ky, kx, oz, oy, ox, lz, ly, lx in offsets:
        if lz[1] <= lz[0] or ly[1] <= ly[0] or lx[1] <= lx[0]:
            continue
        (iz, iy, ix), (sz, sy, sx) = _slices(oz, oy, ox, lz, ly, lx)
        out[:, sz, sy, sx] += np.tensordot(w.data[:, :, kz, ky, kx], x.data[:, iz, iy, ix], axes=(0, 0))

    def backward(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for kz, ky, kx, oz, oy, ox, lz, ly, lx in offsets:
            if lz[1] <= lz[0] or ly[1] <= ly[0] or lx[1] <= lx[0]:
                continue
            (iz, iy, ix), (sz, sy, sx) = _slices(oz, oy, ox, lz, ly, lx)
            gslab = g[:, sz, sy, sx]
            if gx is not None:
                gx[:, iz, iy, ix] += np.tensordot(w.data[:, :, kz, ky, kx], gslab, axes=(1, 0))
            if gw is not None:
                gw[:, :, kz, ky, kx] += np.tensordot(
                    x.data[:, iz, iy, ix].reshape(cin, -1),
                    gslab.reshape(cout, -1),
                    axes=(1, 1),
                )
        return (gx, gw)

    return _emit(out, (x, w), backward)


def add_channel_bias(vol: Tensor, b: Tensor) -> Tensor:
    """Per-channel bias over a (C, ...) volume."""
    if vol.shape[0] != b.shape[0]:
        raise DimensionError(f"add_channel_bias: {vol.shape} vs {b.shape}")
    sh = (b.shape[0],) + (1,) * (vol.data.ndim - 1)
    return _emit(vol.data + b.data.reshape(sh), (vol, b),
                 lambda g: (g, g.reshape(b.shape[0], -1).sum(axis=1)))


def softmax0(a: Tensor) -> Tensor:
    """Softmax over the leading (channel) axis."""
    z = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=0, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# Trilinear volume sampling (per-bone channels)


def sample_bone_channels(vol: Tensor, pts: Tensor, box_min, box_max) -> Tensor:
    """Sample channel ``i`` of ``vol`` at ``pts[i]`` by trilinear interpolation.

    ``vol``: (C, G0, G1, G2) grid spanning the axis-aligned box; ``pts``:
    (K, N, 3) world positions with K <= C.  Values outside the box fall off
    linearly to the zero padding and are exactly 0 beyond one voxel outside.
    Differentiable in both the grid values and the sample positions.
    """
    v = vol.data
    p = pts.data
    if p.ndim != 3 or p.shape[-1] != 3:
        raise DimensionError(f"sample_bone_channels: points {pts.shape}")
    kb, n, _ = p.shape
    if kb > v.shape[0]:
        raise DimensionError(f"sample_bone_channels: {kb} bones > {v.shape[0]} channels")
    gsz = np.array(v.shape[1:], dtype=v.dtype)
    bmin = np.asarray(box_min, dtype=v.dtype)
    bmax = np.asarray(box_max, dtype=v.dtype)
    scale = (gsz - 1.0) / (bmax - bmin)

    u = (p - bmin) * scale + 1.0  # coordinates in the zero-padded grid
    gp = gsz + 2.0
    inside = np.all((u >= 0.0) & (u <= gp - 1.0), axis=-1)
    i0 = np.floor(u).astype(np.int64)
    np.clip(i0, 0, (gp - 2.0).astype(np.int64), out=i0)
    f = u - i0

    vp = np.zeros((v.shape[0],) + tuple(int(g) + 2 for g in v.shape[1:]), dtype=v.dtype)
    vp[:, 1:-1, 1:-1, 1:-1] = v
    ch = np.arange(kb).reshape(kb, 1)

    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]

    corners = {}
    out = np.zeros((kb, n), dtype=v.dtype)
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                cv = vp[ch, ix + a, iy + b, iz + c]
                corners[(a, b, c)] = cv
                out += wx[a] * wy[b] * wz[c] * cv
    out *= inside

    def backward(g):
        gm = g * inside
        gvol = None
        if vol.requires_grad:
            flat = np.zeros(vp.size, dtype=v.dtype)
            strides = np.array([vp.shape[1] * vp.shape[2] * vp.shape[3],
                                vp.shape[2] * vp.shape[3], vp.shape[3], 1], dtype=np.int64)
            base = ch * strides[0]
            for a in (0, 1):
                for b in (0, 1):
                    for c in (0, 1):
                        idx = base + (ix + a) * strides[1] + (iy + b) * strides[2] + (iz + c)
                        wgt = (wx[a] * wy[b] * wz[c]) * gm
                        flat += np.bincount(idx.ravel(), weights=wgt.ravel(), minlength=vp.size)
            gvol = flat.reshape(vp.shape)[:, 1:-1, 1:-1, 1:-1].astype(v.dtype)
        gpts = None
        if pts.requires_grad:
            gx = np.zeros((kb, n), dtype=v.dtype)
            gy = np.zeros((kb, n), dtype=v.dtype)
            gz = np.zeros((kb, n), dtype=v.dtype)
            for a in (0, 1):
                sx = 1.0 if a else -1.0
                for b in (0, 1):
                    sy = 1.0 if b else -1.0
                    for c in (0, 1):
                        sz = 1.0 if c else -1.0
                        cv = corners[(a, b, c)]
                        gx += sx * wy[b] * wz[c] * cv
                        gy += wx[a] * sy * wz[c] * cv
                        gz += wx[a] * wy[b] * sz * cv
            gpts = np.stack([gx * gm * scale[0], gy * gm * scale[1], gz * gm * scale[2]], axis=-1)
        return (gvol, gpts)

    return _emit(out, (vol, pts), backward)


# ---------------------------------------------------------------------------
# Transmittance scan (volume compositing)


def transmittance(atten: Tensor) -> Tensor:
    """Exclusive running product of per-sample attenuations.

    ``atten``: (R, N) values ``1 - opacity``; output (R, N+1) with
    ``T[:, 0] = 1`` and ``T[:, i] = prod_{j<i} atten[:, j]``.  The backward
    pass uses a division-free reverse scan, so exact zeros are safe.
    """
    x = atten.data
    r, n = x.shape
    out = np.empty((r, n + 1), dtype=x.dtype)
    out[:, 0] = 1.0
    np.cumprod(x, axis=1, out=out[:, 1:])

    def backward(g):
        gx = np.empty_like(x)
        bacc = g[:, n].copy()
        gx[:, n - 1] = out[:, n - 1] * bacc
        for j in range(n - 1, 0, -1):
            bacc = g[:, j] + x[:, j] * bacc
            gx[:, j - 1] = out[:, j - 1] * bacc
        return (gx,)

    return _emit(out, (atten,), backward)


# ---------------------------------------------------------------------------
# Image-space ops for the patch loss


def diff_axis(a: Tensor, axis: int) -> Tensor:
    """First differences along ``axis``."""
    d = a.data
    sl_hi = [slice(None)] * d.ndim
    sl_lo = [slice(None)] * d.ndim
    sl_hi[axis] = slice(1, None)
    sl_lo[axis] = slice(None, -1)
    out = d[tuple(sl_hi)] - d[tuple(sl_lo)]

    def backward(g):
        full = np.zeros_like(d)
        full[tuple(sl_hi)] += g
        full[tuple(sl_lo)] -= g
        return (full,)

    return _emit(out, (a,), backward)


def avgpool2(a: Tensor) -> Tensor:
    """2x2 mean pooling over axes 1 and 2 of a (B, H, W, C) tensor."""
    b, h, w, c = a.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2 needs even spatial dims, got {a.shape}")
    out = a.data.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(g):
        gg = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        return (gg,)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# Adam optimizer


class AdamState:
    """First/second moment buffers and step counter for one parameter group."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam update applied in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise DimensionError("adam_step: parameter/gradient/state count mismatch")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise DimensionError(f"adam_step: grad shape {g.shape} vs param {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block '{p.name or 'unnamed'}'")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Gradient checking


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
              max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central finite-difference gradients.

    ``f`` maps a tensor to a scalar tensor.  With ``max_coords`` set, a random
    subset of coordinates is probed (required for large parameter blocks).
    """
    if not (1e-6 <= h <= 1e-3):
        raise ValueError(f"gradcheck step h={h} outside [1e-6, 1e-3]")
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
        if y.size != 1:
            raise DimensionError("gradcheck target must be scalar")
        tape.backward(y)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.zero_grad()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        gen = rng or np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    worst = 0.0
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + h
        fp = float(f(x).data)
        flat[idx] = orig - h
        fm = float(f(x).data)
        flat[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise TrainingError(f"gradcheck: non-finite value at coordinate {int(idx)}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic.reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
