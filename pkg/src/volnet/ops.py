"""Differentiable kernels.

Each kernel computes its forward value with numpy and, when a tape is active,
records a closure mapping the output gradient to input gradients.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from volnet.tensor import ShapeError, Tensor, current_tape


class GeometryError(ValueError):
    """Raised when a convolution/pooling geometry yields an empty output."""


# Upper bound on the im2col scratch buffer; larger problems are chunked.
IM2COL_BUDGET_BYTES = 64 * 2**20


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-dim broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        "mul", ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # Gradient at exactly 0 is 0. np.maximum propagates NaN so bad inputs reach the loss.
    mask = a.data > 0
    return _emit("relu", np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``mul`` or ``relu``."""
    if op == "relu":
        return relu(a)
    if b is None:
        raise ValueError(f"{op} needs two operands")
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def sigmoid(a: Tensor) -> Tensor:
    y = stable_sigmoid(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype if x.dtype.kind == "f" else np.float64)


# -- reductions --------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return _emit("sum", out, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else math.prod(np.array(a.shape)[np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _emit("matmul", ad @ bd, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), back)


# -- shape plumbing ----------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("permute", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _emit("concat", out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter."""
    src, dt = x.shape, x.dtype
    out = np.array(x.data[index])

    def back(g):
        full = np.zeros(src, dtype=dt)
        full[index] = g
        return (full,)

    return _emit("slice", out, (x,), back)


# -- convolution / pooling / normalization -----------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def conv3d_output_shape(spatial, kernel, stride, padding) -> tuple[int, int, int]:
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(spatial, kernel, stride, padding))


def _chunks(n_batch: int, depth_out: int, bytes_per_slice: int):
    """Yield (n0, n1, d0, d1) blocks whose im2col buffer fits the budget."""
    per_sample = bytes_per_slice * depth_out
    if per_sample <= IM2COL_BUDGET_BYTES:
        step = max(1, IM2COL_BUDGET_BYTES // max(per_sample, 1))
        for n0 in range(0, n_batch, step):
            yield n0, min(n0 + step, n_batch), 0, depth_out
        return
    dstep = max(1, IM2COL_BUDGET_BYTES // max(bytes_per_slice, 1))
    for n in range(n_batch):
        for d0 in range(0, depth_out, dstep):
            yield n, n + 1, d0, min(d0 + dstep, depth_out)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation over ``[N, C, D, H, W]`` with zero padding.

    Lowered to a weight-matrix x patch-matrix product (im2col), chunked over
    batch/depth to bound scratch memory.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    n, c, *spatial = x.shape
    k, wc, *kernel = weight.shape
    if wc != c:
        raise ShapeError(f"conv3d: input has {c} channels but weight {weight.shape} expects {wc}")
    if min(stride) < 1:
        raise GeometryError(f"conv3d: strides must be >= 1, got {stride}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} does not match {k} filters")
    out_sp = conv3d_output_shape(spatial, kernel, stride, padding)
    if min(out_sp) < 1:
        raise GeometryError(
            f"conv3d: input {tuple(spatial)} with kernel {tuple(kernel)}, stride {stride}, "
            f"padding {padding} gives output {out_sp}"
        )
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_sp
    dt = np.result_type(x.dtype, weight.dtype)
    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pads) if any(padding) else x.data
    wmat = weight.data.reshape(k, -1)
    ckv = c * kd * kh * kw
    slice_bytes = ho * wo * ckv * dt.itemsize
    chunks = list(_chunks(n, do, slice_bytes))

    def taps(n0, n1, d0, d1):
        base = d0 * sd
        for i in range(kd):
            for j in range(kh):
                for l in range(kw):
                    idx = (slice(n0, n1), slice(None), slice(base + i, base + i + sd * (d1 - d0), sd),
                           slice(j, j + sh * ho, sh), slice(l, l + sw * wo, sw))
                    yield i, j, l, idx

    def cols_for(n0, n1, d0, d1):
        # Rows ordered (C, kd, kh, kw) to match weight.reshape(K, -1); columns are output positions.
        cols = np.empty((c, kd, kh, kw, n1 - n0, d1 - d0, ho, wo), dtype=xp.dtype)
        for i, j, l, idx in taps(n0, n1, d0, d1):
            cols[:, i, j, l] = xp[idx].transpose(1, 0, 2, 3, 4)
        return cols.reshape(ckv, -1)

    out = np.empty((k, n, do, ho, wo), dtype=dt)
    saved = None
    for n0, n1, d0, d1 in chunks:
        cols = cols_for(n0, n1, d0, d1)
        out[:, n0:n1, d0:d1] = (wmat @ cols).reshape(k, n1 - n0, d1 - d0, ho, wo)
        if len(chunks) == 1:
            saved = cols
    if bias is not None:
        out += bias.data.reshape(k, 1, 1, 1, 1)
    out_ncdhw = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    del out

    def back(g):
        gk = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4))
        gw = np.zeros_like(wmat)
        gx = np.zeros(xp.shape, dtype=x.dtype)
        for n0, n1, d0, d1 in chunks:
            gm = gk[:, n0:n1, d0:d1].reshape(k, -1)
            gw += gm @ (saved if saved is not None else cols_for(n0, n1, d0, d1)).T
            gcols = (wmat.T @ gm).reshape(c, kd, kh, kw, n1 - n0, d1 - d0, ho, wo)
            for i, j, l, idx in taps(n0, n1, d0, d1):
                gx[idx] += gcols[:, i, j, l].transpose(1, 0, 2, 3, 4)
        pd, ph, pw = padding
        gx = gx[:, :, pd : gx.shape[2] - pd, ph : gx.shape[3] - ph, pw : gx.shape[4] - pw]
        grads = [np.ascontiguousarray(gx), gw.reshape(weight.shape).astype(weight.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)).astype(bias.dtype, copy=False))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv3d", out_ncdhw, inputs, back)


def avgpool3d_global(x: Tensor) -> Tensor:
    """Mean over the spatial axes of ``[N, C, D, H, W]`` -> ``[N, C]``."""
    if x.ndim != 5 or min(x.shape[2:]) < 1:
        raise ShapeError(f"avgpool3d_global expects [N,C,D,H,W] with D,H,W >= 1, got {x.shape}")
    shape = x.shape
    count = shape[2] * shape[3] * shape[4]
    # Contiguous input keeps the summation order independent of upstream layout.
    out = np.ascontiguousarray(x.data).mean(axis=(2, 3, 4))

    def back(g):
        return (np.broadcast_to((g / count)[:, :, None, None, None], shape).astype(x.dtype),)

    return _emit("avgpool3d_global", out, (x,), back)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __repr__(self) -> str:
        return f"BatchNormState(channels={self.running_mean.size})"


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of ``[N, C, D, H, W]``.

    Train mode normalizes with the (biased) batch statistics and folds them
    into ``state`` as ``(1 - momentum) * running + momentum * batch``, using
    the unbiased variance for the running estimate. Eval mode uses ``state``.
    """
    if x.ndim != 5:
        raise ShapeError(f"batchnorm3d expects [N,C,D,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm3d: gamma {gamma.shape} / beta {beta.shape} do not match {c} channels")
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    xd = x.data
    gd = gamma.data.reshape(bshape)
    if train:
        m = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu.reshape(c)
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * unbiased

        def back(g):
            gxhat = g * gd
            gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
            return gx.astype(x.dtype, copy=False), (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        mu = state.running_mean.reshape(bshape).astype(xd.dtype)
        inv = (1.0 / np.sqrt(state.running_var.reshape(bshape) + eps)).astype(xd.dtype)
        xhat = (xd - mu) * inv

        def back(g):
            return (g * gd * inv).astype(x.dtype, copy=False), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * gd + beta.data.reshape(bshape)).astype(x.dtype, copy=False)
    return _emit("batchnorm3d", out, (x, gamma, beta), back)
