"""Differentiable operations on :class:`~s3tunet.tensor.Tensor`.

Every function takes Tensors (or array-likes, promoted to constants) and
returns a Tensor. Each gradient rule is written next to its forward pass.
Feature maps are NCHW; convolution is cross-correlation with zero padding.
"""

from __future__ import annotations

import builtins
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_result

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
# Largest float64 below 1 and smallest normal positive value keep sigmoid strictly inside (0, 1).
_SIG_HI = np.nextafter(1.0, 0.0)
_SIG_LO = np.finfo(np.float64).tiny


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


_branches = threading.local()


@contextmanager
def record_branches():
    """Collect the branch pattern of every piecewise op (relu, clip, maxpool).

    Two evaluations with equal patterns lie on the same smooth piece, which
    is what a finite-difference probe needs to be meaningful.
    """
    outer = getattr(_branches, "log", None)
    _branches.log = log = []
    try:
        yield log
    finally:
        _branches.log = outer


def _note_branch(pattern: np.ndarray) -> None:
    log = getattr(_branches, "log", None)
    if log is not None:
        log.append(pattern)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_result(-x.data, (x,), lambda g: (-g,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _note_branch(mask)
    # np.maximum keeps NaN visible; a where() on the mask would zero it
    return make_result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    """Logistic function, clipped so every output lies strictly in (0, 1)."""
    x = as_tensor(x)
    out = np.clip(0.5 * (1.0 + np.tanh(0.5 * x.data)), _SIG_LO, _SIG_HI)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    with np.errstate(over="ignore"):  # x^2 overflow only sends exp to its 0 limit
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return make_result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _note_branch(np.sign(x.data - lo) + np.sign(x.data - hi))
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    return make_result(
        out, (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                   _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- shape

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    """Permute axes (reverse them when ``axes`` is None)."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


permute = transpose


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, builtins.slice)) or i is None or i is Ellipsis
               for i in items)


def slice(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    return make_result(
        out, tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def pad(x, widths, value: float = 0.0) -> Tensor:
    """Constant padding; ``widths`` is one (before, after) pair per axis."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise ShapeError(f"pad: need {x.ndim} (before, after) pairs, got {len(widths)}")
    out = np.pad(x.data, widths, constant_values=value)
    crop = tuple(builtins.slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return make_result(out, (x,), lambda g: (g[crop].copy(),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Per-position affine map ``x @ weight.T + bias`` over the last axis.

    ``weight`` has shape (out_features, in_features).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs.append(bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, weight.shape[1]) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_result(out, inputs, backward)


# ---------------------------------------------------------------- normalisation

def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax. Positions where ``mask`` is False get probability 0.

    Every slice along ``axis`` must keep at least one unmasked entry.
    """
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({d},)")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gh = g * gain.data
        gx = inv / d * (d * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gain, bias), backward)


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation of an NCHW map.

    In training mode batch statistics are used and the running buffers are
    updated in place (running variance uses the unbiased estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm2d: parameter shapes must be ({c},)")
    bshape = (1, c, 1, 1)
    axes = (0, 2, 3)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm2d: training mode needs a batch of at least 2 samples")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        xc = x.data - running_mean.reshape(bshape)
        var = running_var.copy()
    inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gh = g * gamma.data.reshape(bshape)
        if training:
            gx = inv / m * (m * gh - gh.sum(axis=axes, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gh * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- convolution

def _window_slices(i, j, dilation, stride, ho, wo):
    hs = builtins.slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride)
    ws = builtins.slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride)
    return hs, ws


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    """(C*kh*kw, N*ho*wo) patch matrix; positions stay innermost for long contiguous runs."""
    eff_h, eff_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (eff_h, eff_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def _conv_dense_fwd(xp, w, stride, dilation, ho, wo):
    n = xp.shape[0]
    o = w.shape[0]
    out = w.reshape(o, -1) @ _im2col(xp, w.shape[2], w.shape[3], stride, dilation, ho, wo)
    return np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))


def _conv_dense_bwd(g, x, xp, w, stride, pad, dilation, need_x, need_w):
    """Gradients w.r.t. the unpadded input ``x`` and the kernel."""
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    gx = gw = None
    if need_w:
        gw = (g2 @ _im2col(xp, kh, kw, stride, dilation, ho, wo).T).reshape(w.shape)
    if need_x:
        h, wd = x.shape[2:]
        back_pad = dilation * (kh - 1) - pad
        if stride == 1 and kh == kw and back_pad >= 0:
            # Input gradient of a stride-1 correlation is a correlation with the flipped kernel.
            flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gp = np.pad(g, ((0, 0), (0, 0), (back_pad, back_pad), (back_pad, back_pad))) if back_pad else g
            gx = _conv_dense_fwd(gp, flipped, 1, dilation, h, wd)
        else:
            gcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    hs, ws = _window_slices(i, j, dilation, stride, ho, wo)
                    gxp[:, :, hs, ws] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])
    return gx, gw


# Depthwise loops run per sample chunk so each chunk's working set stays cache-sized.
_DW_CHUNK_BYTES = 1 << 19


def _chunks(n, per_sample_bytes):
    step = max(1, _DW_CHUNK_BYTES // max(1, per_sample_bytes))
    return [builtins.slice(i, min(n, i + step)) for i in range(0, n, step)]


def _conv_depthwise_fwd(xp, w, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    _, _, kh, kw = w.shape
    out = np.zeros((n, c, ho, wo))
    for sl in _chunks(n, out[0].nbytes):
        acc, src = out[sl], xp[sl]
        tmp = np.empty_like(acc)
        for i in range(kh):
            for j in range(kw):
                hs, ws = _window_slices(i, j, dilation, stride, ho, wo)
                np.multiply(src[:, :, hs, ws], w[:, 0, i, j].reshape(1, c, 1, 1), out=tmp)
                acc += tmp
    return out


def _conv_depthwise_bwd(g, x, xp, w, stride, pad, dilation, need_x, need_w):
    n, c = xp.shape[:2]
    _, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    gw = np.zeros_like(w) if need_w else None
    gxp = np.zeros_like(xp) if need_x else None
    for sl in _chunks(n, g[0].nbytes):
        gc, src = g[sl], xp[sl]
        tmp = np.empty_like(gc)
        for i in range(kh):
            for j in range(kw):
                hs, ws = _window_slices(i, j, dilation, stride, ho, wo)
                if need_w:
                    np.multiply(gc, src[:, :, hs, ws], out=tmp)
                    gw[:, 0, i, j] += tmp.sum(axis=(0, 2, 3))
                if need_x:
                    np.multiply(gc, w[:, 0, i, j].reshape(1, c, 1, 1), out=tmp)
                    gxp[sl, :, hs, ws] += tmp
    gx = None
    if need_x:
        h, wd = x.shape[2:]
        gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])
    return gx, gw


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIHW kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError(
            f"conv2d: input channels {c}, kernel {w.shape} and groups={groups} are inconsistent"
        )
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} (dilation {dilation}) does not fit padded input "
            f"{h + 2 * pad}x{wd + 2 * pad}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    depthwise = groups == c and cg == 1 and o == c
    if depthwise:
        out = _conv_depthwise_fwd(xp, w.data, stride, dilation, ho, wo)
    elif groups == 1:
        out = _conv_dense_fwd(xp, w.data, stride, dilation, ho, wo)
    else:
        og = o // groups
        out = np.concatenate([
            _conv_dense_fwd(xp[:, k * cg:(k + 1) * cg], w.data[k * og:(k + 1) * og],
                            stride, dilation, ho, wo)
            for k in range(groups)
        ], axis=1)
    inputs = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)

    def backward(g):
        need_x, need_w = x.requires_grad, w.requires_grad
        if depthwise:
            gx, gw = _conv_depthwise_bwd(g, x.data, xp, w.data, stride, pad, dilation, need_x, need_w)
        elif groups == 1:
            gx, gw = _conv_dense_bwd(g, x.data, xp, w.data, stride, pad, dilation, need_x, need_w)
        else:
            og = o // groups
            parts = [
                _conv_dense_bwd(g[:, k * og:(k + 1) * og], x.data[:, k * cg:(k + 1) * cg],
                                xp[:, k * cg:(k + 1) * cg], w.data[k * og:(k + 1) * og],
                                stride, pad, dilation, need_x, need_w)
                for k in range(groups)
            ]
            gx = np.concatenate([p[0] for p in parts], axis=1) if need_x else None
            gw = np.concatenate([p[1] for p in parts], axis=0) if need_w else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_result(out, inputs, backward)


def conv_transpose2d(x, w, bias=None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel size equal to the stride.

    ``w`` has shape (in_channels, out_channels, k, k); the output is k times
    larger along H and W. The default k = 2 doubles the spatial size.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} does not match kernel {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or k != stride:
        raise ShapeError("conv_transpose2d: only square kernels with kernel size == stride")
    n, c, h, wd = x.shape
    o = w.shape[1]
    out = np.tensordot(x.data, w.data, axes=([1], [0]))  # n, h, w, o, k, k
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 4, 2, 5)).reshape(n, o, h * k, wd * k)
    inputs = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)

    def backward(g):
        g6 = g.reshape(n, o, h, k, wd, k)
        gx = gw = None
        if x.requires_grad:
            gx = np.tensordot(g6, w.data, axes=([1, 3, 5], [1, 2, 3]))  # n, h, w, c
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        if w.requires_grad:
            gw = np.tensordot(x.data, g6, axes=([0, 2, 3], [0, 2, 4]))  # c, o, k, k
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_result(out, inputs, backward)


def maxpool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; H and W must be multiples of k."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial size {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)[..., None]
    _note_branch(idx)
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_result(out, (x,), backward)
