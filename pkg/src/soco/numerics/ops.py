"""Differentiable ops used by the model.

Image tensors are NCHW.  All ops validate shapes up front and raise
``InvalidInputError`` on mismatch; non-finite results raise ``NumericError``
from ``make_node``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from soco.errors import InvalidInputError
from soco.numerics.tensor import Tensor, as_tensor, make_node

BN_EPS = 1e-5
NORM_EPS = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidInputError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise / reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                     "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data + c, (a,), lambda g: (g,), "add_scalar")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise InvalidInputError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x) -> Tensor:
    """Collapse all but the leading axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidInputError("concat: empty input")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidInputError(f"concat: {exc}") from None
    splits = np.cumsum(sizes)[:-1]
    return make_node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take(x, index: int) -> Tensor:
    """``x[index]`` along the leading axis."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return make_node(x.data[index], (x,), back, "take")


def l2_normalize(x, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    clipped = norm <= eps

    def back(g):
        proj = np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(clipped, g / denom, (g - y * proj) / denom),)

    return make_node(y, (x,), back, "l2_normalize")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias with weight laid out (out_features, in_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidInputError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise InvalidInputError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)
    xd, wd = x.data, weight.data

    def back(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_node(out, parents, back, "linear")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, weight laid out (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise InvalidInputError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise InvalidInputError("conv2d: stride must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidInputError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise InvalidInputError(f"conv2d: bias {bias.shape} for {o} filters")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    xp_shape = xp.shape

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = (g2 @ cols.T).reshape(weight.shape)
        dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_node(np.ascontiguousarray(out), parents, back, "conv2d")


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first element."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise InvalidInputError(f"max_pool2d: need NCHW with even H, W; got {x.shape}")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        dx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(n, c, h, w),)

    return make_node(out, (x,), back, "max_pool2d")


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise InvalidInputError(f"upsample_nearest2x: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return make_node(out, (x,),
                     lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample_nearest2x")


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise InvalidInputError(f"global_avg_pool: need NCHW, got {x.shape}")
    return mean(x, axis=(2, 3))


def batch_norm(x, gamma, beta, running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None, training: bool = True,
               momentum: float = 0.1, eps: float = BN_EPS) -> Tensor:
    """Batch normalization over all axes except the channel axis 1.

    Works for (N, C) and (N, C, H, W).  In training mode batch moments are
    used and, when buffers are supplied, updated in place as
    ``(1 - momentum) * running + momentum * batch`` (unbiased variance).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise InvalidInputError(f"batch_norm: need (N,C) or (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidInputError(f"batch_norm: affine params {gamma.shape}/{beta.shape} for {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.size // c

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if running_mean is not None and running_var is not None:
            unbiased = var.reshape(c) * (m / (m - 1)) if m > 1 else var.reshape(c)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise InvalidInputError("batch_norm: eval mode needs running statistics")
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), back, "batch_norm")


def gather_rows(x, index: Sequence[int]) -> Tensor:
    """``x[index]`` for an integer index list along the leading axis."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(x.data[idx], (x,), back, "gather_rows")
