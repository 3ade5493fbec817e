"""Differentiable operations.

Every op returns a new :class:`Tensor` whose backward closure maps the
upstream gradient to one gradient per parent (``None`` where a parent does
not need one).  Binary elementwise ops require equal shapes; there is no
general broadcasting.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ShapeError
from .tensor import Tensor, as_tensor


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a, a.dtype), as_tensor(b, a.dtype)
    _check_same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a, a.dtype), as_tensor(b, a.dtype)
    _check_same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a, a.dtype), as_tensor(b, a.dtype)
    _check_same_shape(a, b, "mul")
    return Tensor._from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return Tensor._from_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def shift(a: Tensor, constant: float) -> Tensor:
    """Add a scalar constant."""
    constant = a.dtype.type(constant)
    return Tensor._from_op(a.data + constant, (a,), lambda g: (g,), "shift")


_ELEMENTWISE = {"add": add, "mul": mul, "sub": sub}


def elementwise(a: Tensor, b: Tensor | None = None, kind: str = "add", factor: float | None = None) -> Tensor:
    """Dispatch over the elementwise kinds ``add``, ``sub``, ``mul``, ``relu``, ``scale``."""
    if kind == "relu":
        return relu(a)
    if kind == "scale":
        if factor is None:
            raise ValueError("scale needs a factor")
        return scale(a, factor)
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if b is None:
        raise ValueError(f"{kind} needs two operands")
    return _ELEMENTWISE[kind](a, b)


# -- reductions, reshaping, indexing ---------------------------------------------


def total(a: Tensor) -> Tensor:
    """Sum of all entries."""
    shape = a.shape
    return Tensor._from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    inv = a.dtype.type(1.0 / n)
    return Tensor._from_op(
        np.asarray(a.data.mean(), dtype=a.dtype), (a,), lambda g: (np.full(shape, g * inv, dtype=g.dtype),), "mean"
    )


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._from_op(a.data.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


def take(a: Tensor, rows, cols) -> Tensor:
    """Gather ``a[rows[n], cols[n]]`` into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError(f"take: bad operands {a.shape}, rows {rows.shape}, cols {cols.shape}")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return Tensor._from_op(a.data[rows, cols], (a,), backward, "take")


# -- linear algebra -----------------------------------------------------------------


def dot(z1: Tensor, z2: Tensor) -> Tensor:
    """Inner product of two vectors (the grounding similarity)."""
    if z1.data.ndim != 1 or z1.shape != z2.shape:
        raise ShapeError(f"dot: need equal-length vectors, got {z1.shape} and {z2.shape}")
    return Tensor._from_op(
        np.asarray(z1.data @ z2.data, dtype=z1.dtype), (z1, z2), lambda g: (g * z2.data, g * z1.data), "dot"
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return Tensor._from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, D_in) and ``weight`` (D_out, D_in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


# -- convolution --------------------------------------------------------------------


def conv_output_length(length: int, kernel: int, stride: int, pad: int) -> int:
    return (length + 2 * pad - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """1-D cross-correlation with symmetric zero padding.

    ``x`` is (C_in, T) or (B, C_in, T); ``weight`` is (C_out, C_in, K).
    """
    if stride < 1 or pad < 0:
        raise ValueError(f"conv1d: stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    unbatched = x.data.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d: expected (B, C, T) input and (C_out, C_in, K) weight, got {x.shape}, {weight.shape}")
    B, C, T = xd.shape
    C_out, C_w, K = weight.shape
    if C != C_w:
        raise ShapeError(f"conv1d: input has {C} channels, weight expects {C_w}")
    if K < 1:
        raise ValueError("conv1d: kernel length must be >= 1")
    if T + 2 * pad < K:
        raise ShapeError(f"conv1d: padded length {T + 2 * pad} shorter than kernel {K}")
    T_out = conv_output_length(T, K, stride, pad)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    xp = np.ascontiguousarray(xp)
    s0, s1, s2 = xp.strides
    windows = as_strided(xp, (B, T_out, C, K), (s0, s2 * stride, s1, s2), writeable=False)
    cols = windows.reshape(B * T_out, C * K)
    w2 = weight.data.reshape(C_out, C * K)
    y = cols @ w2.T
    if bias is not None:
        y += bias.data
    out = np.ascontiguousarray(y.reshape(B, T_out, C_out).transpose(0, 2, 1))
    if unbatched:
        out = out[0]

    def backward(g):
        g3 = g[None] if unbatched else g
        g2 = g3.transpose(0, 2, 1).reshape(B * T_out, C_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, T_out, C, K)
            gxp = np.zeros((B, C, T + 2 * pad), dtype=g.dtype)
            span = stride * (T_out - 1) + 1
            for k in range(K):
                gxp[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            gx = gxp[:, :, pad : pad + T] if pad else gxp
            if unbatched:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv1d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation for the compact image encoder; ``x`` is (B, C, H, W)."""
    xd = x.data
    if xd.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected (B, C, H, W) input and 4-d weight, got {x.shape}, {weight.shape}")
    B, C, H, W = xd.shape
    C_out, C_w, KH, KW = weight.shape
    if C != C_w:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {C_w}")
    if H + 2 * pad < KH or W + 2 * pad < KW:
        raise ShapeError("conv2d: padded input smaller than kernel")
    H_out = conv_output_length(H, KH, stride, pad)
    W_out = conv_output_length(W, KW, stride, pad)
    xp = np.ascontiguousarray(np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd)
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(
        xp, (B, H_out, W_out, C, KH, KW), (s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False
    )
    cols = windows.reshape(B * H_out * W_out, C * KH * KW)
    w2 = weight.data.reshape(C_out, -1)
    y = cols @ w2.T
    if bias is not None:
        y += bias.data
    out = np.ascontiguousarray(y.reshape(B, H_out, W_out, C_out).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, C_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, H_out, W_out, C, KH, KW)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hs, ws = stride * (H_out - 1) + 1, stride * (W_out - 1) + 1
            for i in range(KH):
                for j in range(KW):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def maxpool1d(x: Tensor, kernel: int, stride: int, pad: int = 0) -> Tensor:
    """Temporal max pooling over (B, C, T); padded positions never win."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeError(f"maxpool1d expects (B, C, T), got {x.shape}")
    B, C, T = xd.shape
    if T + 2 * pad < kernel:
        raise ShapeError(f"maxpool1d: padded length {T + 2 * pad} shorter than kernel {kernel}")
    T_out = conv_output_length(T, kernel, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)), constant_values=-np.inf) if pad else xd
    xp = np.ascontiguousarray(xp)
    s0, s1, s2 = xp.strides
    windows = as_strided(xp, (B, C, T_out, kernel), (s0, s1, s2 * stride, s2), writeable=False)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    src = arg + np.arange(T_out) * stride - pad

    def backward(g):
        gx = np.zeros((B, C, T), dtype=g.dtype)
        bi, ci, _ = np.indices(src.shape)
        np.add.at(gx, (bi, ci, src), g)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool1d")


# -- normalisation and pooling ----------------------------------------------------


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of (C, T) or (B, C, T) input.

    In ``train`` mode statistics are taken over batch and time and the
    running buffers (if given) are updated in place with the unbiased
    variance.  ``infer`` mode uses the running buffers.
    """
    if eps <= 0:
        raise ValueError("batchnorm1d: eps must be > 0")
    unbatched = x.data.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or gamma.shape != (xd.shape[1],) or beta.shape != (xd.shape[1],):
        raise ShapeError(f"batchnorm1d: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    C = xd.shape[1]
    g_ = gamma.data.reshape(1, C, 1)
    b_ = beta.data.reshape(1, C, 1)

    if mode == "train":
        n = xd.shape[0] * xd.shape[2]
        mu = xd.mean(axis=(0, 2), keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=(0, 2), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        if running_mean is not None and running_var is not None:
            unbiased = var.reshape(C) * (n / max(n - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(C)
            running_var *= 1 - momentum
            running_var += momentum * unbiased

        def backward(g):
            g3 = g[None] if unbatched else g
            ggamma = (g3 * xhat).sum(axis=(0, 2))
            gbeta = g3.sum(axis=(0, 2))
            gx = None
            if x.requires_grad:
                dxhat = g3 * g_
                gx = (inv_std / n) * (
                    n * dxhat - dxhat.sum(axis=(0, 2), keepdims=True) - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                )
                gx = gx.astype(g.dtype, copy=False)
                if unbatched:
                    gx = gx[0]
            return gx, ggamma, gbeta

    elif mode == "infer":
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm1d: infer mode needs populated running statistics")
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, C, 1)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(1, C, 1)) * inv_std

        def backward(g):
            g3 = g[None] if unbatched else g
            gx = g3 * g_ * inv_std
            return (gx[0] if unbatched else gx), (g3 * xhat).sum(axis=(0, 2)), g3.sum(axis=(0, 2))

    else:
        raise ValueError(f"batchnorm1d: unknown mode {mode!r}")

    out = (xhat * g_ + b_).astype(xd.dtype, copy=False)
    if unbatched:
        out = out[0]
    return Tensor._from_op(out, (x, gamma, beta), backward, "batchnorm1d")


def temporal_mean_pool(x: Tensor) -> Tensor:
    """Mean over the last (time) axis: (C, T) -> (C,), (B, C, T) -> (B, C)."""
    T = x.shape[-1]
    if T == 0:
        raise ShapeError("temporal_mean_pool: input has no frames")
    shape = x.shape
    inv = x.dtype.type(1.0 / T)

    def backward(g):
        return (np.broadcast_to(g[..., None] * inv, shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=-1), (x,), backward, "temporal_mean_pool")


def spatial_mean_pool(x: Tensor) -> Tensor:
    """Mean over H and W of a (B, C, H, W) map."""
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_mean_pool expects (B, C, H, W), got {x.shape}")
    shape = x.shape
    inv = x.dtype.type(1.0 / (shape[2] * shape[3]))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), backward, "spatial_mean_pool")


# -- losses -------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (N, P) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    N = labels.shape[0]
    loss = -logp[np.arange(N), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(N), labels] -= 1
        return (p * (g / N),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")
