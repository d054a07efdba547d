"""Differentiable layer primitives built on :mod:`amtidin.autodiff.tensor`.

Each function computes its forward value with numpy and registers a
hand-derived backward closure.  Shapes follow the PyTorch conventions
(``(batch, channels, length)`` for sequences, ``(batch, features)`` for
dense activations).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from . import _kernels
from .tensor import ShapeError, Tensor, _needs_grad, _result, _wrap, concat, div, matmul

__all__ = [
    "linear",
    "conv1d",
    "batchnorm1d",
    "gelu",
    "elu",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "dropout",
    "adaptive_avg_pool1d",
    "grad_reverse",
    "spectral_normalize",
    "power_iteration",
    "concat",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight.T)
    if bias is not None:
        out = out + bias
    return out


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    channels_last: bool = False,
) -> Tensor:
    """1-D cross-correlation.

    ``x`` is ``(B, C_in, L)`` (or ``(C_in, L)``) and ``weight`` is
    ``(C_out, C_in, k)``.  With ``channels_last=True`` the input and output
    are laid out as ``(B, L, C)`` instead, which lets the im2col matrix be
    built from contiguous row blocks.
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    c_axis = 2 if channels_last else 1
    if xd.ndim != 3 or weight.ndim != 3 or xd.shape[c_axis] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} does not match weight {weight.shape}")
    if not channels_last:
        xd = xd.transpose(0, 2, 1)
    batch, length, c_in = xd.shape
    c_out, _, k = weight.shape
    l_out = (length + 2 * padding - k) // stride + 1
    if l_out < 1:
        raise ShapeError(f"conv1d: kernel {k} longer than padded input {length + 2 * padding}")
    xp = np.zeros((batch, length + 2 * padding, c_in), dtype=xd.dtype)
    xp[:, padding : padding + length] = xd
    sb, sl, sc = xp.strides
    # Row (b, l) of the column matrix is the contiguous block xp[b, l*stride : l*stride + k, :].
    cols = as_strided(xp, (batch, l_out, k * c_in), (sb, sl * stride, sc)).reshape(batch * l_out, k * c_in)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 1)).reshape(c_out, k * c_in)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(batch, l_out, c_out)
    if not channels_last:
        out = np.ascontiguousarray(out.transpose(0, 2, 1))
    if squeeze:
        out = out[0]

    def backward(g):
        g3 = g[None] if squeeze else g
        if not channels_last:
            g3 = g3.transpose(0, 2, 1)
        g2 = np.ascontiguousarray(g3).reshape(batch * l_out, c_out)
        gx = gw = gb = None
        if _needs_grad(weight):
            gw = np.ascontiguousarray((g2.T @ cols).reshape(c_out, k, c_in).transpose(0, 2, 1))
        if bias is not None and _needs_grad(bias):
            gb = g2.sum(axis=0)
        if _needs_grad(x):
            gcols = (g2 @ wmat).reshape(batch, l_out, k, c_in)
            gxp = np.zeros_like(xp)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gxp[:, j : j + span : stride] += gcols[:, :, j]
            gx = gxp[:, padding : padding + length]
            if not channels_last:
                gx = gx.transpose(0, 2, 1)
            gx = np.ascontiguousarray(gx)
            if squeeze:
                gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, backward)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    channels_last: bool = False,
) -> Tensor:
    """Batch normalization over ``(B, C)``, ``(B, C, L)`` or channels-last ``(B, L, C)``.

    In training mode the batch statistics are used and the running
    buffers are updated in place (unbiased variance, PyTorch convention).
    """
    if x.ndim not in (2, 3):
        raise ShapeError(f"batchnorm1d expects (B, C) or (B, C, L), got {x.shape}")
    if x.ndim == 2:
        axes, shape, c_axis = (0,), (1, -1), 1
    elif channels_last:
        axes, shape, c_axis = (0, 1), (1, 1, -1), 2
    else:
        axes, shape, c_axis = (0, 2), (1, -1, 1), 1
    if gamma.shape != (x.shape[c_axis],):
        raise ShapeError(f"batchnorm1d: {gamma.shape[0]} features vs input {x.shape}")
    count = x.size // x.shape[c_axis]
    if training and x.shape[0] < 2:
        raise ValueError("batchnorm1d in training mode needs a batch of at least 2")
    if x.dtype == np.float32 and c_axis == x.ndim - 1:
        return _batchnorm_rows_f32(x, gamma, beta, running_mean, running_var, training, momentum, eps)
    if training:
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        _update_running(running_mean, running_var, mu, var, count, momentum)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(shape)
    xhat = (x.data - mu.astype(x.dtype).reshape(shape)) * inv_std
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if _needs_grad(gamma) else None
        gb = g.sum(axis=axes) if _needs_grad(beta) else None
        gx = None
        if _needs_grad(x):
            gxhat = g * gamma.data.reshape(shape)
            if training:
                gx = (inv_std / count) * (
                    count * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def _update_running(running_mean, running_var, mu, var, count, momentum):
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * count / max(count - 1, 1)


def _batchnorm_rows_f32(x, gamma, beta, running_mean, running_var, training, momentum, eps):
    # Channels on the last axis: view as (rows, C) and use the compiled kernels.
    c = x.shape[-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, c)
    if training:
        mu = np.empty(c)
        var = np.empty(c)
        _kernels.bn_stats(x2, mu, var)
        _update_running(running_mean, running_var, mu, var, x2.shape[0], momentum)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    out = np.empty_like(x2)
    _kernels.bn_apply(x2, mu, inv_std, gamma.data.astype(np.float64), beta.data.astype(np.float64), out)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, c)
        if training:
            gx = np.empty_like(x2)
            gg = np.empty(c, dtype=np.float64)
            gb = np.empty(c, dtype=np.float64)
            _kernels.bn_backward_train(x2, g2, mu, inv_std, gamma.data.astype(np.float64), gx, gg, gb)
            return gx.reshape(x.shape), gg.astype(np.float32), gb.astype(np.float32)
        xhat = (x2 - mu) * inv_std
        gx = (g2 * (gamma.data * inv_std)).astype(np.float32)
        return gx.reshape(x.shape), (g2 * xhat).sum(axis=0).astype(np.float32), g2.sum(axis=0)

    return _result(out.reshape(x.shape), (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf.

    float32 inputs use a fused kernel (erf accurate to ~3e-7); float64
    inputs go through :func:`scipy.special.erf`.
    """
    if x.dtype == np.float32:
        flat = np.ascontiguousarray(x.data).reshape(-1)
        out = np.empty_like(flat)
        cdf = np.empty_like(flat)
        _kernels.gelu_forward_f32(flat, out, cdf)
        out = out.reshape(x.shape)

        def backward(g):
            gx = np.empty_like(flat)
            _kernels.gelu_backward_f32(flat, cdf, np.ascontiguousarray(g).reshape(-1), gx)
            return (gx.reshape(x.shape),)

        return _result(out, (x,), backward)

    cdf64 = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward64(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf64 + x.data * pdf),)

    return _result((x.data * cdf64).astype(x.dtype, copy=False), (x,), backward64)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = x.data < 0
    expm = np.expm1(np.minimum(x.data, 0))
    out = np.where(neg, alpha * expm, x.data)

    def backward(g):
        return (g * np.where(neg, alpha * (expm + 1.0), 1.0).astype(x.dtype),)

    return _result(out.astype(x.dtype, copy=False), (x,), backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax (not differentiable); used for reporting."""
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Fused with a max-subtraction so large logits stay finite.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if logits.shape[0] == 0:
        raise ShapeError("softmax_cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels outside [0, {logits.shape[1]})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = logsumexp - shifted[rows, labels]
    out = np.asarray(nll.mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(shifted - logsumexp[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / z.shape[0]),)

    return _result(out, (logits,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def adaptive_avg_pool1d(x: Tensor, axis: int = -1) -> Tensor:
    """Global average over the length axis: ``(B, C, L) -> (B, C)``.

    Pass ``axis=1`` for channels-last ``(B, L, C)`` input.
    """
    length = x.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / length, x.shape).astype(x.dtype),)

    return _result(out.astype(x.dtype, copy=False), (x,), backward)


def grad_reverse(x: Tensor) -> Tensor:
    """Identity forward, gradient negated on the way back."""
    return _result(x.data, (x,), lambda g: (-g,))


def power_iteration(w: np.ndarray, u: np.ndarray, n_iters: int) -> tuple[np.ndarray, np.ndarray]:
    """Refine the left singular vector estimate ``u`` in place; return ``(u, v)``."""
    v = None
    for _ in range(max(n_iters, 1)):
        v = w.T @ u
        v /= max(np.linalg.norm(v), 1e-12)
        u_new = w @ v
        u[:] = u_new / max(np.linalg.norm(u_new), 1e-12)
    return u, v


def spectral_normalize(weight: Tensor, u: np.ndarray, n_power_iters: int = 1) -> Tensor:
    """Return ``weight / sigma`` where ``sigma`` is the power-iteration estimate.

    ``u`` is updated in place so the estimate sharpens across calls.  The
    singular vectors are treated as constants; the dependence of ``sigma``
    on ``weight`` is differentiated.
    """
    if weight.ndim != 2:
        raise ShapeError(f"spectral_normalize expects a 2-D weight, got {weight.shape}")
    if not np.any(weight.data):
        raise ValueError("spectral_normalize: weight matrix is identically zero")
    u, v = power_iteration(weight.data, u, n_power_iters)
    sigma = matmul(matmul(Tensor(u.astype(weight.dtype)), weight), Tensor(v.astype(weight.dtype)))
    return div(weight, sigma)


def scalar(value: float, like: Tensor) -> Tensor:
    return _wrap(np.asarray(value, dtype=like.dtype))
