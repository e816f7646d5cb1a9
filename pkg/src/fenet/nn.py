"""
Differentiable building blocks in plain numpy, each with a hand-written
reverse pass, and an Adam optimiser over dicts of named arrays.

Activations are batched: ``(batch, channels, length)`` for convolutional
maps and ``(batch, features)`` for dense layers. Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fenet import _kernels
from fenet.errors import InvalidInputError, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{name}: non-finite values")


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, None, :], 1
    if x.ndim == 2:
        return x[None], 2
    if x.ndim == 3:
        return x, 3
    raise InvalidInputError(f"expected a 1-, 2- or 3-D map, got shape {x.shape}")


def _kernel3(weight):
    w = np.asarray(weight, dtype=float)
    if w.ndim == 1:
        w = w[None, None, :]
    if w.ndim != 3 or w.shape[2] % 2 == 0:
        raise InvalidInputError(f"kernel must be (out, in, odd width), got {w.shape}")
    return w


# ----------------------------------------------------------------------------
# Dilated convolution
# ----------------------------------------------------------------------------


def conv1d_dilated(x, weight, bias=None, d: int = 1):
    """Centred, zero-padded dilated convolution; output length equals input length.

    ``out[o, n] = bias[o] + sum_{c, j} weight[o, c, j] * x[c, n - d * (j - h)]``
    with ``h = (width - 1) // 2``. A 1-D ``x`` with a 1-D ``weight`` is
    treated as a single channel. The result keeps the rank of ``x``.
    """
    if int(d) != d or d < 1:
        raise InvalidInputError(f"dilation must be a positive integer, got {d}")
    xb, rank = _as_batch(x)
    w = _kernel3(weight)
    if xb.shape[1] != w.shape[1]:
        raise InvalidInputError(f"input has {xb.shape[1]} channels, kernel expects {w.shape[1]}")
    if xb.shape[2] < 1:
        raise InvalidInputError("empty input")
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, dtype=float).reshape(w.shape[0])
    _check_finite("conv1d_dilated", xb, w, b)
    out = _kernels.conv1d_forward(np.ascontiguousarray(xb), np.ascontiguousarray(w), b, int(d))
    if rank == 1:
        return out[0, 0]
    if rank == 2:
        return out[0]
    return out


def conv1d_dilated_backward(grad_out, x, weight, d: int = 1):
    """Returns ``(grad_input, grad_weight, grad_bias)`` shaped like the forward arguments."""
    xb, rank = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    w_in = np.asarray(weight, dtype=float)
    w = _kernel3(weight)
    if gb.shape != (xb.shape[0], w.shape[0], xb.shape[2]):
        raise InvalidInputError(f"upstream gradient shape {gb.shape} does not match forward")
    if int(d) != d or d < 1:
        raise InvalidInputError(f"dilation must be a positive integer, got {d}")
    gx, gw, gbias = _kernels.conv1d_backward(
        np.ascontiguousarray(gb), np.ascontiguousarray(xb), np.ascontiguousarray(w), int(d)
    )
    if rank == 1:
        gx = gx[0, 0]
    elif rank == 2:
        gx = gx[0]
    return gx, gw.reshape(w_in.shape), gbias


# ----------------------------------------------------------------------------
# Pointwise and structural ops
# ----------------------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


def residual_add(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"residual_add shape mismatch {a.shape} vs {b.shape}")
    return a + b


def concat(rows, axis: int = -2):
    """Stack equal-length maps along the channel axis."""
    rows = [np.asarray(r, dtype=float) for r in rows]
    if not rows:
        raise InvalidInputError("nothing to concatenate")
    if len({r.shape[-1] for r in rows}) != 1:
        raise InvalidInputError("concat needs rows of equal length")
    return np.concatenate(rows, axis=axis)


def softmax(z, axis: int = -1):
    z = np.asarray(z, dtype=float)
    if z.size == 0 or z.shape[axis] == 0:
        raise InvalidInputError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def dropout(x, rate: float, train: bool, rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None at inference."""
    if not 0.0 <= rate < 1.0:
        raise InvalidInputError("dropout rate must lie in [0, 1)")
    if not train or rate == 0.0:
        return x, None
    rng = np.random.default_rng() if rng is None else rng
    mask = (rng.random(np.shape(x)) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def fully_connected(x, weight, bias):
    """``x`` is (batch, in), ``weight`` is (out, in)."""
    return x @ weight.T + bias


def fully_connected_backward(grad_out, x, weight):
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


# ----------------------------------------------------------------------------
# Batch normalisation
# ----------------------------------------------------------------------------


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2)


def _bn_shape(x, v):
    return v[None, :] if x.ndim == 2 else v[None, :, None]


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, train=True,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalisation over batch (and length for 3-D maps).

    In train mode the running statistics, if given, are updated in place and
    the returned cache feeds :func:`batch_norm_backward`. In inference mode
    the running statistics are used and the cache is None.
    """
    x = np.asarray(x, dtype=float)
    axes = _bn_axes(x)
    if not train:
        inv = 1.0 / np.sqrt(running_var + eps)
        y = (x - _bn_shape(x, running_mean)) * _bn_shape(x, inv * gamma) + _bn_shape(x, beta)
        return y, None
    if x.shape[0] < 2:
        raise InvalidInputError("batch_norm in train mode needs a batch of at least 2")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_shape(x, mean)) * _bn_shape(x, inv)
    y = xhat * _bn_shape(x, gamma) + _bn_shape(x, beta)
    if running_mean is not None:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    return y, (xhat, inv, gamma)


def batch_norm_backward(grad_out, cache):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv, gamma = cache
    axes = _bn_axes(xhat)
    count = xhat.size / xhat.shape[1]
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    gxhat = grad_out * _bn_shape(xhat, gamma)
    grad_x = _bn_shape(xhat, inv / count) * (
        count * gxhat
        - _bn_shape(xhat, gxhat.sum(axis=axes))
        - xhat * _bn_shape(xhat, (gxhat * xhat).sum(axis=axes))
    )
    return grad_x, grad_gamma, grad_beta


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update, applied to ``params`` in place.

    All gradients are checked before anything is touched, so a non-finite
    gradient leaves both the parameters and the state unchanged.
    """
    for name, g in grads.items():
        if name not in params:
            raise InvalidInputError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise InvalidInputError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step aborted")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
