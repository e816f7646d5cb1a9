"""
Dilated 1-D convolution kernels, forward and reverse.

Two implementations of the same arithmetic live here: a vectorised numpy
path (one shifted-slice contraction per tap) and a numba ``@njit`` loop
nest. The one used by the rest of the package is picked once at import
time from the ``FENET_KERNELS`` environment variable:

    FENET_KERNELS=numba   JIT loops (default when numba imports)
    FENET_KERNELS=numpy   pure numpy, no compilation

Layouts: activations are ``(batch, channels, length)``, weights are
``(out_channels, in_channels, width)`` with an odd width and taps centred on
the output position. Tap ``j`` of a width-``w`` kernel sits at offset
``j - (w - 1) // 2`` and reads ``x[n - d * offset]``, so the sum is a true
convolution with zero "same" padding.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator


# ----------------------------------------------------------------------------
# numpy path
# ----------------------------------------------------------------------------


def conv1d_forward_numpy(x, weight, bias, d):
    batch, _, length = x.shape
    n_out, _, width = weight.shape
    pad = d * (width - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    out = np.empty((batch, n_out, length))
    out[...] = bias[None, :, None]
    for j in range(width):
        start = d * (width - 1 - j)
        out += np.einsum("oc,bcn->bon", weight[:, :, j], xp[:, :, start:start + length])
    return out


def conv1d_backward_numpy(grad_out, x, weight, d):
    length = x.shape[2]
    width = weight.shape[2]
    pad = d * (width - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    gp = np.pad(grad_out, ((0, 0), (0, 0), (pad, pad)))
    grad_x = np.zeros_like(x)
    grad_w = np.empty_like(weight)
    for j in range(width):
        start = d * (width - 1 - j)
        grad_w[:, :, j] = np.einsum("bon,bcn->oc", grad_out, xp[:, :, start:start + length])
        grad_x += np.einsum("oc,bon->bcn", weight[:, :, j], gp[:, :, d * j:d * j + length])
    grad_b = grad_out.sum(axis=(0, 2))
    return grad_x, grad_w, grad_b


# ----------------------------------------------------------------------------
# numba path
# ----------------------------------------------------------------------------


@njit(cache=True)
def conv1d_forward_numba(x, weight, bias, d):
    batch, n_in, length = x.shape
    n_out, _, width = weight.shape
    half = (width - 1) // 2
    out = np.empty((batch, n_out, length))
    for b in range(batch):
        for o in range(n_out):
            row = out[b, o]
            row[:] = bias[o]
            for c in range(n_in):
                src = x[b, c]
                for j in range(width):
                    shift = d * (j - half)
                    lo = max(0, shift)
                    hi = min(length, length + shift)
                    wv = weight[o, c, j]
                    # output n reads input n - shift; the inner loop is contiguous
                    for n in range(lo, hi):
                        row[n] += wv * src[n - shift]
    return out


@njit(cache=True)
def conv1d_backward_numba(grad_out, x, weight, d):
    batch, n_in, length = x.shape
    n_out, _, width = weight.shape
    half = (width - 1) // 2
    grad_x = np.zeros((batch, n_in, length))
    grad_w = np.zeros((n_out, n_in, width))
    grad_b = np.zeros(n_out)
    for b in range(batch):
        for o in range(n_out):
            g = grad_out[b, o]
            grad_b[o] += g.sum()
            for c in range(n_in):
                src = x[b, c]
                dst = grad_x[b, c]
                for j in range(width):
                    shift = d * (j - half)
                    lo = max(0, shift)
                    hi = min(length, length + shift)
                    wv = weight[o, c, j]
                    acc = 0.0
                    for n in range(lo, hi):
                        acc += g[n] * src[n - shift]
                        dst[n - shift] += g[n] * wv
                    grad_w[o, c, j] += acc
    return grad_x, grad_w, grad_b


_BACKENDS = {
    "numpy": (conv1d_forward_numpy, conv1d_backward_numpy),
    "numba": (conv1d_forward_numba, conv1d_backward_numba),
}


def _resolve_backend(name):
    name = (name or ("numba" if NUMBA_AVAILABLE else "numpy")).strip().lower()
    if name not in _BACKENDS:
        raise ValueError(f"FENET_KERNELS must be one of {sorted(_BACKENDS)}, got {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        name = "numpy"
    return name


BACKEND = _resolve_backend(os.environ.get("FENET_KERNELS"))
conv1d_forward, conv1d_backward = _BACKENDS[BACKEND]
