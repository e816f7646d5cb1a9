"""Reference implementations the tests compare against.

Deliberately naive: explicit loops, no shared code with the package.
"""

import numpy as np


def interval_scan(timestamps, n_seconds):
    """RR at each integer second by scanning every consecutive pulse pair."""
    t = list(timestamps)
    out = []
    for tau in range(1, n_seconds + 1):
        value = None
        for i in range(1, len(t)):
            if t[i - 1] <= tau < t[i]:
                value = t[i] - t[i - 1]
                break
        if value is None:
            value = t[1] - t[0] if tau < t[0] else t[-1] - t[-2]
        out.append(value)
    return np.array(out)


def conv_direct(x, taps, d, bias=0.0):
    """Single-channel dilated convolution summed term by term.

    Enumerates every (s, t) with s + d*t = n over centred tap offsets t and
    drops terms whose input index leaves the signal.
    """
    x = list(map(float, x))
    taps = list(map(float, taps))
    w = len(taps)
    half = (w - 1) // 2
    out = []
    for n in range(len(x)):
        acc = bias
        for s in range(len(x)):
            for j in range(w):
                t = j - half
                if s + d * t == n:
                    acc += x[s] * taps[j]
        out.append(acc)
    return np.array(out)


def conv_double_loop(x, taps, d, bias=0.0):
    """The defining sum as a literal loop over outputs and centred taps."""
    w = len(taps)
    half = (w - 1) // 2
    n_x = len(x)
    out = [0.0] * n_x
    for n in range(n_x):
        acc = float(bias)
        for j in range(w):
            s = n - d * (j - half)
            if 0 <= s < n_x:
                acc += float(x[s]) * float(taps[j])
        out[n] = acc
    return np.array(out)


def conv_direct_multi(x, weight, bias, d):
    """(C_in, L) x (C_out, C_in, w) -> (C_out, L) by per-channel direct sums."""
    c_out, c_in, _ = weight.shape
    out = np.zeros((c_out, x.shape[1]))
    for o in range(c_out):
        out[o] = bias[o]
        for c in range(c_in):
            out[o] += conv_direct(x[c], weight[o, c], d)
    return out


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Largest deviation relative to the larger gradient scale of the two."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def confusion_loop(pred, truth):
    tp = tn = fp = fn = 0
    for p, t in zip(pred, truth):
        if t == 1 and p == 1:
            tp += 1
        elif t == 0 and p == 0:
            tn += 1
        elif t == 0 and p == 1:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn
