"""NumPy/SciPy versions of the compiled kernels, used when the extension is unavailable."""

import numpy as np
from scipy.signal import lfilter, lfilter_zi


def highpass_fb(x, alpha):
    b = np.array([alpha, -alpha])
    a = np.array([1.0, -alpha])
    zi = lfilter_zi(b, a)
    fwd, _ = lfilter(b, a, x, axis=0, zi=np.outer(zi, x[0]))
    rev = fwd[::-1]
    bwd, _ = lfilter(b, a, rev, axis=0, zi=np.outer(zi, rev[0]))
    return np.ascontiguousarray(bwd[::-1])


def softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p, dp):
    return p * (dp - (p * dp).sum(axis=-1, keepdims=True))


def layernorm_forward(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1) + eps)
    xhat = xc * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def layernorm_backward(dy, xhat, rstd, gain):
    g = dy * gain
    dx = rstd[:, None] * (
        g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)
