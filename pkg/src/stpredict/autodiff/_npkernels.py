"""Pure-numpy hot kernels.

Reference implementation of the kernel API; the Cython module ``_ckernels``
exposes the same four functions and is preferred when it is built.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

NAME = "numpy"


def _im2col(x, k, pad):
    B, C, H, W = x.shape
    if k == 1:
        return x.reshape(B, C, H * W)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (H, W), axis=(2, 3))  # B, C, k, k, H, W
    return win.reshape(B, C * k * k, H * W)


def conv2d_forward(x, w, b, pad):
    """Same-padded cross-correlation. Returns ``(out, cols)``."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    cols = _im2col(x, k, pad)
    out = np.matmul(w.reshape(O, -1), cols)
    if b is not None:
        out += b[:, None]
    return out.reshape(B, O, H, W), cols


def conv2d_backward(gout, x, w, cols, pad, need_x=True, need_w=True):
    B, O, H, W = gout.shape
    k = w.shape[2]
    g = gout.reshape(B, O, H * W)
    gx = gw = gb = None
    if need_w:
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gb = g.sum(axis=(0, 2))
    if need_x:
        if k == 1:
            gx = np.matmul(w.reshape(O, -1).T, g).reshape(x.shape)
        else:
            # gradient of a same-padded correlation is a correlation with the
            # spatially flipped, channel-transposed kernel
            wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = conv2d_forward(gout, wt, None, pad)
    return gx, gw, gb


def gate_forward(pre, mem):
    """``sigmoid(f) * mem + sigmoid(i) * tanh(g)`` with ``pre = [g, i, f]``."""
    C = mem.shape[1]
    act = np.empty_like(pre)
    np.tanh(pre[:, :C], out=act[:, :C])
    expit(pre[:, C:], out=act[:, C:])
    g, i, f = act[:, :C], act[:, C:2 * C], act[:, 2 * C:]
    return f * mem + i * g, act


def gate_backward(gout, mem, act):
    C = mem.shape[1]
    g, i, f = act[:, :C], act[:, C:2 * C], act[:, 2 * C:]
    gpre = np.empty_like(act)
    gpre[:, :C] = gout * i * (1 - g * g)
    gpre[:, C:2 * C] = gout * g * i * (1 - i)
    gpre[:, 2 * C:] = gout * mem * f * (1 - f)
    return gpre, gout * f
