"""Pure-numpy reference versions of the compiled kernels.

All arrays are NHWC float64. Convolutions use "same" zero padding with an odd
kernel size ``k``; patch rows are laid out as ``(dy, dx, channel)``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k):
    B, H, W, C = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # B, H, W, C, k, k
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, k * k * C)


def col2im(cols, B, H, W, C, k):
    p = (k - 1) // 2
    c6 = cols.reshape(B, H, W, k, k, C)
    out = np.zeros((B, H + 2 * p, W + 2 * p, C))
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + H, dx:dx + W, :] += c6[:, :, :, dy, dx, :]
    return np.ascontiguousarray(out[:, p:p + H, p:p + W, :])


def maxpool2_forward(x):
    B, H, W, C = x.shape
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    xp = np.full((B, 2 * Ho, 2 * Wo, C), -np.inf)
    xp[:, :H, :W, :] = x
    win = xp.reshape(B, Ho, 2, Wo, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, 4)
    # np.argmax keeps the first maximum: row-major order inside the window
    a = win.argmax(axis=-1)
    out = np.take_along_axis(win, a[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(Ho)[None, :, None, None] + a // 2
    cols = 2 * np.arange(Wo)[None, None, :, None] + a % 2
    return np.ascontiguousarray(out), (rows * W + cols).astype(np.int64)


def maxpool2_backward(grad, idx, H, W):
    B, Ho, Wo, C = grad.shape
    out = np.zeros((B, H * W, C))
    b = np.arange(B)[:, None, None, None]
    c = np.arange(C)[None, None, None, :]
    # each input cell is the argmax of at most one window, so no collisions
    out[np.broadcast_to(b, idx.shape), idx, np.broadcast_to(c, idx.shape)] = grad
    return out.reshape(B, H, W, C)
