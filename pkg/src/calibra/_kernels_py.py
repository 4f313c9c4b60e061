"""Pure numpy implementations of the hot kernels.

Used whenever the compiled ``_kernels_c`` extension is unavailable or
``CALIBRA_PURE=1`` is set. Layout conventions are shared with the compiled
version so the two are interchangeable bit for bit.
"""
import numpy as np


def im2col(x, k, stride, padding):
    """Unfold ``x`` of shape (N, C, H, W) into (C*k*k, N*Ho*Wo) columns."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        i_end = i + stride * ho
        for j in range(k):
            j_end = j + stride * wo
            cols[:, i, j] = x[:, :, i:i_end:stride, j:j_end:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def col2im(cols, shape, k, stride, padding):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n, c, h, w = shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        i_end = i + stride * ho
        for j in range(k):
            j_end = j + stride * wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def maxpool_forward(x, window):
    """Max over non-overlapping windows; returns (out, argmax-within-window)."""
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    blocks = x.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, window * window)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(grad, idx, window):
    n, c, ho, wo = grad.shape
    blocks = np.zeros((n, c, ho, wo, window * window), dtype=grad.dtype)
    np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(blocks.reshape(n, c, ho * window, wo * window))
