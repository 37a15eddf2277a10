"""NumPy fallback for the hot conv/pool kernels.

Mirrors the call contract of the compiled ``edgeshield._kernels`` extension:
convolution inputs arrive already zero-padded, gradients are returned on the
padded shape, and max-pool argmax indices are flat offsets into the (H, W)
plane with ties broken by first occurrence in row-major window order.

The convolutions here go through im2col + matmul so the fallback stays fast
enough to train on; the compiled extension uses direct loops instead. The two
backends agree to floating-point round-off, not bit-for-bit.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(xp, kh, kw, stride):
    # (N, I, OH, OW, KH, KW) view over the padded input, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(xp, w, bias, stride):
    """Correlate padded input (N,I,HP,WP) with filters (O,I,KH,KW)."""
    n, i, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    cols = _im2col(xp, kh, kw, stride)
    oh, ow = cols.shape[2], cols.shape[3]
    flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, i * kh * kw)
    out = flat @ w.reshape(o, -1).T
    out += bias
    return np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))


def conv2d_backward_input(gout, w, xp_shape, stride):
    """Gradient w.r.t. the padded input."""
    n, o, oh, ow = gout.shape
    _, i, kh, kw = w.shape
    gflat = gout.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    gcols = (gflat @ w.reshape(o, -1)).reshape(n, oh, ow, i, kh, kw)
    gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # (N, I, KH, KW, OH, OW)
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    for ky in range(kh):
        for kx in range(kw):
            gxp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += gcols[
                :, :, ky, kx
            ]
    return gxp

def conv2d_backward_weight(gout, xp, kshape, stride):
    """Gradient w.r.t. the filters (O,I,KH,KW)."""
    n, o, oh, ow = gout.shape
    _, kh, kw = kshape[1:]
    cols = _im2col(xp, kh, kw, stride)
    i = cols.shape[1]
    flat = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, i * kh * kw)
    gflat = gout.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    return np.ascontiguousarray((gflat.T @ flat).reshape(kshape))


def maxpool2d_forward(x, window, stride):
    """Max over window; returns (out, argmax) with flat (H,W)-plane offsets."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, window * window)
    local = np.argmax(flat, axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    oy = np.arange(oh)[:, None] * stride
    ox = np.arange(ow)[None, :] * stride
    arg = (oy[None, None] + local // window) * w + (ox[None, None] + local % window)
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool2d_backward(gout, arg, x_shape):
    """Route gradient to the argmax positions (accumulating on overlap)."""
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h * w), dtype=gout.dtype)
    np.add.at(
        gx,
        (
            np.arange(n)[:, None, None, None],
            np.arange(c)[None, :, None, None],
            arg,
        ),
        gout,
    )
    return gx.reshape(x_shape)
