"""Pure numpy fallback kernels.

Same contracts as the compiled lane in ``_core``; used when the extension
is unavailable or when ``BONENET_PURE=1``. Handles arbitrary stride, which
the compiled convolution does not.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_fwd(xp, w, bias, stride=1):
    """Cross-correlation over a pre-padded input. xp [B,C,Hp,Wp], w [O,C,kh,kw]."""
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(xp, kh, kw, stride)
    out = np.einsum("bcijuv,ocuv->boij", win, w, optimize=True)
    if bias is not None:
        out += bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_bwd_w(xp, dy, kh, kw, stride=1):
    win = _windows(xp, kh, kw, stride)
    return np.ascontiguousarray(np.einsum("bcijuv,boij->ocuv", win, dy, optimize=True))


def conv2d_bwd_x(dy, w, pad, in_hw, stride=1):
    """Gradient w.r.t. the unpadded input, shape [B,C,H,W]."""
    B, O, Ho, Wo = dy.shape
    _, C, kh, kw = w.shape
    H, W = in_hw
    if stride > 1:
        dil = np.zeros((B, O, (Ho - 1) * stride + 1, (Wo - 1) * stride + 1))
        dil[:, :, ::stride, ::stride] = dy
        dy = dil
    dyp = np.pad(dy, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dxp = conv2d_fwd(dyp, wflip, None, stride=1)
    return np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W])


def maxpool2d_fwd(x, win, stride):
    B, C, H, W = x.shape
    wv = _windows(x, win, win, stride)
    Ho, Wo = wv.shape[2], wv.shape[3]
    flat = wv.reshape(B, C, Ho, Wo, win * win)
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    ii = np.arange(Ho)[:, None] * stride + local // win
    jj = np.arange(Wo)[None, :] * stride + local % win
    idx = (ii * W + jj).astype(np.int64)
    return np.ascontiguousarray(out), np.ascontiguousarray(idx)


def maxpool2d_bwd(dy, idx, H, W):
    B, C = dy.shape[0], dy.shape[1]
    dx = np.zeros((B, C, H * W))
    np.add.at(
        dx.reshape(B * C, H * W),
        (np.repeat(np.arange(B * C), idx[0, 0].size), idx.reshape(-1)),
        dy.reshape(-1),
    )
    return dx.reshape(B, C, H, W)
