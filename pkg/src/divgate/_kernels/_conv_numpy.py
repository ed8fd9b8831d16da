"""NumPy fallback for the 2-D convolution kernels.

Patch extraction uses zero-copy stride tricks and the contraction is left to
BLAS.  The input gradient avoids a scatter-add by re-expressing it as a full
correlation of the (zero-stuffed, padded) output gradient with the flipped,
channel-swapped kernel.
"""
import numpy as np

BACKEND = "numpy"


def pad_nchw(x, pad):
    """Zero-pad H/W; faster than np.pad for this fixed layout."""
    if pad == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _patch_view(xp, kh, kw, sh, sw):
    # (N, C, Hp, Wp) -> read-only view (N, C, OH, OW, kh, kw)
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    sn, sc, shh, sww = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, shh * sh, sww * sw, shh, sww),
        writeable=False,
    )


def conv2d_forward(x, w, stride, pad):
    """Cross-correlate x (N,C,H,W) with w (OC,C,kh,kw) -> (N,OC,OH,OW)."""
    x = pad_nchw(x, pad)
    p = _patch_view(x, w.shape[2], w.shape[3], stride, stride)
    y = np.tensordot(p, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, OH, OW, OC)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_grad_weight(gy, x, stride, pad, kh, kw):
    """Kernel gradient for conv2d_forward; gy is (N,OC,OH,OW)."""
    x = pad_nchw(x, pad)
    p = _patch_view(x, kh, kw, stride, stride)
    return np.tensordot(gy, p, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_grad_input(gy, w, stride, pad, h, iw):
    """Input gradient for conv2d_forward; returns (N,C,h,iw).

    gy is dilated by the stride (zeros between entries), padded so that a
    stride-1 full correlation with the spatially flipped kernel (in/out
    channels swapped) lands exactly on the input grid.
    """
    n, oc, oh, ow = gy.shape
    kh, kw = w.shape[2], w.shape[3]
    if stride > 1:
        gd = np.zeros((n, oc, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=gy.dtype)
        gd[:, :, ::stride, ::stride] = gy
    else:
        gd = gy
    top = kh - 1 - pad
    left = kw - 1 - pad
    full = np.zeros((n, oc, h + kh - 1, iw + kw - 1), dtype=gy.dtype)
    full[:, :, top:top + gd.shape[2], left:left + gd.shape[3]] = gd
    gd = full
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward(gd, wt, 1, 0)
