"""Spatial operators with forward and backward passes.

2-D convolution (cross-correlation), transposed convolution, 2x2 average and
max pooling, global average pooling, and a fixed depthwise Gaussian blur with
reflect padding.  Convolutions are lowered to BLAS contractions via patch
views; backward passes scatter through strided slices so nothing larger than
the padded input is ever materialized per tap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _from_op


@dataclass
class ConvParams:
    """Learnable weights of one (transposed) convolution layer.

    weight: (c_out, c_in, k_h, k_w), bias: (1, c_out, 1, 1).
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]


def conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlate x (n, c_in, h, w) with p.weight, add bias.

    Output spatial dims follow floor((dim + 2*pad - k) / stride) + 1 and must
    be at least 1.
    """
    n, ci, h, w = x.shape
    co, ci_w, kh, kw = p.weight.shape
    s, pad = p.stride, p.padding
    if ci != ci_w:
        raise ValueError(f"conv2d: input has {ci} channels, weight expects {ci_w}")
    ho, wo = conv_out_dim(h, kh, s, pad), conv_out_dim(w, kw, s, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: non-positive output dims ({ho}, {wo}) for input {h}x{w}")

    if pad:
        xp = np.zeros((n, ci, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    patches = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # materialize im2col once; the same buffer serves the weight gradient
    cols = np.ascontiguousarray(patches.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, ci * kh * kw)
    w2 = p.weight.data.reshape(co, ci * kh * kw)
    out = (cols @ w2.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2) + p.bias.data

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        gb = g2.sum(axis=0).reshape(p.bias.shape)
        gw = (g2.T @ cols).reshape(p.weight.shape)
        gcols = (g2 @ w2).reshape(n, ho, wo, ci, kh, kw)
        # channels-last scatter: strided slices never collide within one tap
        gxp = np.zeros((n, hp, wp, ci), dtype=g.dtype)
        for u in range(kh):
            for v in range(kw):
                gxp[:, u:u + s * ho:s, v:v + s * wo:s, :] += gcols[:, :, :, :, u, v]
        gx = gxp.transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:pad + h, pad:pad + w]
        return np.ascontiguousarray(gx), gw, gb

    return _from_op(out, "conv2d", (x, p.weight, p.bias), backward_fn)


def conv_transpose2d(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution: output dims = (in - 1)*stride + k - 2*pad.

    The gradient w.r.t. the input is a strided conv2d with the same kernel.
    """
    n, ci, h, w = x.shape
    co, ci_w, kh, kw = p.weight.shape
    s, pad = p.stride, p.padding
    if ci != ci_w:
        raise ValueError(f"conv_transpose2d: input has {ci} channels, weight expects {ci_w}")
    hf, wf = (h - 1) * s + kh, (w - 1) * s + kw
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d: non-positive output dims ({ho}, {wo})")

    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, ci)
    w2 = np.ascontiguousarray(p.weight.data.transpose(1, 0, 2, 3)).reshape(ci, co * kh * kw)
    # per-input-pixel kernel stamps, scattered channels-last over the canvas
    stamps = (x2 @ w2).reshape(n, h, w, co, kh, kw)
    canvas = np.zeros((n, hf, wf, co), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            canvas[:, u:u + s * h:s, v:v + s * w:s, :] += stamps[:, :, :, :, u, v]
    out = canvas.transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:pad + ho, pad:pad + wo]
    out = out + p.bias.data

    def backward_fn(g):
        gb = g.sum(axis=(0, 2, 3)).reshape(p.bias.shape)
        gcanvas = np.zeros((n, hf, wf, co), dtype=g.dtype)
        gcanvas[:, pad:pad + ho, pad:pad + wo, :] = g.transpose(0, 2, 3, 1)
        gstamps = np.empty((n, h, w, co, kh, kw), dtype=g.dtype)
        for u in range(kh):
            for v in range(kw):
                gstamps[:, :, :, :, u, v] = gcanvas[:, u:u + s * h:s, v:v + s * w:s, :]
        g2 = gstamps.reshape(n * h * w, co * kh * kw)
        gx = np.ascontiguousarray((g2 @ w2.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2))
        gw = np.ascontiguousarray((x2.T @ g2).reshape(ci, co, kh, kw).transpose(1, 0, 2, 3))
        return gx, gw, gb

    return _from_op(out, "conv_transpose2d", (x, p.weight, p.bias), backward_fn)


def _require_even_spatial(op: str, x: Tensor) -> None:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"{op}: spatial dims must be even, got {x.shape[2]}x{x.shape[3]}")


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2/stride-2 mean pooling; backward spreads grad/4 over each window."""
    _require_even_spatial("avg_pool2d", x)
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward_fn(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (gx * np.asarray(0.25, dtype=g.dtype),)

    return _from_op(out, "avg_pool2d", (x,), backward_fn)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling; grad routes to the first max in scan order."""
    _require_even_spatial("max_pool2d", x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)  # argmax takes the first maximum: row-major tie rule
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _from_op(out, "max_pool2d", (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (n, c, h, w) -> (n, c, 1, 1)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / (h * w)

    def backward_fn(g):
        return (np.broadcast_to(g * np.asarray(inv, dtype=g.dtype), x.shape).copy(),)

    return _from_op(out, "global_avg_pool", (x,), backward_fn)


# -- fixed Gaussian blur -----------------------------------------------------


def gaussian_taps_1d(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D kernel is their outer product."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"gaussian kernel size must be odd, got {size}")
    if sigma <= 0:
        raise ValueError(f"gaussian sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_taps(size: int, sigma: float) -> np.ndarray:
    """Normalized size x size Gaussian filter taps (float64)."""
    g1 = gaussian_taps_1d(size, sigma)
    taps = np.outer(g1, g1)
    taps /= taps.sum()
    # nudge the centre so the taps sum to exactly 1.0
    c = size // 2
    taps[c, c] += 1.0 - taps.sum()
    return taps


@dataclass
class GaussianKernel:
    """Fixed (non-learnable) blur kernel."""

    size: int = 5
    sigma: float = 1.0
    taps: np.ndarray = field(init=False)
    taps_1d: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.taps = gaussian_taps(self.size, self.sigma)
        self.taps_1d = gaussian_taps_1d(self.size, self.sigma)


def reflect_index(length: int, pad: int) -> np.ndarray:
    """Source index for each position of a reflect-padded axis.

    Reflection does not repeat the edge sample; out-of-range positions bounce
    with period 2*(length - 1).  A length-1 axis maps everything to 0.
    """
    pos = np.arange(-pad, length + pad)
    if length == 1:
        return np.zeros_like(pos)
    period = 2 * (length - 1)
    j = np.mod(pos, period)
    return np.where(j < length, j, period - j)


def _fold_axis(arr: np.ndarray, idx: np.ndarray, length: int, pad: int, axis: int) -> np.ndarray:
    """Adjoint of reflect padding along one axis: add border grads to sources."""
    sl = [slice(None)] * arr.ndim
    sl[axis] = slice(pad, pad + length)
    out = arr[tuple(sl)].copy()
    for i in list(range(pad)) + list(range(pad + length, length + 2 * pad)):
        dst = [slice(None)] * arr.ndim
        dst[axis] = idx[i]
        sl[axis] = i
        out[tuple(dst)] += arr[tuple(sl)]
    return out


def gaussian_blur(x: Tensor, k: GaussianKernel) -> Tensor:
    """Depthwise blur with reflect padding; shape-preserving, no kernel grad.

    Runs as two separable 1-D passes (columns then rows).  The taps are
    symmetric, so the backward pass is the adjoint pair of the same passes.
    """
    n, c, h, w = x.shape
    pad = k.size // 2
    g1 = k.taps_1d.astype(x.dtype)
    cidx = reflect_index(w, pad)
    ridx = reflect_index(h, pad)

    xc = x.data[:, :, :, cidx]
    tmp = np.zeros_like(x.data)
    for v in range(k.size):
        tmp += g1[v] * xc[:, :, :, v:v + w]
    tr = tmp[:, :, ridx, :]
    out = np.zeros_like(x.data)
    for u in range(k.size):
        out += g1[u] * tr[:, :, u:u + h, :]

    def backward_fn(g):
        gr = np.zeros((n, c, h + 2 * pad, w), dtype=g.dtype)
        for u in range(k.size):
            gr[:, :, u:u + h, :] += g1[u] * g
        t = _fold_axis(gr, ridx, h, pad, axis=2)
        gc = np.zeros((n, c, h, w + 2 * pad), dtype=g.dtype)
        for v in range(k.size):
            gc[:, :, :, v:v + w] += g1[v] * t
        return (_fold_axis(gc, cidx, w, pad, axis=3),)

    return _from_op(out, "gaussian_blur", (x,), backward_fn)
