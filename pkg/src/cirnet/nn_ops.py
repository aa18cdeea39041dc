"""Convolution, batch norm, activations, pooling and resizing.

All ops are differentiable through the graph in :mod:`cirnet.tensor`.
Convolution is cross-correlation (no kernel flip). Bilinear resizing uses the
align-corners-false convention.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _make, _note_kink, as_tensor, concat_channels, make_rng, matmul, reshape, tensor_mean, max_axis

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# primitives

def conv2d_raw(x: Tensor, weight: Tensor, bias: Tensor | None = None,
               stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate NCHW ``x`` with an (O, C, k, k) kernel, plus per-channel bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: zero spatial output for input {x.shape}, kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, Ho, Wo, C, kh, kw) -> rows of patches
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    need_gx = x.requires_grad

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gflat.T @ cols).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if not need_gx:
            return None, gw, gb
        # (C*k*k, N*Ho*Wo) so each tap slice is contiguous over (N, Ho, Wo)
        gcols = (wmat.T @ gflat.T).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((c, n, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx.transpose(1, 0, 2, 3), gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, backward, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalisation of NCHW input.

    Training mode normalises with (biased) batch statistics, keeps them inside
    the graph, and updates the running buffers in place with the unbiased
    variance. Eval mode is the fixed affine map given by the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    shp = (1, c, 1, 1)
    gd, bd = gamma.data.reshape(shp), beta.data.reshape(shp)
    if training:
        m = x.size // c
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(c) * (m / (m - 1)) if m > 1 else var.reshape(c)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * unbiased

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gxhat = g * gd
            gx = inv / m * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(shp) + eps)
        xhat = (x.data - running_mean.reshape(shp)) * inv

        def backward(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(xhat * gd + bd, (x, gamma, beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _note_kink(mask)
    # np.maximum keeps NaN visible instead of zeroing it
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows; sigmoid(0) is exactly 0.5
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    m = as_tensor(m)
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (m,), backward, "softmax")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C, 1, 1) channel means."""
    return tensor_mean(as_tensor(x), axis=(2, 3), keepdims=True)


def channel_mean(x: Tensor) -> Tensor:
    return tensor_mean(as_tensor(x), axis=1, keepdims=True)


def channel_max(x: Tensor) -> Tensor:
    return max_axis(as_tensor(x), axis=1)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """(N, in) x (out, in)^T -> (N, out)."""
    from .tensor import transpose
    out = matmul(as_tensor(x), transpose(as_tensor(weight)))
    return out + reshape(bias, (1, -1)) if bias is not None else out


@lru_cache(maxsize=128)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, align-corners-false.

    Output index i samples input coordinate (i + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1].
    """
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    mat.setflags(write=False)
    return mat


def _resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    ry = bilinear_matrix(x.shape[2], out_h)
    rx = bilinear_matrix(x.shape[3], out_w)
    out = np.einsum("ih,nchw,jw->ncij", ry, x.data, rx, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ry, g, rx, optimize=True),),
                 "bilinear")


def _avgpool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    fh, fw = h // out_h, w // out_w
    out = x.data.reshape(n, c, out_h, fh, out_w, fw).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, fh, axis=2), fw, axis=3) / (fh * fw),)

    return _make(out, (x,), backward, "avgpool")


def resize(x: Tensor, out_h: int, out_w: int, mode: str) -> Tensor:
    """``bilinear_up`` (out >= in) or ``avgpool_down`` (in divisible by out)."""
    x = as_tensor(x)
    h, w = x.shape[2], x.shape[3]
    if (out_h, out_w) == (h, w):
        return x
    if mode == "bilinear_up":
        if out_h < h or out_w < w:
            raise ValueError(f"bilinear_up cannot shrink {h}x{w} to {out_h}x{out_w}")
        return _resize_bilinear(x, out_h, out_w)
    if mode == "avgpool_down":
        if out_h > h or out_w > w or h % out_h or w % out_w:
            raise ValueError(f"avgpool_down needs {h}x{w} divisible by {out_h}x{out_w}")
        return _avgpool(x, out_h, out_w)
    raise ValueError(f"unknown resize mode {mode!r}")


def upsample_to(x: Tensor, h: int, w: int) -> Tensor:
    return resize(x, h, w, "bilinear_up")


def downsample_to(x: Tensor, h: int, w: int) -> Tensor:
    return resize(x, h, w, "avgpool_down")


# ---------------------------------------------------------------------------
# parameter containers

class Module:
    """Parameter container; parameters and buffers are found by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConvBnRelu(Module):
    """Convolution, optional batch norm, optional relu.

    ``bn=False`` drops the norm (and its parameters); ``activation`` is
    ``"relu"`` or ``"none"``.
    """

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, *,
                 bn: bool = True, activation: str = "relu", bias: bool = True,
                 rng: np.random.Generator | None = None, zero: bool = False):
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        if activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.padding = (k - 1) // 2
        self.activation = activation
        self.use_bn = bn
        shape = (c_out, c_in, k, k)
        if zero or rng is None:
            w = np.zeros(shape)
        else:
            w = fan_in_uniform(rng, shape, c_in * k * k)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        if bn:
            self.bn_gamma = Tensor(np.ones(c_out), requires_grad=True)
            self.bn_beta = Tensor(np.zeros(c_out), requires_grad=True)
            self.bn_running_mean = np.zeros(c_out)
            self.bn_running_var = np.ones(c_out)
        self.eps = BN_EPS
        self.momentum = BN_MOMENTUM

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ValueError(f"ConvBnRelu expects {self.c_in} channels, got {x.shape[1]}")
        out = conv2d_raw(x, self.weight, self.bias, self.stride, self.padding)
        if self.use_bn:
            out = batch_norm(out, self.bn_gamma, self.bn_beta, self.bn_running_mean,
                             self.bn_running_var, training, self.eps, self.momentum)
        if self.activation == "relu":
            out = relu(out)
        return out


def conv2d(x: Tensor, layer: ConvBnRelu, stride: int | None = None, padding: int | None = None,
           training: bool = False) -> Tensor:
    """Run ``layer`` on ``x``, optionally overriding its stride/padding."""
    if stride is None and padding is None:
        return layer(x, training)
    saved = layer.stride, layer.padding
    layer.stride = saved[0] if stride is None else stride
    layer.padding = saved[1] if padding is None else padding
    try:
        return layer(x, training)
    finally:
        layer.stride, layer.padding = saved


__all__ = [
    "BN_EPS", "BN_MOMENTUM", "ConvBnRelu", "Module", "batch_norm", "bilinear_matrix",
    "channel_max", "channel_mean", "concat_channels", "conv2d", "conv2d_raw", "downsample_to",
    "fan_in_uniform", "global_avg_pool", "linear", "make_rng", "relu", "resize", "sigmoid",
    "softmax_rows", "upsample_to",
]
