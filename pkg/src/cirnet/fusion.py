"""Cross-modality interaction units.

* ``PaiUnit`` fuses RGB and depth encoder features at levels 3-5 and lets the
  spatial attention of each level gate the next one.
* ``CmwrUnit`` builds two HW x HW affinities (RGB-to-depth and RGB-D self),
  multiplies them, normalises the product row-wise and uses it to mix every
  stream spatially.
* ``IgfUnit`` blends the RGB-D decoder path with the two single-modality
  decoder features through a channel-wise importance gate.
"""
from __future__ import annotations

import numpy as np

from .attention import ChannelAttention, SpatialAttention
from .nn_ops import ConvBnRelu, Module, downsample_to, softmax_rows, upsample_to
from .tensor import Tensor, add, concat_channels, matmul, mul, reshape, sub, transpose

PAI_MODES = ("on", "off", "no_residual")
CMWR_MODES = ("on", "m1_only", "m2_only", "no_residual")
IGF_MODES = ("on", "add", "cat")

PAI_LEVELS = (3, 4, 5)


class PaiUnit(Module):
    """Encoder-side fusion. ``channels`` maps level -> (C_rgb, C_depth, C_rgbd).

    Mode ``off`` is the ablation baseline: a single concat-conv at level 5.
    """

    def __init__(self, channels: dict[int, tuple[int, int, int]], mode: str = "on",
                 rng: np.random.Generator | None = None):
        if mode not in PAI_MODES:
            raise ValueError(f"unknown PAI mode {mode!r}; expected one of {PAI_MODES}")
        self.mode = mode
        levels = (5,) if mode == "off" else PAI_LEVELS
        self.fuse_conv = {i: ConvBnRelu(channels[i][0] + channels[i][1], channels[i][2], 3, rng=rng)
                          for i in levels}
        if mode != "off":
            self.sa = SpatialAttention(rng)

    def fuse(self, f_r: dict[int, Tensor], f_d: dict[int, Tensor], training: bool) -> dict[int, Tensor]:
        out = {}
        for i, conv in self.fuse_conv.items():
            if f_r[i].shape[2:] != f_d[i].shape[2:] or f_r[i].shape[0] != f_d[i].shape[0]:
                raise ValueError(f"PAI level {i}: RGB {f_r[i].shape} and depth {f_d[i].shape} differ spatially")
            out[i] = conv(concat_channels([f_r[i], f_d[i]]), training)
        return out

    def __call__(self, f_r: dict[int, Tensor], f_d: dict[int, Tensor],
                 training: bool = False) -> dict[int, Tensor]:
        fused = self.fuse(f_r, f_d, training)
        if self.mode == "off":
            return fused
        out = {3: fused[3]}
        # level 4 is guided by the raw fused level 3, level 5 by the updated level 4
        guide = fused[3]
        for i in (4, 5):
            h, w = fused[i].shape[2:]
            att = self.sa(downsample_to(guide, h, w))
            gated = mul(fused[i], att)
            out[i] = gated if self.mode == "no_residual" else add(gated, fused[i])
            guide = out[i]
        return out


def pai_forward(f_r, f_d, unit: PaiUnit, training: bool = False) -> dict[int, Tensor]:
    return unit(f_r, f_d, training)


class CmwrUnit(Module):
    def __init__(self, channels: int, mode: str = "on", rng: np.random.Generator | None = None):
        if mode not in CMWR_MODES:
            raise ValueError(f"unknown cmWR mode {mode!r}; expected one of {CMWR_MODES}")
        if channels % 2:
            raise ValueError(f"cmWR needs an even channel count, got {channels}")
        self.channels, self.mode = channels, mode
        half = channels // 2
        kw = dict(bn=False, activation="none", rng=rng)
        self.embed_theta = ConvBnRelu(channels, half, 1, **kw)
        self.embed_xi = ConvBnRelu(channels, half, 1, **kw)
        self.embed_phi = ConvBnRelu(channels, half, 1, **kw)
        self.embed_psi = ConvBnRelu(channels, half, 1, **kw)

    def affinities(self, f_r: Tensor, f_d: Tensor, f_rgbd: Tensor) -> tuple[Tensor, Tensor]:
        """Row-softmaxed M1 (RGB vs depth) and M2 (RGB-D self), each (N, HW, HW)."""
        n, _, h, w = f_rgbd.shape
        half = self.channels // 2

        def flat(t):
            return reshape(t, (n, half, h * w))

        m1 = softmax_rows(matmul(transpose(flat(self.embed_theta(f_r))), flat(self.embed_xi(f_d))))
        m2 = softmax_rows(matmul(transpose(flat(self.embed_phi(f_rgbd))), flat(self.embed_psi(f_rgbd))))
        return m1, m2

    def weights(self, f_r: Tensor, f_d: Tensor, f_rgbd: Tensor) -> Tensor:
        """Row-stochastic global dependency weights W, (N, HW, HW)."""
        self._check(f_r, f_d, f_rgbd)
        m1, m2 = self.affinities(f_r, f_d, f_rgbd)
        if self.mode == "m1_only":
            return softmax_rows(m1)
        if self.mode == "m2_only":
            return softmax_rows(m2)
        return softmax_rows(mul(m1, m2))

    def _check(self, *feats: Tensor) -> None:
        shapes = {f.shape for f in feats}
        if len(shapes) != 1:
            raise ValueError(f"cmWR streams must share one shape, got {sorted(shapes)}")
        if feats[0].shape[1] != self.channels:
            raise ValueError(f"cmWR expects {self.channels} channels, got {feats[0].shape[1]}")

    def __call__(self, f_r: Tensor, f_d: Tensor, f_rgbd: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        wts = self.weights(f_r, f_d, f_rgbd)
        n, c, h, w = f_r.shape
        wt = transpose(wts)
        out = []
        for f in (f_r, f_d, f_rgbd):
            mixed = reshape(matmul(reshape(f, (n, c, h * w)), wt), (n, c, h, w))
            out.append(mixed if self.mode == "no_residual" else add(mixed, f))
        return tuple(out)


def cmwr_refine(f_r: Tensor, f_d: Tensor, f_rgbd: Tensor, unit: CmwrUnit):
    return unit(f_r, f_d, f_rgbd)


class IgfUnit(Module):
    """Decoder fusion at one level with ``channels`` C; the previous level has ``prev_channels``.

    H (2C channels) is projected to C by a 1x1 layer before gating; the
    upsampled previous feature is projected to C when its width differs.
    """

    def __init__(self, channels: int, prev_channels: int | None = None, reduction: int = 4,
                 mode: str = "on", rng: np.random.Generator | None = None):
        if mode not in IGF_MODES:
            raise ValueError(f"unknown IGF mode {mode!r}; expected one of {IGF_MODES}")
        c = channels
        prev_channels = c if prev_channels is None else prev_channels
        self.channels, self.prev_channels, self.mode = c, prev_channels, mode
        self.rgb_skip_conv = ConvBnRelu(2 * c, c, 3, rng=rng)
        self.depth_skip_conv = ConvBnRelu(2 * c, c, 3, rng=rng)
        self.prev_conv = ConvBnRelu(prev_channels, c, 1, rng=rng) if prev_channels != c else None
        if mode == "cat":
            self.out_conv = ConvBnRelu(3 * c, c, 3, rng=rng)
            return
        self.h_proj = ConvBnRelu(2 * c, c, 1, rng=rng)
        if mode == "on":
            self.merge_conv = ConvBnRelu(3 * c, c, 1, rng=rng)
            self.ca = ChannelAttention(c, reduction, rng)
        self.out_conv = ConvBnRelu(c, c, 3, rng=rng)

    def gather(self, f_r_dec: Tensor, f_d_dec: Tensor, f_r_skip: Tensor, f_d_skip: Tensor,
               f_prev: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        """Return (H, up(f_prev)) at the current level."""
        h, w = f_r_dec.shape[2:]
        for t in (f_d_dec, f_r_skip, f_d_skip):
            if t.shape[2:] != (h, w):
                raise ValueError(f"IGF spatial mismatch: {t.shape} vs {f_r_dec.shape}")
        if f_prev.shape[2] > h or f_prev.shape[3] > w:
            raise ValueError(f"IGF: previous feature {f_prev.shape} larger than level {h}x{w}")
        up = upsample_to(f_prev, h, w)
        if self.prev_conv is not None:
            up = self.prev_conv(up, training)
        fused_r = self.rgb_skip_conv(concat_channels([f_r_dec, f_r_skip]), training)
        fused_d = self.depth_skip_conv(concat_channels([f_d_dec, f_d_skip]), training)
        return concat_channels([fused_r, fused_d]), up

    def importance(self, h_feat: Tensor, up: Tensor, training: bool) -> Tensor:
        """P = CA(merge_conv([H, up])): (N, C, 1, 1) in (0, 1)."""
        return self.ca(self.merge_conv(concat_channels([h_feat, up]), training))

    def pre_conv(self, h_feat: Tensor, up: Tensor, training: bool, p: Tensor | None = None) -> Tensor:
        if self.mode == "cat":
            return concat_channels([h_feat, up])
        hp = self.h_proj(h_feat, training)
        if self.mode == "add":
            return add(hp, up)
        if p is None:
            p = self.importance(h_feat, up, training)
        return add(mul(p, hp), mul(sub(1.0, p), up))

    def __call__(self, f_r_dec: Tensor, f_d_dec: Tensor, f_r_skip: Tensor, f_d_skip: Tensor,
                 f_prev: Tensor, training: bool = False) -> Tensor:
        h_feat, up = self.gather(f_r_dec, f_d_dec, f_r_skip, f_d_skip, f_prev, training)
        return self.out_conv(self.pre_conv(h_feat, up, training), training)


def igf_step(f_r_dec, f_d_dec, f_r_skip, f_d_skip, f_prev, unit: IgfUnit, training: bool = False) -> Tensor:
    return unit(f_r_dec, f_d_dec, f_r_skip, f_d_skip, f_prev, training)
