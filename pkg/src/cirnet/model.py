"""Three-stream network assembly, joint BCE loss, Adam, and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attention import SmarUnit
from .autodiff import backward
from .fusion import CmwrUnit, IgfUnit, PaiUnit
from .nn_ops import ConvBnRelu, Module, sigmoid, upsample_to
from .tensor import Tensor, clamp, concat_channels, log, make_rng, mul, no_grad, sub, tensor_mean

LEVELS = (1, 2, 3, 4, 5)
ABLATION_CHOICES = {
    "pai": ("on", "off", "no_residual"),
    "smar": ("on", "off", "ca_only", "sa_only", "sa_ca", "no_residual"),
    "cmwr": ("on", "off", "m1_only", "m2_only", "no_residual"),
    "igf": ("on", "off", "add", "cat"),
}
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, ...] = (16, 24, 32, 48, 64)
    # total downsampling factor of each encoder level relative to the input
    strides: tuple[int, ...] = (2, 4, 8, 16, 16)
    stage_convs: int = 2
    reduction: int = 4
    pai: str = "on"
    smar: str = "on"
    cmwr: str = "on"
    igf: str = "on"
    zero_heads: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.channels) != 5 or len(self.strides) != 5:
            raise ValueError("channel and stride schedules need exactly 5 levels")
        prev = 1
        for s in self.strides:
            if s % prev or s < prev:
                raise ValueError(f"stride schedule {self.strides} must be nondecreasing multiples")
            prev = s
        if self.stage_convs < 1:
            raise ValueError("stage_convs must be >= 1")
        for c in self.channels:
            if c % self.reduction:
                raise ValueError(f"channel {c} not divisible by reduction {self.reduction}")
        if self.channels[4] % 2:
            raise ValueError("level-5 channel count must be even for cmWR")
        for key, choices in ABLATION_CHOICES.items():
            if getattr(self, key) not in choices:
                raise ValueError(f"{key} must be one of {choices}, got {getattr(self, key)!r}")

    @property
    def min_divisor(self) -> int:
        return max(self.strides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def baseline(cls, **kw) -> "ModelConfig":
        """All-units-off configuration: concat at level 5, no middleware, plain decoder."""
        return cls(pai="off", smar="off", cmwr="off", igf="off", **kw)


class BackboneStub(Module):
    """Five conv stages; stage i reduces resolution to 1/strides[i]."""

    def __init__(self, in_channels: int, cfg: ModelConfig, rng: np.random.Generator):
        self.stages = []
        c_prev, s_prev = in_channels, 1
        for c, s in zip(cfg.channels, cfg.strides):
            step = s // s_prev
            if step not in (1, 2):
                raise ValueError(f"stride schedule {cfg.strides} needs per-stage steps of 1 or 2")
            convs = [ConvBnRelu(c_prev, c, 3, stride=step, rng=rng)]
            convs += [ConvBnRelu(c, c, 3, rng=rng) for _ in range(cfg.stage_convs - 1)]
            self.stages.append(convs)
            c_prev, s_prev = c, s

    def named_parameters(self, prefix=""):
        for i, convs in enumerate(self.stages):
            for j, conv in enumerate(convs):
                yield from conv.named_parameters(f"{prefix}stages.{i}.{j}.")

    def named_buffers(self, prefix=""):
        for i, convs in enumerate(self.stages):
            for j, conv in enumerate(convs):
                yield from conv.named_buffers(f"{prefix}stages.{i}.{j}.")

    def __call__(self, x: Tensor, training: bool = False) -> dict[int, Tensor]:
        feats = {}
        for level, convs in zip(LEVELS, self.stages):
            for conv in convs:
                x = conv(x, training)
            feats[level] = x
        return feats


class ModalityDecoder(Module):
    """UNet-style decoder: d5 = conv(f5'), d_i = conv([up(d_{i+1}), f_i])."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        ch = dict(zip(LEVELS, cfg.channels))
        self.convs = {5: ConvBnRelu(ch[5], ch[5], 3, rng=rng)}
        for i in (4, 3, 2, 1):
            self.convs[i] = ConvBnRelu(ch[i + 1] + ch[i], ch[i], 3, rng=rng)

    def __call__(self, top: Tensor, skips: dict[int, Tensor], training: bool = False) -> dict[int, Tensor]:
        d = {5: self.convs[5](top, training)}
        for i in (4, 3, 2, 1):
            h, w = skips[i].shape[2:]
            d[i] = self.convs[i](concat_channels([upsample_to(d[i + 1], h, w), skips[i]]), training)
        return d


class CirNet(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = make_rng(cfg.seed)
        ch = dict(zip(LEVELS, cfg.channels))
        self.rgb_backbone = BackboneStub(3, cfg, rng)
        self.depth_backbone = BackboneStub(1, cfg, rng)
        self.pai = PaiUnit({i: (ch[i], ch[i], ch[i]) for i in (3, 4, 5)}, cfg.pai, rng)
        if cfg.smar != "off":
            mode = "3d" if cfg.smar == "on" else cfg.smar
            self.smar_r = SmarUnit(ch[5], cfg.reduction, mode, rng)
            self.smar_d = SmarUnit(ch[5], cfg.reduction, mode, rng)
            self.smar_rgbd = SmarUnit(ch[5], cfg.reduction, mode, rng)
        if cfg.cmwr != "off":
            self.cmwr = CmwrUnit(ch[5], cfg.cmwr, rng)
        self.rgb_decoder = ModalityDecoder(cfg, rng)
        self.depth_decoder = ModalityDecoder(cfg, rng)
        self.igf = {}
        for i in (5, 4, 3, 2, 1):
            prev = ch[5] if i == 5 else ch[i + 1]
            if cfg.igf == "off":
                self.igf[i] = ConvBnRelu(prev, ch[i], 3, rng=rng)
            else:
                self.igf[i] = IgfUnit(ch[i], prev, cfg.reduction, cfg.igf, rng)
        head = dict(bn=False, activation="none", rng=rng, zero=cfg.zero_heads)
        self.head_r = ConvBnRelu(ch[1], 1, 1, **head)
        self.head_d = ConvBnRelu(ch[1], 1, 1, **head)
        self.head_rgbd = ConvBnRelu(ch[1], 1, 1, **head)

    def encode(self, rgb: Tensor, depth: Tensor, training: bool):
        f_r = self.rgb_backbone(rgb, training)
        f_d = self.depth_backbone(depth, training)
        f_rgbd = self.pai(f_r, f_d, training)
        return f_r, f_d, f_rgbd

    def middleware(self, top_r: Tensor, top_d: Tensor, top_rgbd: Tensor, training: bool):
        if self.cfg.smar != "off":
            top_r = self.smar_r(top_r, training)
            top_d = self.smar_d(top_d, training)
            top_rgbd = self.smar_rgbd(top_rgbd, training)
        if self.cfg.cmwr != "off":
            top_r, top_d, top_rgbd = self.cmwr(top_r, top_d, top_rgbd)
        return top_r, top_d, top_rgbd

    def features(self, rgb: Tensor, depth: Tensor, training: bool = False):
        """Final decoder features of the RGB, depth and RGB-D streams (level 1)."""
        n, _, h, w = rgb.shape
        if depth.shape[0] != n or depth.shape[2:] != (h, w):
            raise ValueError(f"rgb {rgb.shape} and depth {depth.shape} must share N, H, W")
        if rgb.shape[1] != 3 or depth.shape[1] != 1:
            raise ValueError("expected a 3-channel rgb and 1-channel depth input")
        div = self.cfg.min_divisor
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} must be divisible by {div}")
        f_r, f_d, f_rgbd = self.encode(rgb, depth, training)
        top_r, top_d, top_rgbd = self.middleware(f_r[5], f_d[5], f_rgbd[5], training)
        d_r = self.rgb_decoder(top_r, f_r, training)
        d_d = self.depth_decoder(top_d, f_d, training)
        prev = top_rgbd
        for i in (5, 4, 3, 2, 1):
            unit = self.igf[i]
            if isinstance(unit, IgfUnit):
                prev = unit(d_r[i], d_d[i], f_r[i], f_d[i], prev, training)
            else:
                hh, ww = f_r[i].shape[2:]
                prev = unit(upsample_to(prev, hh, ww), training)
        return d_r[1], d_d[1], prev

    def __call__(self, rgb: Tensor, depth: Tensor, training: bool = False):
        h, w = rgb.shape[2:]
        feats = self.features(rgb, depth, training)
        maps = []
        for head, feat in zip((self.head_r, self.head_d, self.head_rgbd), feats):
            maps.append(upsample_to(sigmoid(head(feat)), h, w))
        return tuple(maps)


def forward(rgb: Tensor, depth: Tensor, net: CirNet, training: bool = False):
    """(S_r, S_d, S_rgbd), each (N, 1, H, W) in (0, 1)."""
    return net(rgb, depth, training)


def predict(net: CirNet, rgb: np.ndarray, depth: np.ndarray):
    """Eval-mode maps as numpy arrays, without building a graph."""
    with no_grad():
        maps = net(Tensor(rgb), Tensor(depth), training=False)
    return tuple(m.data for m in maps)


def conv_param_count(c_in: int, c_out: int, k: int, bn: bool = True, bias: bool = True) -> int:
    return c_out * c_in * k * k + (c_out if bias else 0) + (2 * c_out if bn else 0)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of ``CirNet(cfg)``."""
    c = dict(zip(LEVELS, cfg.channels))
    r = cfg.reduction
    total = 0
    for c_in in (3, 1):
        prev = c_in
        for i in LEVELS:
            total += conv_param_count(prev, c[i], 3) + (cfg.stage_convs - 1) * conv_param_count(c[i], c[i], 3)
            prev = c[i]
    sa = conv_param_count(2, 1, 3, bn=False)
    pai_levels = (5,) if cfg.pai == "off" else (3, 4, 5)
    total += sum(conv_param_count(2 * c[i], c[i], 3) for i in pai_levels)
    if cfg.pai != "off":
        total += sa

    def ca(ch):
        return 2 * ch * (ch // r)

    if cfg.smar != "off":
        total += 3 * (sa + ca(c[5]) + conv_param_count(c[5], c[5], 3))
    if cfg.cmwr != "off":
        total += 4 * conv_param_count(c[5], c[5] // 2, 1, bn=False)
    dec = conv_param_count(c[5], c[5], 3) + sum(conv_param_count(c[i + 1] + c[i], c[i], 3) for i in (4, 3, 2, 1))
    total += 2 * dec
    for i in (5, 4, 3, 2, 1):
        prev = c[5] if i == 5 else c[i + 1]
        ci = c[i]
        if cfg.igf == "off":
            total += conv_param_count(prev, ci, 3)
            continue
        total += 2 * conv_param_count(2 * ci, ci, 3)
        if prev != ci:
            total += conv_param_count(prev, ci, 1)
        if cfg.igf == "cat":
            total += conv_param_count(3 * ci, ci, 3)
            continue
        total += conv_param_count(2 * ci, ci, 1) + conv_param_count(ci, ci, 3)
        if cfg.igf == "on":
            total += conv_param_count(3 * ci, ci, 1) + ca(ci)
    total += 3 * conv_param_count(c[1], 1, 1, bn=False)
    return total


# ---------------------------------------------------------------------------
# loss

def bce(s: Tensor, g: Tensor) -> Tensor:
    """Mean over all pixels of -[g log s + (1-g) log(1-s)], s clamped to [1e-7, 1-1e-7]."""
    if s.shape != g.shape:
        raise ValueError(f"bce: prediction {s.shape} and ground truth {g.shape} differ")
    s = clamp(s, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per_pixel = mul(g, log(s)) + mul(sub(1.0, g), log(sub(1.0, s)))
    return mul(tensor_mean(per_pixel), -1.0)


def loss(s_r: Tensor, s_d: Tensor, s_rgbd: Tensor, g) -> tuple[Tensor, tuple[Tensor, Tensor, Tensor]]:
    """Joint three-stream loss; returns (total, (l_r, l_d, l_rgbd))."""
    g = g if isinstance(g, Tensor) else Tensor(g)
    parts = tuple(bce(s, g) for s in (s_r, s_d, s_rgbd))
    return parts[0] + parts[1] + parts[2], parts


# ---------------------------------------------------------------------------
# optimisation

class NonFiniteLoss(FloatingPointError):
    pass


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr:
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def lr_at(epoch: int, base_lr: float, decay_every: int, decay_factor: float = 5.0) -> float:
    """Step schedule: divide by ``decay_factor`` every ``decay_every`` epochs."""
    if decay_every <= 0:
        return base_lr
    return base_lr / decay_factor ** (epoch // decay_every)


def train_step(net: CirNet, batch, opt: Adam, lr: float | None = None) -> tuple[float, float, float, float]:
    """One forward/backward/Adam update; returns (total, l_r, l_d, l_rgbd)."""
    rgb, depth, gt = batch
    s = net(Tensor(rgb), Tensor(depth), training=True)
    total, parts = loss(*s, Tensor(gt))
    value = total.item()
    if not np.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss {value} at optimiser step {opt.t + 1}")
    backward(total)
    opt.step(lr)
    return (value,) + tuple(p.item() for p in parts)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay_every: int = 4
    decay_factor: float = 5.0
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    scales: tuple[int, ...] = (64,)
    augment: bool = False


def train(net: CirNet, samples: Sequence, cfg: TrainConfig,
          on_step: Callable[[int, tuple], None] | None = None) -> list[tuple]:
    """Mini-batch training over ``samples`` (each with .rgb, .depth, .gt).

    Each batch is drawn at one scale from ``cfg.scales``; augmentation, when
    enabled, flips and rotates each sample. Returns one loss row per step.
    """
    from .data import augment, resize_sample

    rng = make_rng(cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.lr)
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr, cfg.decay_every, cfg.decay_factor)
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            size = int(cfg.scales[rng.integers(len(cfg.scales))]) if len(cfg.scales) > 1 else int(cfg.scales[0])
            batch = []
            for k in idx:
                smp = samples[k]
                if cfg.augment:
                    smp = augment(smp, rng, scales=None)
                batch.append(resize_sample(smp, size))
            arrays = (np.stack([b.rgb for b in batch]), np.stack([b.depth for b in batch]),
                      np.stack([b.gt[None] for b in batch]).astype(np.float64))
            row = (step,) + train_step(net, arrays, opt, lr)
            rows.append(row)
            if on_step is not None:
                on_step(step, row)
            step += 1
    return rows


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CIRK"
FORMAT_VERSION = 1


def state_arrays(net: CirNet) -> list[tuple[str, np.ndarray]]:
    return [(n, p.data) for n, p in net.named_parameters()] + list(net.named_buffers())


def save_checkpoint(net: CirNet, path) -> None:
    """``CIRK``, u32 version, u32-length JSON config, u32 array count, then
    per array a u64 element count and little-endian float64 values."""
    cfg = json.dumps(net.cfg.to_dict(), sort_keys=True).encode()
    arrays = state_arrays(net)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(arrays)))
        for _, arr in arrays:
            fh.write(struct.pack("<Q", arr.size))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> CirNet:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a CIRK checkpoint")
    version, clen = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = ModelConfig.from_dict(json.loads(raw[off:off + clen]))
    off += clen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    net = CirNet(cfg)
    arrays = state_arrays(net)
    if count != len(arrays):
        raise ValueError(f"{path}: {count} arrays stored, model has {len(arrays)}")
    for name, arr in arrays:
        (size,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if size != arr.size:
            raise ValueError(f"{path}: {name} has {size} values, expected {arr.size}")
        arr[...] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(arr.shape)
        off += 8 * size
    return net
