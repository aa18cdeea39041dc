"""Synthetic RGB-D scenes, PNG dataset I/O and training augmentation.

Depth convention: larger value = nearer. Salient objects are rendered nearer
than the background.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .nn_ops import bilinear_matrix

SHAPES = ("disk", "rectangle", "triangle")


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    min_objects: int = 1
    max_objects: int = 2
    shapes: tuple[str, ...] = SHAPES
    contrast: float = 0.8
    depth_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.size <= 0 or self.size % 16:
            raise ValueError(f"image size must be a positive multiple of 16, got {self.size}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(bad)}")
        for name in ("contrast", "depth_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class Sample:
    rgb: np.ndarray      # (3, H, W) in [0, 1]
    depth: np.ndarray    # (1, H, W) in [0, 1]
    gt: np.ndarray       # (H, W) in {0, 1}
    name: str = ""


# ---------------------------------------------------------------------------
# rasterisation; a pixel belongs to a shape when its centre does

def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy + 0.5, xx + 0.5


def disk_mask(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = _grid(size)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rect_mask(size: int, y0: float, x0: float, y1: float, x1: float) -> np.ndarray:
    yy, xx = _grid(size)
    return (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)


def triangle_mask(size: int, pts: np.ndarray) -> np.ndarray:
    yy, xx = _grid(size)
    (ay, ax), (by, bx), (cy, cx) = pts

    def edge(py, px, qy, qx):
        return (qx - px) * (yy - py) - (qy - py) * (xx - px)

    e0, e1, e2 = edge(ay, ax, by, bx), edge(by, bx, cy, cx), edge(cy, cx, ay, ax)
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def _render_object(rng: np.random.Generator, size: int, shape: str) -> np.ndarray:
    lo, hi = size * 0.12, size * 0.28
    cy, cx = rng.uniform(size * 0.25, size * 0.75, size=2)
    if shape == "disk":
        return disk_mask(size, cy, cx, rng.uniform(lo, hi))
    if shape == "rectangle":
        hh, hw = rng.uniform(lo, hi, size=2)
        return rect_mask(size, cy - hh, cx - hw, cy + hh, cx + hw)
    r = rng.uniform(lo * 1.3, hi * 1.3)
    angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    pts = np.stack([cy + r * np.sin(angles), cx + r * np.cos(angles)], axis=1)
    return triangle_mask(size, pts)


def render_scene(spec: SceneSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.size
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    gt = np.zeros((size, size), dtype=bool)
    while not gt.any():
        for _ in range(n_obj):
            gt |= _render_object(rng, size, spec.shapes[int(rng.integers(len(spec.shapes)))])

    # colours: background and object hues separated in proportion to contrast
    bg_col = rng.uniform(0.2, 0.8, size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    fg_col = np.clip(bg_col + spec.contrast * 0.6 * direction + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)
    yy, xx = _grid(size)
    ramp = (yy / size - 0.5) * rng.uniform(-0.2, 0.2) + (xx / size - 0.5) * rng.uniform(-0.2, 0.2)
    texture = rng.uniform(-0.04, 0.04, size=(3, size, size))
    rgb = np.where(gt[None], fg_col[:, None, None], bg_col[:, None, None] + ramp[None]) + texture
    rgb = np.clip(rgb, 0.0, 1.0)

    # depth: background in [0, 0.4] as a tilted plane, objects in [0.6, 1]
    tilt = rng.uniform(0.0, 0.4)
    bg_depth = 0.4 - tilt * yy / size
    bg_depth = np.clip(bg_depth + rng.uniform(-0.02, 0.02, size=(size, size)) * (bg_depth > 0.02), 0.0, 0.4)
    obj_depth = rng.uniform(0.6, 1.0)
    noise = spec.depth_noise
    obj_vals = (1.0 - noise) * obj_depth + noise * bg_depth
    depth = np.where(gt, obj_vals, bg_depth)[None]
    return Sample(rgb.astype(np.float64), depth.astype(np.float64), gt.astype(np.float64), f"{index:04d}")


def generate(spec: SceneSpec, n: int) -> list[Sample]:
    """``n`` scenes; scene ``i`` depends only on (spec, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [render_scene(spec, i) for i in range(n)]


# ---------------------------------------------------------------------------
# augmentation

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners-false bilinear resize of a (..., H, W) array, either direction."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ry, rx = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
    return np.einsum("ih,...hw,jw->...ij", ry, img, rx)


def resize_sample(s: Sample, size: int) -> Sample:
    if s.gt.shape == (size, size):
        return s
    gt = (resize_bilinear(s.gt, size, size) >= 0.5).astype(np.float64)
    return Sample(np.clip(resize_bilinear(s.rgb, size, size), 0, 1),
                  np.clip(resize_bilinear(s.depth, size, size), 0, 1), gt, s.name)


def flip_sample(s: Sample) -> Sample:
    return Sample(s.rgb[..., ::-1].copy(), s.depth[..., ::-1].copy(), s.gt[..., ::-1].copy(), s.name)


def rotate_sample(s: Sample, k: int) -> Sample:
    return Sample(np.rot90(s.rgb, k, axes=(-2, -1)).copy(), np.rot90(s.depth, k, axes=(-2, -1)).copy(),
                  np.rot90(s.gt, k, axes=(-2, -1)).copy(), s.name)


def augment(s: Sample, rng: np.random.Generator, scales: Sequence[int] | None = (48, 64, 80),
            p_flip: float = 0.5) -> Sample:
    """Random horizontal flip, rotation by k*90 degrees, then resize to a drawn scale.

    Pass ``scales=None`` to keep the size (the trainer resizes whole batches).
    """
    if rng.random() < p_flip:
        s = flip_sample(s)
    s = rotate_sample(s, int(rng.integers(4)))
    if scales:
        s = resize_sample(s, int(scales[int(rng.integers(len(scales)))]))
    return s


# ---------------------------------------------------------------------------
# PNG I/O; filenames NNNN_{rgb|depth|gt}.png

def to_u8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(path, arr: np.ndarray) -> None:
    """Save a (3, H, W), (1, H, W) or (H, W) map in [0, 1] as 8-bit PNG."""
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[0] == 3:
        Image.fromarray(to_u8(a.transpose(1, 2, 0)), mode="RGB").save(path)
    else:
        Image.fromarray(to_u8(a.reshape(a.shape[-2:])), mode="L").save(path)


def read_png(path, channels: int) -> np.ndarray:
    img = Image.open(path)
    if channels == 3:
        return np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def save_samples(samples: Sequence[Sample], root) -> dict[str, Path]:
    root = Path(root)
    dirs = {k: root / k for k in ("rgb", "depth", "gt")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name = s.name or f"{i:04d}"
        save_png(dirs["rgb"] / f"{name}_rgb.png", s.rgb)
        save_png(dirs["depth"] / f"{name}_depth.png", s.depth)
        save_png(dirs["gt"] / f"{name}_gt.png", s.gt)
    return dirs


_NAME = re.compile(r"^(\d{4})_(rgb|depth|gt)\.png$")


def _index(directory, kind: str) -> dict[str, Path]:
    out = {}
    for p in sorted(Path(directory).iterdir()):
        m = _NAME.match(p.name)
        if m and m.group(2) == kind:
            out[m.group(1)] = p
    return out


class MissingPairError(FileNotFoundError):
    pass


def load_pairs(rgb_dir, depth_dir, gt_dir=None) -> list[Sample]:
    """Load matching ``NNNN_*`` files. GT is binarised at 0.5 after v/255.

    Without ``gt_dir`` the samples carry an all-zero GT placeholder.
    """
    rgbs, depths = _index(rgb_dir, "rgb"), _index(depth_dir, "depth")
    gts = _index(gt_dir, "gt") if gt_dir is not None else None
    keys = set(rgbs) | set(depths) | (set(gts) if gts is not None else set())
    if not keys:
        raise MissingPairError(f"no NNNN_rgb.png files in {rgb_dir}")
    samples = []
    for k in sorted(keys):
        if k not in rgbs or k not in depths or (gts is not None and k not in gts):
            raise MissingPairError(f"incomplete pair for {k}")
        rgb = read_png(rgbs[k], 3)
        depth = read_png(depths[k], 1)
        gt = read_png(gts[k], 1) if gts is not None else np.zeros(depth.shape)
        if not (rgb.shape[1:] == depth.shape == gt.shape):
            raise ValueError(f"pair {k}: size mismatch rgb {rgb.shape[1:]}, depth {depth.shape}, gt {gt.shape}")
        samples.append(Sample(rgb, depth[None], (gt >= 0.5).astype(np.float64), k))
    return samples
