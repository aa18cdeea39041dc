"""Finite-difference gradient checks for every differentiable op and unit.

Each case builds a scalar function of a few leaf tensors: the op output is
contracted with a fixed random tensor so every output element contributes.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention, fusion, model, nn_ops
from . import tensor as T
from .autodiff import GradCheckReport, grad_check
from .tensor import Tensor

SHAPE = (1, 4, 8, 8)
STEP = 1e-6
TOL = 1e-4


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _contract(fn, rng):
    """Wrap ``fn() -> Tensor`` as a scalar via a fixed random projection."""
    w = Tensor(rng.normal(size=fn().shape))
    return lambda: T.tensor_sum(T.mul(fn(), w))


def _params(*mods):
    out = []
    for m in mods:
        out.extend(m.parameters())
    return out


def _randomize(module, rng, scale=0.5):
    """Jitter every parameter (biases and BN affine start constant)."""
    for p in module.parameters():
        p.data += rng.normal(scale=scale, size=p.shape)


# -- cases: each returns (scalar fn, params) ---------------------------------

def case_add(rng):
    a, b = _leaf(rng, SHAPE), _leaf(rng, (1, 1, 8, 8))
    return _contract(lambda: T.elementwise("add", a, b), rng), [a, b]


def case_sub(rng):
    a, b = _leaf(rng, SHAPE), _leaf(rng, (1, 4, 1, 1))
    return _contract(lambda: T.elementwise("sub", a, b), rng), [a, b]


def case_mul(rng):
    a, b = _leaf(rng, SHAPE), _leaf(rng, (1, 4, 1, 1))
    return _contract(lambda: T.elementwise("mul", a, b), rng), [a, b]


def case_concat(rng):
    a, b = _leaf(rng, (1, 3, 8, 8)), _leaf(rng, (1, 1, 8, 8))
    return _contract(lambda: T.concat_channels([a, b]), rng), [a, b]


def case_matmul(rng):
    a, b = _leaf(rng, (1, 4, 6)), _leaf(rng, (1, 6, 5))
    return _contract(lambda: T.matmul(a, b), rng), [a, b]


def case_reshape(rng):
    a = _leaf(rng, SHAPE)
    return _contract(lambda: T.reshape(a, (1, 4, 64, 1)), rng), [a]


def case_conv2d(rng):
    x = _leaf(rng, SHAPE)
    layer = nn_ops.ConvBnRelu(4, 3, 3, stride=int(rng.integers(1, 3)), rng=rng)
    _randomize(layer, rng)
    return _contract(lambda: layer(x, training=True), rng), [x] + layer.parameters()


def case_conv2d_eval(rng):
    x = _leaf(rng, SHAPE)
    layer = nn_ops.ConvBnRelu(4, 3, 3, rng=rng)
    layer.bn_running_mean[:] = rng.normal(size=3)
    layer.bn_running_var[:] = rng.uniform(0.5, 2.0, size=3)
    return _contract(lambda: layer(x, training=False), rng), [x] + layer.parameters()


def case_sigmoid(rng):
    x = _leaf(rng, SHAPE, 2.0)
    return _contract(lambda: nn_ops.sigmoid(x), rng), [x]


def case_relu(rng):
    x = _leaf(rng, SHAPE)
    return _contract(lambda: nn_ops.relu(x), rng), [x]


def case_softmax(rng):
    x = _leaf(rng, (1, 16, 16), 2.0)
    return _contract(lambda: nn_ops.softmax_rows(x), rng), [x]


def case_global_avg_pool(rng):
    x = _leaf(rng, SHAPE)
    return _contract(lambda: nn_ops.global_avg_pool(x), rng), [x]


def case_resize_up(rng):
    x = _leaf(rng, (1, 4, 4, 4))
    return _contract(lambda: nn_ops.resize(x, 8, 8, "bilinear_up"), rng), [x]


def case_resize_down(rng):
    x = _leaf(rng, SHAPE)
    return _contract(lambda: nn_ops.resize(x, 4, 4, "avgpool_down"), rng), [x]


def case_spatial_attention(rng):
    x = _leaf(rng, SHAPE)
    sa = attention.SpatialAttention(rng)
    return _contract(lambda: sa(x), rng), [x] + sa.parameters()


def case_channel_attention(rng):
    x = _leaf(rng, SHAPE)
    ca = attention.ChannelAttention(4, 2, rng)
    return _contract(lambda: ca(x), rng), [x] + ca.parameters()


def case_attention_3d(rng):
    x = _leaf(rng, SHAPE)
    sa, ca = attention.SpatialAttention(rng), attention.ChannelAttention(4, 2, rng)
    return _contract(lambda: attention.attention_3d(x, sa, ca), rng), [x] + _params(sa, ca)


def case_smar(rng):
    x = _leaf(rng, SHAPE)
    unit = attention.SmarUnit(4, 2, rng=rng)
    _randomize(unit.out_conv, rng)
    return _contract(lambda: unit(x, training=True), rng), [x] + unit.parameters()


def case_pai(rng):
    f_r = {3: _leaf(rng, SHAPE), 4: _leaf(rng, (1, 4, 4, 4)), 5: _leaf(rng, (1, 4, 4, 4))}
    f_d = {k: _leaf(rng, v.shape) for k, v in f_r.items()}
    unit = fusion.PaiUnit({i: (4, 4, 4) for i in (3, 4, 5)}, rng=rng)
    for conv in unit.fuse_conv.values():
        _randomize(conv, rng)

    def fn():
        out = unit(f_r, f_d, training=True)
        return T.concat([T.reshape(out[i], (1, -1)) for i in (3, 4, 5)], axis=1)

    return _contract(fn, rng), list(f_r.values()) + list(f_d.values()) + unit.parameters()


def case_cmwr(rng):
    shape = (1, 4, 4, 4)
    fs = [_leaf(rng, shape) for _ in range(3)]
    unit = fusion.CmwrUnit(4, rng=rng)

    def fn():
        return T.concat(list(unit(*fs)), axis=1)

    return _contract(fn, rng), fs + unit.parameters()


def case_igf(rng):
    feats = [_leaf(rng, SHAPE) for _ in range(4)]
    prev = _leaf(rng, (1, 4, 4, 4))
    unit = fusion.IgfUnit(4, 4, 2, rng=rng)
    for conv in (unit.rgb_skip_conv, unit.depth_skip_conv, unit.h_proj, unit.merge_conv, unit.out_conv):
        _randomize(conv, rng)
    return _contract(lambda: unit(*feats, prev, training=True), rng), feats + [prev] + unit.parameters()


TINY = dict(channels=(4, 4, 4, 4, 4), strides=(1, 1, 2, 2, 2), stage_convs=1, reduction=4, zero_heads=False)


def case_full_model(rng, max_coords: int = 100):
    cfg = model.ModelConfig(seed=int(rng.integers(1 << 31)), **TINY)
    net = model.CirNet(cfg)
    rgb = Tensor(rng.uniform(size=(1, 3, 8, 8)), requires_grad=True)
    depth = Tensor(rng.uniform(size=(1, 1, 8, 8)), requires_grad=True)
    gt = Tensor((rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(float))

    def fn():
        total, _ = model.loss(*net(rgb, depth, training=True), gt)
        return total

    return fn, [rgb, depth] + net.parameters(), max_coords


CASES: dict[str, Callable] = {
    "add": case_add, "sub": case_sub, "mul": case_mul, "concat_channels": case_concat,
    "matmul": case_matmul, "reshape": case_reshape, "conv2d_bn_train": case_conv2d,
    "conv2d_bn_eval": case_conv2d_eval, "relu": case_relu, "sigmoid": case_sigmoid,
    "softmax_rows": case_softmax, "global_avg_pool": case_global_avg_pool,
    "resize_bilinear_up": case_resize_up, "resize_avgpool_down": case_resize_down,
    "spatial_attention": case_spatial_attention, "channel_attention": case_channel_attention,
    "attention_3d": case_attention_3d, "smar": case_smar, "pai": case_pai, "cmwr": case_cmwr,
    "igf": case_igf, "cirnet_forward_loss": case_full_model,
}


@dataclass
class CheckRow:
    name: str
    seed: int
    report: GradCheckReport
    seconds: float


def run_case(name: str, seed: int, step: float = STEP, tol: float = TOL) -> CheckRow:
    rng = np.random.default_rng([seed, len(name)])
    built = CASES[name](rng)
    fn, params = built[0], built[1]
    max_coords = built[2] if len(built) > 2 else None
    t0 = time.perf_counter()
    rep = grad_check(fn, params, step=step, tol=tol, max_coords=max_coords, rng=rng)
    return CheckRow(name, seed, rep, time.perf_counter() - t0)


def run_suite(seeds=range(5), names=None, step: float = STEP, tol: float = TOL) -> list[CheckRow]:
    names = list(CASES) if names is None else list(names)
    return [run_case(n, s, step, tol) for n in names for s in seeds]


def format_table(rows: list[CheckRow]) -> str:
    lines = [f"{'operation':<22} {'seed':>4} {'max_rel_err':>12} {'checked':>7} {'skipped':>7}  result"]
    for r in rows:
        lines.append(f"{r.name:<22} {r.seed:>4} {r.report.max_rel_err:>12.3e} {r.report.checked:>7} "
                     f"{r.report.skipped:>7}  {'PASS' if r.report.passed else 'FAIL'}")
    return "\n".join(lines)
