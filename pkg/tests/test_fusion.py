import numpy as np
import pytest

from cirnet import fusion
from cirnet.fusion import CmwrUnit, IgfUnit, PaiUnit
from cirnet.tensor import Tensor

from oracles import avgpool_loops, cmwr_loops, conv_loops, relu_loops, spatial_attention_loops


def _cmwr_emb(unit):
    return {k: (getattr(unit, f"embed_{k}").weight.data, getattr(unit, f"embed_{k}").bias.data)
            for k in ("theta", "xi", "phi", "psi")}


def _randomize_biases(unit, rng):
    for name in ("theta", "xi", "phi", "psi"):
        getattr(unit, f"embed_{name}").bias.data[...] = rng.normal(size=unit.channels // 2)


def test_cmwr_single_pixel_doubles():
    rng = np.random.default_rng(0)
    unit = CmwrUnit(4, rng=rng)
    fs = [rng.normal(size=(2, 4, 1, 1)) for _ in range(3)]
    out = fusion.cmwr_refine(*[Tensor(f) for f in fs], unit)
    for o, f in zip(out, fs):
        assert np.array_equal(o.data, 2 * f)


def test_cmwr_constant_embeddings_give_uniform_weights():
    unit = CmwrUnit(4)  # zero weights, zero biases: every embedding is 0
    rng = np.random.default_rng(1)
    fs = [rng.normal(size=(1, 4, 3, 3)) for _ in range(3)]
    wts = unit.weights(*[Tensor(f) for f in fs]).data
    assert np.allclose(wts, 1 / 9, rtol=0, atol=1e-16)
    out = unit(*[Tensor(f) for f in fs])
    for o, f in zip(out, fs):
        ref = f.mean(axis=(2, 3), keepdims=True) + f
        assert np.max(np.abs(o.data - ref)) < 1e-12


@pytest.mark.parametrize("mode", ["on", "m1_only", "m2_only", "no_residual"])
def test_cmwr_matrix_oracle(mode):
    rng = np.random.default_rng(2)
    for _ in range(3):
        unit = CmwrUnit(4, mode, rng=rng)
        _randomize_biases(unit, rng)
        fs = [rng.normal(size=(1, 4, 2, 2)) for _ in range(3)]
        got = unit(*[Tensor(f) for f in fs])
        ref = cmwr_loops(*fs, _cmwr_emb(unit), mode)
        for g, r in zip(got, ref):
            assert np.max(np.abs(g.data - r)) < 1e-12


def test_cmwr_weights_row_stochastic_and_convex():
    rng = np.random.default_rng(3)
    unit = CmwrUnit(6, rng=rng)
    fs = [Tensor(rng.normal(scale=3, size=(2, 6, 4, 4))) for _ in range(3)]
    m1, m2 = unit.affinities(*fs)
    wts = unit.weights(*fs).data
    for m in (m1.data, m2.data, wts):
        assert np.all(m >= 0)
        assert np.max(np.abs(m.sum(axis=-1) - 1)) < 1e-12
    # the mixed part of the output stays inside each channel's value range
    unit_nr = CmwrUnit(6, "no_residual", rng=np.random.default_rng(3))
    outs = unit_nr(*fs)
    for o, f in zip(outs, fs):
        lo = f.data.min(axis=(2, 3), keepdims=True)
        hi = f.data.max(axis=(2, 3), keepdims=True)
        assert np.all(o.data >= lo - 1e-12) and np.all(o.data <= hi + 1e-12)


def test_cmwr_errors():
    with pytest.raises(ValueError):
        CmwrUnit(3)
    unit = CmwrUnit(4)
    with pytest.raises(ValueError):
        unit(Tensor(np.ones((1, 4, 2, 2))), Tensor(np.ones((1, 4, 2, 3))), Tensor(np.ones((1, 4, 2, 2))))


# ---------------------------------------------------------------------------
# PAI

SHAPES = {3: (1, 4, 8, 8), 4: (1, 4, 4, 4), 5: (1, 4, 4, 4)}


def _pai_inputs(rng):
    f_r = {i: rng.normal(size=s) for i, s in SHAPES.items()}
    f_d = {i: rng.normal(size=s) for i, s in SHAPES.items()}
    return f_r, f_d


def _tensors(d):
    return {k: Tensor(v) for k, v in d.items()}


def _cbr_eval(x, layer):
    y = conv_loops(x, layer.weight.data, layer.bias.data, layer.stride, layer.padding)
    y = ((y - layer.bn_running_mean[None, :, None, None]) / np.sqrt(layer.bn_running_var[None, :, None, None] + 1e-5)
         * layer.bn_gamma.data[None, :, None, None] + layer.bn_beta.data[None, :, None, None])
    return relu_loops(y)


class _ConstSA:
    def __init__(self, value):
        self.value = value

    def __call__(self, x):
        n, _, h, w = x.shape
        return Tensor(np.full((n, 1, h, w), self.value))


@pytest.mark.parametrize("value,factor", [(0.0, 1.0), (1.0, 2.0)])
def test_pai_forced_attention(value, factor):
    rng = np.random.default_rng(4)
    unit = PaiUnit({i: (4, 4, 4) for i in (3, 4, 5)}, rng=rng)
    unit.sa = _ConstSA(value)
    f_r, f_d = _pai_inputs(rng)
    fused = unit.fuse(_tensors(f_r), _tensors(f_d), training=False)
    out = fusion.pai_forward(_tensors(f_r), _tensors(f_d), unit)
    assert np.array_equal(out[3].data, fused[3].data)
    for i in (4, 5):
        assert np.array_equal(out[i].data, factor * fused[i].data)


def test_pai_zero_sa_is_one_and_a_half():
    rng = np.random.default_rng(5)
    unit = PaiUnit({i: (4, 4, 4) for i in (3, 4, 5)}, rng=rng)
    unit.sa.conv.weight.data[...] = 0.0
    f_r, f_d = _pai_inputs(rng)
    fused = unit.fuse(_tensors(f_r), _tensors(f_d), training=False)
    out = unit(_tensors(f_r), _tensors(f_d))
    for i in (4, 5):
        assert np.array_equal(out[i].data, 1.5 * fused[i].data)


def pai_oracle(unit, f_r, f_d):
    fused = {i: _cbr_eval(np.concatenate([f_r[i], f_d[i]], axis=1), unit.fuse_conv[i]) for i in (3, 4, 5)}
    w, b = unit.sa.conv.weight.data, unit.sa.conv.bias.data
    a3 = spatial_attention_loops(avgpool_loops(fused[3], 4, 4), w, b)
    f4 = fused[4] * a3 + fused[4]
    a4 = spatial_attention_loops(f4, w, b)
    f5 = fused[5] * a4 + fused[5]
    return {3: fused[3], 4: f4, 5: f5}


def test_pai_composition_oracle():
    rng = np.random.default_rng(6)
    for _ in range(3):
        unit = PaiUnit({i: (4, 4, 4) for i in (3, 4, 5)}, rng=rng)
        unit.sa.conv.bias.data[...] = rng.normal()
        f_r, f_d = _pai_inputs(rng)
        got = unit(_tensors(f_r), _tensors(f_d))
        ref = pai_oracle(unit, f_r, f_d)
        for i in (3, 4, 5):
            assert np.max(np.abs(got[i].data - ref[i])) < 1e-12


def test_pai_variants():
    rng = np.random.default_rng(7)
    f_r, f_d = _pai_inputs(rng)
    off = PaiUnit({i: (4, 4, 4) for i in (3, 4, 5)}, "off", rng)
    assert list(off(_tensors(f_r), _tensors(f_d))) == [5]
    nr = PaiUnit({i: (4, 4, 4) for i in (3, 4, 5)}, "no_residual", rng)
    nr.sa = _ConstSA(1.0)
    fused = nr.fuse(_tensors(f_r), _tensors(f_d), False)
    out = nr(_tensors(f_r), _tensors(f_d))
    assert np.array_equal(out[5].data, fused[5].data)
    with pytest.raises(ValueError):
        PaiUnit({i: (4, 4, 4) for i in (3, 4, 5)}, "bogus")


# ---------------------------------------------------------------------------
# IGF

def _igf_inputs(rng, c=4, prev_c=4):
    feats = [Tensor(rng.normal(size=(1, c, 4, 4))) for _ in range(4)]
    return feats, Tensor(rng.normal(size=(1, prev_c, 2, 2)))


@pytest.mark.parametrize("prev_c", [4, 8])
def test_igf_forced_gate(prev_c):
    rng = np.random.default_rng(8)
    unit = IgfUnit(4, prev_c, 2, rng=rng)
    feats, prev = _igf_inputs(rng, 4, prev_c)
    h_feat, up = unit.gather(*feats, prev, training=False)
    assert h_feat.shape == (1, 8, 4, 4) and up.shape == (1, 4, 4, 4)
    hp = unit.h_proj(h_feat).data
    ones, zeros = Tensor(np.ones((1, 4, 1, 1))), Tensor(np.zeros((1, 4, 1, 1)))
    assert np.array_equal(unit.pre_conv(h_feat, up, False, ones).data, hp)
    assert np.array_equal(unit.pre_conv(h_feat, up, False, zeros).data, up.data)


def test_igf_zero_ca_averages_branches():
    rng = np.random.default_rng(9)
    unit = IgfUnit(4, 4, 2, rng=rng)
    unit.ca.fc1.data[...] = 0.0
    unit.ca.fc2.data[...] = 0.0
    feats, prev = _igf_inputs(rng)
    h_feat, up = unit.gather(*feats, prev, training=False)
    assert np.all(unit.importance(h_feat, up, False).data == 0.5)
    pre = unit.pre_conv(h_feat, up, False).data
    assert np.max(np.abs(pre - (unit.h_proj(h_feat).data + up.data) / 2)) < 1e-15
    out = fusion.igf_step(*feats, prev, unit)
    assert out.shape == (1, 4, 4, 4)


def test_igf_variants_and_errors():
    rng = np.random.default_rng(10)
    feats, prev = _igf_inputs(rng)
    for mode in ("add", "cat"):
        unit = IgfUnit(4, 4, 2, mode, rng)
        assert unit(*feats, prev).shape == (1, 4, 4, 4)
    add_unit = IgfUnit(4, 4, 2, "add", rng)
    h_feat, up = add_unit.gather(*feats, prev, False)
    assert np.array_equal(add_unit.pre_conv(h_feat, up, False).data, add_unit.h_proj(h_feat).data + up.data)
    with pytest.raises(ValueError):
        IgfUnit(4, mode="bogus")
    unit = IgfUnit(4, 4, 2, rng=rng)
    with pytest.raises(ValueError):
        unit(*feats, Tensor(np.ones((1, 4, 8, 8))))
