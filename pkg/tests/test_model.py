import math
import struct

import numpy as np
import pytest

from cirnet import model
from cirnet.data import SceneSpec, generate
from cirnet.model import Adam, CirNet, ModelConfig, TrainConfig
from cirnet.tensor import Tensor

from oracles import bce_loops

SMALL = dict(channels=(4, 8, 8, 8, 8), strides=(2, 4, 8, 16, 16), stage_convs=1, reduction=4)


def _inputs(rng, n=2, size=32):
    return rng.uniform(size=(n, 3, size, size)), rng.uniform(size=(n, 1, size, size))


def test_output_shapes_and_zero_heads():
    net = CirNet(ModelConfig(**SMALL))
    rgb, depth = _inputs(np.random.default_rng(0))
    maps = model.forward(Tensor(rgb), Tensor(depth), net)
    for m in maps:
        assert m.shape == (2, 1, 32, 32)
        assert np.all(m.data == 0.5)


def test_random_heads_in_unit_interval():
    net = CirNet(ModelConfig(zero_heads=False, **SMALL))
    maps = model.predict(net, *_inputs(np.random.default_rng(1)))
    for m in maps:
        assert np.all((m > 0) & (m < 1))


def test_forward_deterministic():
    cfg = ModelConfig(zero_heads=False, seed=3, **SMALL)
    rgb, depth = _inputs(np.random.default_rng(2))
    a = model.predict(CirNet(cfg), rgb, depth)
    b = model.predict(CirNet(cfg), rgb, depth)
    net = CirNet(cfg)
    c1, c2 = model.predict(net, rgb, depth), model.predict(net, rgb, depth)
    for x, y, z, w in zip(a, b, c1, c2):
        assert np.array_equal(x, y) and np.array_equal(z, w) and np.array_equal(x, z)


def test_input_validation():
    net = CirNet(ModelConfig(**SMALL))
    with pytest.raises(ValueError):
        net(Tensor(np.ones((1, 3, 24, 24))), Tensor(np.ones((1, 1, 24, 24))))
    with pytest.raises(ValueError):
        net(Tensor(np.ones((1, 3, 32, 32))), Tensor(np.ones((1, 1, 16, 16))))
    with pytest.raises(ValueError):
        net(Tensor(np.ones((1, 1, 32, 32))), Tensor(np.ones((1, 1, 32, 32))))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(channels=(4, 4, 4, 4))
    with pytest.raises(ValueError):
        ModelConfig(pai="maybe")
    with pytest.raises(ValueError):
        ModelConfig(channels=(6, 8, 8, 8, 8))
    with pytest.raises(ValueError):
        ModelConfig(strides=(2, 4, 3, 16, 16))
    cfg = ModelConfig(**SMALL)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_default_param_count():
    net = CirNet()
    assert net.num_parameters() == model.expected_param_count(net.cfg) == 1194095


ABLATIONS = [dict(zip(model.ABLATION_CHOICES, combo))
             for combo in [("off", "off", "off", "off"), ("on", "off", "off", "off"), ("off", "off", "off", "on"),
                           ("off", "off", "on", "off"), ("off", "on", "off", "off"), ("on", "on", "on", "on")]]
VARIANTS = [{k: v} for k, vals in model.ABLATION_CHOICES.items() for v in vals]


@pytest.mark.parametrize("flags", ABLATIONS + VARIANTS)
def test_ablations_constructible_and_counted(flags):
    cfg = ModelConfig(**SMALL, **flags)
    net = CirNet(cfg)
    assert net.num_parameters() == model.expected_param_count(cfg)
    maps = model.predict(net, *_inputs(np.random.default_rng(4), n=1, size=16))
    assert all(m.shape == (1, 1, 16, 16) for m in maps)


def test_baseline_config():
    cfg = ModelConfig.baseline(**SMALL)
    assert (cfg.pai, cfg.smar, cfg.cmwr, cfg.igf) == ("off", "off", "off", "off")
    net = CirNet(cfg)
    assert not hasattr(net, "cmwr") and not hasattr(net, "smar_r")
    assert net.num_parameters() < CirNet(ModelConfig(**SMALL)).num_parameters()


def test_loss_examples():
    g = (np.random.default_rng(5).uniform(size=(2, 1, 4, 4)) > 0.5).astype(float)
    total, parts = model.loss(Tensor(g), Tensor(g), Tensor(g), g)
    for p in parts:
        assert p.item() <= -math.log(1 - 1e-7) + 1e-15
    half = Tensor(np.full(g.shape, 0.5))
    total, parts = model.loss(half, half, half, g)
    assert parts[0].item() == pytest.approx(math.log(2), abs=1e-15)
    assert total.item() == pytest.approx(3 * math.log(2), abs=1e-14)


def test_bce_pixel_loop_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        s = rng.uniform(size=(1, 1, 5, 5))
        s[0, 0, 0, 0] = 0.0
        g = (rng.uniform(size=s.shape) > 0.5).astype(float)
        assert abs(model.bce(Tensor(s), Tensor(g)).item() - bce_loops(s, g)) < 1e-12
    with pytest.raises(ValueError):
        model.bce(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(zero_heads=False, seed=7, **SMALL)
    net = CirNet(cfg)
    rng = np.random.default_rng(7)
    # move BN buffers away from their initial values
    model.train_step(net, (*_inputs(rng), (rng.uniform(size=(2, 1, 32, 32)) > 0.5).astype(float)),
                     Adam(net.parameters(), 1e-3))
    path = tmp_path / "net.cirk"
    model.save_checkpoint(net, path)
    raw = path.read_bytes()
    assert raw[:4] == b"CIRK" and struct.unpack_from("<I", raw, 4)[0] == 1
    loaded = model.load_checkpoint(path)
    assert loaded.cfg == cfg
    for (na, a), (nb, b) in zip(model.state_arrays(net), model.state_arrays(loaded)):
        assert na == nb and np.array_equal(a, b)
    rgb, depth = _inputs(np.random.default_rng(8))
    for x, y in zip(model.predict(net, rgb, depth), model.predict(loaded, rgb, depth)):
        assert np.array_equal(x, y)
    model.save_checkpoint(loaded, tmp_path / "again.cirk")
    assert (tmp_path / "again.cirk").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.cirk"
    bad.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        model.load_checkpoint(bad)


def test_zero_lr_leaves_parameters_unchanged():
    net = CirNet(ModelConfig(**SMALL))
    before = [p.data.copy() for p in net.parameters()]
    samples = generate(SceneSpec(size=32, seed=1), 4)
    rows = model.train(net, samples, TrainConfig(lr=0.0, batch_size=2, epochs=1, scales=(32,)))
    assert len(rows) == 2
    for a, p in zip(before, net.parameters()):
        assert np.array_equal(a, p.data)


def test_single_sample_overfit_50_steps():
    net = CirNet(ModelConfig(**SMALL))
    samples = generate(SceneSpec(size=32, seed=2), 1)
    rows = model.train(net, samples, TrainConfig(lr=1e-3, decay_every=0, batch_size=1, epochs=50, scales=(32,)))
    assert rows[0][1] == pytest.approx(3 * math.log(2), abs=1e-12)
    assert rows[-1][1] < rows[0][1]


def test_lr_schedule():
    assert model.lr_at(0, 1e-4, 40, 5) == 1e-4
    assert model.lr_at(39, 1e-4, 40, 5) == 1e-4
    assert model.lr_at(40, 1e-4, 40, 5) == pytest.approx(2e-5)
    assert model.lr_at(85, 1e-4, 40, 5) == pytest.approx(4e-6)
    assert model.lr_at(100, 1e-4, 0, 5) == 1e-4


def test_adam_first_step_is_sign_times_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 0.0])
    Adam([p], lr=0.1).step()
    assert np.allclose(p.data, [0.9, -1.9, 3.0], rtol=0, atol=1e-7)


def test_non_finite_loss_raises():
    net = CirNet(ModelConfig(**SMALL))
    net.head_rgbd.bias.data[...] = np.nan
    rng = np.random.default_rng(9)
    batch = (*_inputs(rng, 1, 16), np.zeros((1, 1, 16, 16)))
    with pytest.raises(model.NonFiniteLoss):
        model.train_step(net, batch, Adam(net.parameters()))
