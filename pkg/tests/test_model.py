import numpy as np
import pytest

from asconvsr import tensor
from asconvsr.errors import ConfigError, ShapeError
from asconvsr.model import (AsConvSR, ModelConfig, build_model, conv_layer_cost,
                            flops_estimate, param_count, preset_asconvsr,
                            preset_asconvsr_l)

from conftest import finite_diff_grad, max_rel_err, nearest_neighbor_upscale


def tiny_config(**kw):
    base = dict(channels=8, num_bases=2, num_blocks=1)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# construction and shape contract


def test_presets():
    small = preset_asconvsr()
    assert (small.unshuffle_factor, small.channels, small.num_blocks) == (2, 32, 1)
    assert small.conv_mode == "assembled"
    large = preset_asconvsr_l()
    assert (large.channels, large.num_blocks, large.num_bases) == (128, 2, 128)


def test_forward_shape_128():
    model = build_model(tiny_config(), tensor.Rng(0))
    x = tensor.Rng(1).uniform(0, 1, (1, 3, 128, 128))
    assert model.forward(x).shape == (1, 3, 256, 256)


def test_forward_shape_1080p():
    model = build_model(tiny_config(channels=4, num_bases=2), tensor.Rng(0))
    x = tensor.Rng(1).uniform(0, 1, (1, 3, 1080, 1920))
    assert model.forward(x).shape == (1, 3, 2160, 3840)


@pytest.mark.parametrize("mode", ["plain", "dynamic", "assembled"])
@pytest.mark.parametrize("r", [1, 2, 4])
def test_forward_shape_all_modes_and_factors(mode, r):
    cfg = tiny_config(conv_mode=mode, unshuffle_factor=r)
    model = build_model(cfg, tensor.Rng(0))
    x = tensor.Rng(2).uniform(0, 1, (2, 3, 8, 12))
    assert model.forward(x).shape == (2, 3, 16, 24)


def test_forward_divisibility_error():
    model = build_model(tiny_config(), tensor.Rng(0))
    with pytest.raises(ShapeError):
        model.forward(tensor.Rng(1).uniform(0, 1, (1, 3, 7, 8)))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(scale=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(unshuffle_factor=5).validate()
    with pytest.raises(ConfigError):
        ModelConfig(conv_mode="magic").validate()
    with pytest.raises(ConfigError):
        ModelConfig(ks=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"channels": 16, "bogus_key": 1})


# ---------------------------------------------------------------------------
# skip path


def test_zero_tail_is_nearest_neighbor():
    model = build_model(tiny_config(bias_enabled=True), tensor.Rng(3))
    model.params["tail.weight"].value[...] = 0
    model.params["tail.bias"].value[...] = 0
    x = tensor.Rng(4).uniform(0.1, 0.9, (2, 3, 8, 10))
    got = model.forward(x)  # eval clamp is a no-op for inputs inside [0, 1]
    want = nearest_neighbor_upscale(x, 2)
    assert np.array_equal(got, want)


def test_zero_tail_init_scheme_starts_at_nearest_neighbor():
    model = build_model(tiny_config(init_scheme="zero_tail"), tensor.Rng(3))
    assert not model.params["tail.weight"].value.any()
    assert model.params["head.weight"].value.any()  # everything else is he_normal
    x = tensor.Rng(4).uniform(0.1, 0.9, (1, 3, 8, 8))
    assert np.array_equal(model.forward(x), nearest_neighbor_upscale(x, 2))


def test_no_skip_flag_removes_nearest_neighbor_path():
    model = build_model(tiny_config(global_skip=False), tensor.Rng(3))
    model.params["tail.weight"].value[...] = 0
    x = tensor.Rng(4).uniform(0.1, 0.9, (1, 3, 8, 8))
    assert not model.forward(x).any()


def test_eval_mode_clamps_train_mode_does_not():
    model = build_model(tiny_config(), tensor.Rng(5))
    x = tensor.Rng(6).uniform(0.4, 1.0, (1, 3, 8, 8))
    ev = model.forward(x, train=False)
    tr = model.forward(x, train=True)
    assert ev.min() >= 0.0 and ev.max() <= 1.0
    assert tr.max() > 1.0 or tr.min() < 0.0  # random init spills outside [0, 1]


# ---------------------------------------------------------------------------
# dynamic == assembled under coefficient sharing


def test_dynamic_equals_assembled_with_shared_coefficients():
    c, e = 4, 3
    cfg_a = tiny_config(channels=c, num_bases=e, conv_mode="assembled")
    cfg_d = tiny_config(channels=c, num_bases=e, conv_mode="dynamic")
    ma = build_model(cfg_a, tensor.Rng(7))
    md = build_model(cfg_d, tensor.Rng(8))
    # same head/tail
    for name in ("head.weight", "tail.weight"):
        md.params[name].value[...] = ma.params[name].value
    # dynamic control = one coefficient vector; assembled control = that
    # vector replicated for every output channel (rows j*E+e)
    wd = md.params["block0.control.weight"].value
    bd = md.params["block0.control.bias"].value
    ma.params["block0.control.weight"].value[...] = np.tile(wd, (c, 1, 1, 1))
    ma.params["block0.control.bias"].value[...] = np.tile(bd, c)
    # dynamic bases = shared per-channel basis replicated per output channel
    for i in range(3):
        basis = ma.params[f"block0.conv{i}.basis"].value
        md.params[f"block0.conv{i}.bases"].value[...] = \
            np.broadcast_to(basis[:, None], (e, c) + basis.shape[1:])
    x = tensor.Rng(9).uniform(0, 1, (2, 3, 8, 8))
    assert np.array_equal(ma.forward(x), md.forward(x))


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("mode", ["plain", "dynamic", "assembled"])
def test_full_model_finite_difference(mode):
    cfg = tiny_config(channels=4, num_bases=2, conv_mode=mode, bias_enabled=True)
    model = build_model(cfg, tensor.Rng(10), dtype=np.float64)
    x = tensor.Rng(11).uniform(0, 1, (1, 3, 8, 8), dtype=np.float64)
    g = tensor.Rng(12).uniform(-1, 1, (1, 3, 16, 16), dtype=np.float64)

    def loss():
        return float((g * model.forward(x, train=True)).sum())

    model.forward(x, train=True)
    model.zero_grads()
    model.backward(g)
    for name, p in model.params.items():
        fd = finite_diff_grad(loss, p.value)
        assert max_rel_err(p.grad, fd) < 1e-4, f"gradient mismatch for {name}"


def test_residual_block_finite_difference():
    cfg = tiny_config(channels=4, num_bases=2, residual_in_block=True)
    model = build_model(cfg, tensor.Rng(13), dtype=np.float64)
    x = tensor.Rng(14).uniform(0, 1, (1, 3, 8, 8), dtype=np.float64)
    g = tensor.Rng(15).uniform(-1, 1, (1, 3, 16, 16), dtype=np.float64)

    def loss():
        return float((g * model.forward(x, train=True)).sum())

    model.forward(x, train=True)
    model.zero_grads()
    model.backward(g)
    for name, p in model.params.items():
        assert max_rel_err(p.grad, finite_diff_grad(loss, p.value)) < 1e-4, name


def test_per_conv_controls_finite_difference():
    cfg = tiny_config(channels=4, num_bases=2, shared_coeff=False)
    model = build_model(cfg, tensor.Rng(16), dtype=np.float64)
    x = tensor.Rng(17).uniform(0, 1, (1, 3, 8, 8), dtype=np.float64)
    g = tensor.Rng(18).uniform(-1, 1, (1, 3, 16, 16), dtype=np.float64)

    def loss():
        return float((g * model.forward(x, train=True)).sum())

    model.forward(x, train=True)
    model.zero_grads()
    model.backward(g)
    for name, p in model.params.items():
        assert max_rel_err(p.grad, finite_diff_grad(loss, p.value)) < 1e-4, name


def test_tail_bias_grad_counts_positions():
    cfg = tiny_config(bias_enabled=True)
    model = build_model(cfg, tensor.Rng(19), dtype=np.float64)
    x = tensor.Rng(20).uniform(0, 1, (1, 3, 8, 8), dtype=np.float64)
    model.forward(x, train=True)
    model.zero_grads()
    model.backward(np.ones((1, 3, 16, 16), dtype=np.float64))
    # tail runs at 4x4 features; each bias entry feeds every position once
    assert np.allclose(model.params["tail.bias"].grad, 16.0, rtol=0, atol=1e-9)


def test_backward_without_forward_raises():
    model = build_model(tiny_config(), tensor.Rng(21))
    with pytest.raises((ConfigError, ShapeError)):
        model.backward(np.zeros((1, 3, 16, 16), dtype=np.float32))


def test_eval_forward_does_not_disturb_training_caches():
    # an eval-mode forward between a train-mode forward and its backward must
    # not change which activations the backward consumes
    model = build_model(tiny_config(), tensor.Rng(24))
    xa = tensor.Rng(25).uniform(0, 1, (1, 3, 8, 8))
    xb = tensor.Rng(26).uniform(0, 1, (2, 3, 16, 16))
    g = tensor.Rng(27).uniform(-1, 1, (1, 3, 16, 16))

    model.forward(xa, train=True)
    model.zero_grads()
    model.backward(g)
    want = {n: p.grad.copy() for n, p in model.params.items()}

    model.forward(xa, train=True)
    model.forward(xb, train=False)  # interloper
    model.zero_grads()
    model.backward(g)
    for n, p in model.params.items():
        assert np.array_equal(p.grad, want[n]), n


# ---------------------------------------------------------------------------
# parameter count


def test_param_count_single_conv():
    cost = 3 * 8 * 9
    from asconvsr.layers import ConvLayer, ParamStore
    store = ParamStore()
    ConvLayer(store, "c", 3, 8, 3, bias_enabled=False)
    assert store.n_scalars() == cost == 216


def test_param_count_large_preset_near_published():
    model = AsConvSR(preset_asconvsr_l())
    n = model.param_count()
    assert abs(n - 5.21e6) / 5.21e6 < 0.05


def test_param_count_doubles_with_bases():
    base = AsConvSR(tiny_config(channels=8, num_bases=4))
    doubled = AsConvSR(tiny_config(channels=8, num_bases=8))

    def basis_and_control(model):
        return sum(p.value.size for name, p in model.params.items()
                   if p.kind in ("basis", "control_weight"))

    assert basis_and_control(doubled) == 2 * basis_and_control(base)


def test_param_count_independent_of_resolution():
    model = build_model(tiny_config(), tensor.Rng(22))
    n0 = param_count(model)
    model.forward(tensor.Rng(23).uniform(0, 1, (1, 3, 8, 8)))
    model.forward(tensor.Rng(23).uniform(0, 1, (1, 3, 32, 32)))
    assert param_count(model) == n0


# ---------------------------------------------------------------------------
# FLOPs estimator


def test_flops_hand_values():
    assert conv_layer_cost("a", 1, 1, 1, 1, 1, False).flops == 1
    assert conv_layer_cost("b", 3, 1, 1, 1, 1, False).flops == 5
    report = flops_estimate(preset_asconvsr(), 1080, 1920)
    head = report.layers[0]
    assert head.name == "head" and head.flops == 3_566_592_000


def test_flops_bias_convention():
    with_bias = conv_layer_cost("c", 4, 8, 3, 10, 10, True)
    without = conv_layer_cost("c", 4, 8, 3, 10, 10, False)
    assert with_bias.flops == without.flops
    assert with_bias.bias_flops == 10 * 10 * 8 and without.bias_flops == 0
    assert with_bias.macs == 4 * 9 * 100 * 8


def test_flops_per_conv_quarters_when_halving_dims():
    cfg = preset_asconvsr()
    big = flops_estimate(cfg, 128, 128)
    small = flops_estimate(cfg, 64, 64)
    for lb, ls in zip(big.layers, small.layers):
        assert lb.flops == 4 * ls.flops and lb.macs == 4 * ls.macs


def test_flops_dynamic_overhead_reported_separately():
    report = flops_estimate(preset_asconvsr(), 64, 64)
    names = [o.name for o in report.overhead]
    assert any("control" in n for n in names) and any("assembly" in n for n in names)
    plain = flops_estimate(ModelConfig(conv_mode="plain"), 64, 64)
    assert plain.overhead == []
    assert report.total_flops > report.conv_flops


def test_flops_divisibility_error():
    with pytest.raises(ShapeError):
        flops_estimate(preset_asconvsr(), 63, 64)


def test_flops_report_serializes():
    report = flops_estimate(preset_asconvsr(), 64, 64)
    d = report.to_dict()
    assert d["total_flops"] == report.total_flops
    assert "head" in report.to_text()
