import numpy as np
import pytest

from asconvsr import tensor
from asconvsr.errors import ConfigError, ShapeError
from asconvsr.layers import (ConvLayer, ParamStore, add_identity_tap, init_params,
                             pixel_shuffle, pixel_shuffle_grad, pixel_unshuffle,
                             pixel_unshuffle_grad, repeat_upscale)

from conftest import finite_diff_grad, max_rel_err, nearest_neighbor_upscale


# ---------------------------------------------------------------------------
# pixel unshuffle / shuffle


def test_unshuffle_index_map_2x2():
    x = tensor.build([1, 1, 2, 2], data=[1, 2, 3, 4], dtype=np.float64)  # [[a,b],[c,d]]
    u = pixel_unshuffle(x, 2)
    assert u.shape == (1, 4, 1, 1)
    assert u.reshape(-1).tolist() == [1, 2, 3, 4]  # channel order a, b, c, d


def test_shuffle_index_map_2x2():
    x = tensor.build([1, 4, 1, 1], data=[1, 2, 3, 4], dtype=np.float64)
    s = pixel_shuffle(x, 2)
    assert s[0, 0].tolist() == [[1, 2], [3, 4]]


def test_unshuffle_full_hd_shape():
    x = np.zeros((1, 3, 1080, 1920), dtype=np.float32)
    assert pixel_unshuffle(x, 2).shape == (1, 12, 540, 960)


def test_shuffle_tail_head_shape():
    x = np.zeros((1, 48, 540, 960), dtype=np.float32)
    assert pixel_shuffle(x, 4).shape == (1, 3, 2160, 3840)


def test_factor_one_is_identity():
    x = tensor.Rng(0).uniform(0, 1, (1, 3, 4, 4))
    assert pixel_unshuffle(x, 1) is x
    assert pixel_shuffle(x, 1) is x


@pytest.mark.parametrize("r", [1, 2, 3, 4])
def test_shuffle_unshuffle_inverse_pair(r):
    rng = tensor.Rng(r)
    x = rng.uniform(-1, 1, (2, 3, 4 * r, 5 * r), dtype=np.float64)
    assert np.array_equal(pixel_shuffle(pixel_unshuffle(x, r), r), x)
    y = rng.uniform(-1, 1, (2, 3 * r * r, 4, 5), dtype=np.float64)
    assert np.array_equal(pixel_unshuffle(pixel_shuffle(y, r), r), y)


def test_shuffle_is_permutation():
    x = tensor.Rng(5).uniform(-1, 1, (1, 8, 6, 6), dtype=np.float64)
    s = pixel_shuffle(x, 2)
    assert np.array_equal(np.sort(s.reshape(-1)), np.sort(x.reshape(-1)))


def test_shuffle_divisibility_errors():
    with pytest.raises(ShapeError):
        pixel_unshuffle(np.zeros((1, 3, 5, 4), dtype=np.float32), 2)
    with pytest.raises(ShapeError):
        pixel_shuffle(np.zeros((1, 6, 4, 4), dtype=np.float32), 2)


def test_shuffle_grads_are_inverse_permutations():
    rng = tensor.Rng(6)
    x = rng.uniform(-1, 1, (1, 2, 4, 4), dtype=np.float64)
    g = rng.uniform(-1, 1, (1, 8, 2, 2), dtype=np.float64)

    def loss():
        return float((g * pixel_unshuffle(x, 2)).sum())

    assert max_rel_err(pixel_unshuffle_grad(g, 2), finite_diff_grad(loss, x)) < 1e-6

    y = rng.uniform(-1, 1, (1, 8, 2, 2), dtype=np.float64)
    g2 = rng.uniform(-1, 1, (1, 2, 4, 4), dtype=np.float64)

    def loss2():
        return float((g2 * pixel_shuffle(y, 2)).sum())

    assert max_rel_err(pixel_shuffle_grad(g2, 2), finite_diff_grad(loss2, y)) < 1e-6


# ---------------------------------------------------------------------------
# repeat upscale


def test_repeat_upscale_single_pixel():
    x = tensor.build([1, 3, 1, 1], data=[0.2, 0.5, 0.8], dtype=np.float64)
    rep = repeat_upscale(x, 2)
    assert rep.shape == (1, 12, 1, 1)
    up = pixel_shuffle(rep, 2)
    for c, v in enumerate([0.2, 0.5, 0.8]):
        assert np.all(up[0, c] == v)


def test_repeat_upscale_identity_r1():
    x = tensor.Rng(0).uniform(0, 1, (1, 3, 2, 2))
    assert repeat_upscale(x, 1) is x


def test_repeat_then_shuffle_is_nearest_neighbor():
    x = tensor.Rng(9).uniform(-1, 1, (1, 3, 4, 4), dtype=np.float64)
    got = pixel_shuffle(repeat_upscale(x, 2), 2)
    assert np.array_equal(got, nearest_neighbor_upscale(x, 2))


@pytest.mark.parametrize("r", [2, 3])
def test_repeat_nearest_neighbor_other_factors(r):
    x = tensor.Rng(r).uniform(-1, 1, (2, 3, 3, 5), dtype=np.float64)
    got = pixel_shuffle(repeat_upscale(x, r), r)
    assert np.array_equal(got, nearest_neighbor_upscale(x, r))


# ---------------------------------------------------------------------------
# ParamStore


def test_param_store_basics():
    store = ParamStore()
    store.register("a.weight", np.zeros((2, 2), dtype=np.float32))
    store.register("a.bias", np.zeros(2, dtype=np.float32), kind="bias")
    assert store.names() == ["a.weight", "a.bias"]
    assert store.n_scalars() == 6
    assert "a.weight" in store and "missing" not in store
    with pytest.raises(ConfigError):
        store.register("a.weight", np.zeros(1, dtype=np.float32))
    with pytest.raises(ConfigError):
        store["missing"]


def test_param_store_grad_shapes_and_zero():
    store = ParamStore()
    p = store.register("w", np.ones((3, 3), dtype=np.float32))
    assert p.grad.shape == p.value.shape and not p.grad.any()
    p.grad += 1
    store.zero_grads()
    assert not p.grad.any()


# ---------------------------------------------------------------------------
# conv layer


def test_conv_layer_bias_disabled_ignores_bias():
    store = ParamStore()
    layer = ConvLayer(store, "c", 2, 3, 3, bias_enabled=False, dtype=np.float64)
    layer.weight.value[...] = tensor.Rng(1).uniform(-1, 1, layer.weight.value.shape,
                                                    dtype=np.float64)
    x = tensor.Rng(2).uniform(-1, 1, (1, 2, 4, 4), dtype=np.float64)
    assert layer.bias is None
    y = layer.forward(x)
    assert y.shape == (1, 3, 4, 4)


def test_conv_layer_same_resolution():
    store = ParamStore()
    layer = ConvLayer(store, "c", 3, 5, 3, bias_enabled=True)
    x = tensor.Rng(3).uniform(0, 1, (2, 3, 7, 9))
    assert layer.forward(x).shape == (2, 5, 7, 9)


def test_conv_layer_grad_accumulates_additively():
    store = ParamStore()
    layer = ConvLayer(store, "c", 2, 2, 3, bias_enabled=True, dtype=np.float64)
    rng = tensor.Rng(4)
    layer.weight.value[...] = rng.uniform(-1, 1, layer.weight.value.shape, dtype=np.float64)
    x = rng.uniform(-1, 1, (1, 2, 4, 4), dtype=np.float64)
    g = rng.uniform(-1, 1, (1, 2, 4, 4), dtype=np.float64)
    layer.forward(x, train=True)
    layer.backward(g)
    once = layer.weight.grad.copy()
    layer.forward(x, train=True)
    layer.backward(g)
    assert np.allclose(layer.weight.grad, 2 * once, rtol=0, atol=1e-12)


def test_conv_layer_backward_requires_forward():
    store = ParamStore()
    layer = ConvLayer(store, "c", 2, 2, 3, bias_enabled=False)
    with pytest.raises(ConfigError):
        layer.backward(np.zeros((1, 2, 4, 4), dtype=np.float32))


# ---------------------------------------------------------------------------
# initialization


def test_he_normal_reproducible_and_scaled():
    store1, store2 = ParamStore(), ParamStore()
    for store in (store1, store2):
        ConvLayer(store, "c", 8, 8, 3, bias_enabled=True)
    init_params(store1, "he_normal", tensor.Rng(7))
    init_params(store2, "he_normal", tensor.Rng(7))
    assert np.array_equal(store1["c.weight"].value, store2["c.weight"].value)
    assert not store1["c.bias"].value.any()
    # std should be near sqrt(2 / (8 * 9))
    std = store1["c.weight"].value.std()
    assert 0.5 * np.sqrt(2 / 72) < std < 1.5 * np.sqrt(2 / 72)


def test_identity_tap_on_zero_weight_is_identity_conv():
    store = ParamStore()
    layer = ConvLayer(store, "c", 2, 2, 3, bias_enabled=False, dtype=np.float64)
    add_identity_tap(layer.weight.value)  # zero base + tap = identity map
    x = tensor.Rng(8).uniform(-1, 1, (1, 2, 5, 5), dtype=np.float64)
    assert np.array_equal(layer.forward(x), x)


def test_residual_equivalent_preserves_off_tap_values():
    store_he, store_re = ParamStore(), ParamStore()
    for store in (store_he, store_re):
        ConvLayer(store, "c", 4, 4, 3, bias_enabled=False)
    init_params(store_he, "he_normal", tensor.Rng(9))
    notices = init_params(store_re, "residual_equivalent", tensor.Rng(9))
    assert notices == []
    w_he = store_he["c.weight"].value
    w_re = store_re["c.weight"].value
    mask = np.zeros_like(w_he, dtype=bool)
    for o in range(4):
        mask[o, o, 1, 1] = True
    assert np.array_equal(w_re[~mask], w_he[~mask])
    assert np.allclose(w_re[mask] - w_he[mask], 1.0)


def test_residual_equivalent_skips_non_square_with_notice():
    store = ParamStore()
    ConvLayer(store, "head", 12, 32, 3, bias_enabled=False)
    notices = init_params(store, "residual_equivalent", tensor.Rng(10))
    assert len(notices) == 1 and "head.weight" in notices[0]


def test_init_unknown_scheme():
    with pytest.raises(ConfigError):
        init_params(ParamStore(), "xavier", tensor.Rng(0))
