import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils import autodiff as ad
from utils.decoder import (
    DecoderConfig,
    decoder_forward,
    effective_weight,
    init_decoder,
    init_rff,
    layer_shapes,
    param_count,
    rff_embed,
)
from utils.errors import ConfigError, ShapeError, UnsupportedPrimitiveError


@pytest.mark.parametrize("arch", ["modified_mlp", "vanilla_mlp"])
@pytest.mark.parametrize("weight_fact", [True, False])
def test_param_count_matches_init(arch, weight_fact):
    config = DecoderConfig(arch=arch, width=6, depth=3, weight_fact=weight_fact, input_dim=5, output_dim=2)
    params = init_decoder(config, 0)
    assert param_count(config) == sum(p.size for p in params.values())


def test_layer_layout():
    config = DecoderConfig(arch="modified_mlp", width=4, depth=2, input_dim=3, output_dim=1)
    names = [name for name, _, _ in layer_shapes(config)]
    assert names == ["encoder_u", "encoder_v", "hidden0", "hidden1", "output"]


def test_weight_factorization():
    config = DecoderConfig(width=4, depth=1, weight_fact=True, fact_mean=0.5, fact_std=0.1, input_dim=2)
    params = init_decoder(config, 3)
    weight = effective_weight(params, "hidden0")
    assert_allclose(weight, params["decoder/hidden0/V"] * np.exp(params["decoder/hidden0/s"])[None, :])
    assert np.exp(params["decoder/hidden0/s"]).mean() == pytest.approx(0.5, rel=0.3)


def test_forward_shape_and_input_check():
    config = DecoderConfig(width=8, depth=2, input_dim=3, output_dim=2)
    params = init_decoder(config, 0)
    out = decoder_forward(params, np.zeros((5, 3)), config)
    assert out.shape == (5, 2)
    with pytest.raises(ShapeError):
        decoder_forward(params, np.zeros((5, 4)), config)


@pytest.mark.parametrize("activation", ["tanh", "swish", "sin"])
def test_jet_derivatives_match_finite_differences(rng, activation):
    config = DecoderConfig(width=8, depth=2, activation=activation, input_dim=2, output_dim=1)
    params = init_decoder(config, 1)
    x = rng.uniform(-1, 1, (6, 1))
    offset = np.array([[0.3, -0.2]])
    direction = np.array([[1.0, 0.5]])

    def run(values):
        return decoder_forward(params, values * direction + offset, config)

    tails = {"x": [direction.repeat(6, axis=0), np.zeros((6, 2)), np.zeros((6, 2))]}
    jet = ad.MultiJet(x * direction + offset, tails)
    out = decoder_forward(params, jet, config)
    h = 1e-3
    first = (run(x + h) - run(x - h)) / (2 * h)
    second = (run(x + h) - 2 * run(x) + run(x - h)) / h ** 2
    third = (run(x + 2 * h) - 2 * run(x + h) + 2 * run(x - h) - run(x - 2 * h)) / (2 * h ** 3)
    assert_allclose(out.coefficient(""), run(x), atol=1e-14)
    assert_allclose(out.coefficient("x"), first, rtol=1e-5, atol=1e-8)
    assert_allclose(out.coefficient("xx"), second, rtol=1e-4, atol=1e-5)
    assert_allclose(out.coefficient("xxx"), third, rtol=1e-3, atol=1e-3)


def test_taped_params_give_the_parameter_gradient(rng):
    config = DecoderConfig(arch="vanilla_mlp", width=5, depth=2, weight_fact=True, input_dim=2, output_dim=1)
    params = init_decoder(config, 2)
    x = rng.standard_normal((4, 2))
    tape = ad.Tape()
    names = list(params)
    leaves = [tape.watch(params[k]) for k in names]
    out = decoder_forward(dict(zip(names, leaves)), x, config)
    grads = tape.gradient(ad.sum(out), leaves)

    key = "decoder/hidden1/s"
    index = names.index(key)
    bumped = dict(params)
    h = 1e-6
    bumped[key] = params[key] + h * np.eye(1, params[key].size, 2).ravel()
    upper = decoder_forward(bumped, x, config).sum()
    bumped[key] = params[key] - h * np.eye(1, params[key].size, 2).ravel()
    lower = decoder_forward(bumped, x, config).sum()
    assert grads[index][2] == pytest.approx((upper - lower) / (2 * h), rel=1e-6)


def test_rff_embedding():
    rff = init_rff(2, 16, sigma=3.0, seed=0)
    assert rff.B.shape == (16, 2)
    assert rff.output_dim == 32
    x = np.array([[0.1, 0.2], [0.5, 0.9]])
    embedded = rff_embed(rff.B, x)
    assert embedded.shape == (2, 32)
    assert_allclose(embedded[:, :16] ** 2 + embedded[:, 16:] ** 2, 1.0)


@pytest.mark.parametrize("kwargs, error", [
    ({"arch": "pirate"}, ConfigError),
    ({"width": 0}, ConfigError),
    ({"weight_fact": True, "fact_std": 0.0}, ConfigError),
    ({"activation": "relu"}, UnsupportedPrimitiveError),
])
def test_invalid_config(kwargs, error):
    with pytest.raises(error):
        DecoderConfig(**kwargs)
