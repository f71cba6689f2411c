"""
MLP decoders and the random Fourier feature embedding.

Parameters live in flat dicts keyed "decoder/<layer>/<V|b|s>". The forward
pass takes plain arrays, taped Vars or MultiJets; the arithmetic is shared.
"""
import logging
from dataclasses import dataclass

import numpy as np

from utils import autodiff as ad
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class DecoderConfig:
    arch: str = "modified_mlp"
    width: int = 256
    depth: int = 4
    activation: str = "tanh"
    weight_fact: bool = True
    fact_mean: float = 1.0
    fact_std: float = 0.1
    input_dim: int = 1
    output_dim: int = 1

    def __post_init__(self):
        if self.arch not in ("modified_mlp", "vanilla_mlp"):
            raise ConfigError(f"mlp.arch must be modified_mlp or vanilla_mlp, got '{self.arch}'")
        if self.width < 1 or self.depth < 1:
            raise ConfigError(f"mlp.width and mlp.depth must be >= 1, got {self.width}, {self.depth}")
        if self.weight_fact and not self.fact_std > 0:
            raise ConfigError(f"mlp.fact_std must be > 0 with weight_fact, got {self.fact_std}")
        if self.weight_fact and not self.fact_mean > 0:
            raise ConfigError(f"mlp.fact_mean must be > 0 with weight_fact, got {self.fact_mean}")
        ad.get_activation(self.activation)


def layer_shapes(config):
    """Ordered (name, fan_in, fan_out) of every dense layer."""
    # The modified MLP adds two encoder branches on the raw input
    shapes = []
    if config.arch == "modified_mlp":
        shapes.append(("encoder_u", config.input_dim, config.width))
        shapes.append(("encoder_v", config.input_dim, config.width))
    # Hidden stack, then the linear output layer
    fan_in = config.input_dim
    for i in range(config.depth):
        shapes.append((f"hidden{i}", fan_in, config.width))
        fan_in = config.width
    shapes.append(("output", fan_in, config.output_dim))
    return shapes


def param_count(config):
    """Number of scalar decoder parameters."""
    total = 0
    for _, fan_in, fan_out in layer_shapes(config):
        # Weights and biases
        total += fan_in * fan_out + fan_out
        # One log-scale per output unit
        if config.weight_fact:
            total += fan_out
    return total


def init_decoder(config, seed):
    """
    Glorot-uniform directions, zero biases and log-normal factorization scales

    Parameters:
    - config: DecoderConfig
    - seed: integer seed or numpy Generator

    Returns:
    - dict of parameter arrays
    """
    # Accept a seed or an existing Generator
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, fan_in, fan_out in layer_shapes(config):
        # Glorot-uniform bound
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"decoder/{name}/V"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"decoder/{name}/b"] = np.zeros(fan_out)
        if config.weight_fact:
            # exp(s) is log-normal around fact_mean
            params[f"decoder/{name}/s"] = rng.normal(np.log(config.fact_mean), config.fact_std, size=fan_out)
    return params


def effective_weight(params, name):
    """W = V * exp(s) per output unit, or V when the layer is not factorized."""
    direction = params[f"decoder/{name}/V"]
    scale_key = f"decoder/{name}/s"
    if scale_key not in params:
        return direction
    # Broadcast the scales across rows of V
    scales = ad.reshape(ad.exp(params[scale_key]), (1, -1))
    return direction * scales


def _dense(params, name, x):
    weight = effective_weight(params, name)
    bias = params[f"decoder/{name}/b"]
    return x @ weight + bias


def _input_dim(x):
    # Unwrap jets and tape nodes to read the shape
    value = x.value if isinstance(x, ad.MultiJet) else x
    return np.shape(value.value if isinstance(value, ad.Var) else value)[-1]


def decoder_forward(params, x, config):
    """
    Run the decoder on a batch of inputs

    Parameters:
    - params: dict of arrays or Vars
    - x: (P, input_dim) array, Var or MultiJet
    - config: DecoderConfig

    Returns:
    - (P, output_dim) output of the same kind as x
    """
    if _input_dim(x) != config.input_dim:
        raise ShapeError(f"decoder expects {config.input_dim} inputs, got {_input_dim(x)}")
    # Same activation for every layer
    act = ad.get_activation(config.activation)

    # Plain stack of dense layers
    if config.arch == "vanilla_mlp":
        h = x
        for i in range(config.depth):
            h = act(_dense(params, f"hidden{i}", h))
        return _dense(params, "output", h)

    # Encoder branches are computed once and reused by every layer
    u = act(_dense(params, "encoder_u", x))
    v = act(_dense(params, "encoder_v", x))
    h = x
    for i in range(config.depth):
        h = act(_dense(params, f"hidden{i}", h))
        # gate between the two encoder branches
        h = h * u + (1.0 - h) * v
    return _dense(params, "output", h)


@dataclass
class RFFEmbedding:
    B: np.ndarray
    sigma: float

    @property
    def output_dim(self):
        return 2 * self.B.shape[0]


def init_rff(input_dim, num_features, sigma, seed):
    """Fixed frequencies B = 2 pi N(0, sigma^2), shaped (num_features, input_dim)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return RFFEmbedding(2.0 * np.pi * sigma * rng.standard_normal((num_features, input_dim)), sigma)


def rff_embed(B, x):
    """concat(cos(B x), sin(B x)) for x of shape (P, D), an array or a MultiJet."""
    # Project onto the fixed frequencies
    projected = x @ B.T
    pieces = [ad.cos(projected), ad.sin(projected)]
    # Jets concatenate their coefficients too
    if isinstance(projected, ad.MultiJet):
        return ad.concatenate_jets(pieces, axis=-1)
    return np.concatenate(pieces, axis=-1)
