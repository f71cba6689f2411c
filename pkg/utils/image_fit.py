"""
Coordinate regression of images: (x, y) -> RGB with a pyramid model, a random
Fourier feature MLP or a plain MLP.
"""
import logging
import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

from utils import autodiff as ad
from utils.decoder import DecoderConfig
from utils.diagnostics import psnr
from utils.errors import ConfigError, DomainError, FileFormatError, ShapeError
from utils.field_model import DomainMap, build_beignet, build_coordinate_network, with_params
from utils.file_formats import atomic_write_bytes
from utils.problems import image_fit_loss, render_image
from utils.pyramid import PyramidConfig
from utils.training import ScheduleSpec, adam_step, init_optimizer

logger = logging.getLogger(__name__)

MODEL_KINDS = ("beignet", "rff", "vanilla")
IMAGE_DOMAIN = DomainMap(lower=(0.0, 0.0), upper=(1.0, 1.0), t_lower=0.0, t_upper=1.0, periodic=True)


@dataclass
class ImageTarget:
    """(H, W, 3) float64 pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"images must be (H, W, 3), got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0 or self.pixels.max() > 1:
            raise DomainError("pixel values must lie in [0, 1]")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def _header_tokens(raw, count):
    """First `count` whitespace-separated header tokens, skipping # comments, and the payload offset."""
    tokens = []
    position = 0
    token_pattern = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
    while len(tokens) < count:
        match = token_pattern.match(raw, position)
        if match is None:
            raise FileFormatError("truncated PPM header")
        tokens.append(match.group(1))
        position = match.end()
    return tokens, position


def read_ppm(path):
    """
    Read a P6 (binary) or P3 (ASCII) portable pixmap

    Returns:
    - ImageTarget scaled by the file's maximum value
    """
    with open(path, "rb") as f:
        raw = f.read()
    tokens, offset = _header_tokens(raw, 4)
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise FileFormatError(f"{path}: malformed PPM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FileFormatError(f"{path}: invalid PPM dimensions or maximum value")
    count = width * height * 3

    if magic == b"P6":
        # exactly one whitespace byte separates the header from the raster
        data = raw[offset + 1:]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(data) < count * dtype.itemsize:
            raise FileFormatError(f"{path}: truncated raster")
        values = np.frombuffer(data[:count * dtype.itemsize], dtype=dtype).astype(float)
    elif magic == b"P3":
        numbers = re.sub(rb"#[^\n]*", b"", raw[offset:]).split()
        if len(numbers) < count:
            raise FileFormatError(f"{path}: truncated raster")
        values = np.array([int(n) for n in numbers[:count]], dtype=float)
    else:
        raise FileFormatError(f"{path}: unsupported pixmap type {magic!r}")
    return ImageTarget(np.clip(values.reshape(height, width, 3) / maxval, 0.0, 1.0))


def write_ppm(path, image, binary=True):
    """Write an image in [0, 1] as an 8-bit P6 (or P3) pixmap."""
    pixels = image.pixels if isinstance(image, ImageTarget) else np.asarray(image, dtype=float)
    height, width = pixels.shape[:2]
    quantized = np.rint(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)
    if binary:
        payload = f"P6\n{width} {height}\n255\n".encode("ascii") + quantized.tobytes()
    else:
        rows = [" ".join(str(v) for v in row) for row in quantized.reshape(height, -1)]
        payload = (f"P3\n{width} {height}\n255\n" + "\n".join(rows) + "\n").encode("ascii")
    atomic_write_bytes(path, payload)


def pattern_image(size=64):
    """
    Procedural multi-frequency RGB fixture

    Low-frequency gradients, concentric rings and a fine product of sines, so
    both coarse and fine scales carry energy.
    """
    coords = np.arange(size) / size
    X, Y = np.meshgrid(coords, coords, indexing="ij")
    radius = np.sqrt((X - 0.45) ** 2 + (Y - 0.55) ** 2)
    red = 0.5 + 0.35 * np.sin(2 * np.pi * (X + 2 * Y)) + 0.15 * np.cos(2 * np.pi * 9 * X)
    green = 0.5 + 0.4 * np.cos(2 * np.pi * 12 * radius) * np.exp(-3.0 * radius)
    blue = 0.5 + 0.25 * np.sin(2 * np.pi * 16 * X) * np.sin(2 * np.pi * 5 * Y) + 0.2 * np.tanh(8 * (X - Y))
    return ImageTarget(np.clip(np.stack([red, green, blue], axis=-1), 0.0, 1.0))


def build_image_model(kind, image_shape, seed, rff_sigma=10.0, rff_features=128):
    """
    Coordinate model of the requested kind for an (H, W) image

    beignet: pyramid up to the image resolution with a small decoder; rff: MLP on
    random Fourier features of the coordinates; vanilla: MLP on raw coordinates.
    """
    if kind == "beignet":
        finest = int(max(image_shape))
        num_scales = max(1, int(np.log2(finest)) - 1)
        pyramid = PyramidConfig(num_scales=num_scales, spatial_dims=2, min_grid=4, num_features=4,
                                time_bins=0, init_noise=0.1)
        decoder = DecoderConfig(arch="vanilla_mlp", width=32, depth=2, weight_fact=False, output_dim=3)
        return build_beignet(pyramid, decoder, IMAGE_DOMAIN, seed, use_coords=True, time_dependent=False)
    elif kind == "rff":
        decoder = DecoderConfig(arch="vanilla_mlp", width=64, depth=3, weight_fact=False, output_dim=3)
        return build_coordinate_network(decoder, IMAGE_DOMAIN, seed, rff_features=rff_features,
                                        rff_sigma=rff_sigma, time_dependent=False)
    elif kind == "vanilla":
        decoder = DecoderConfig(arch="vanilla_mlp", width=64, depth=3, weight_fact=False, output_dim=3)
        return build_coordinate_network(decoder, IMAGE_DOMAIN, seed, time_dependent=False)
    raise ConfigError(f"Unknown image model kind '{kind}', expected one of {', '.join(MODEL_KINDS)}")


def model_param_count(model):
    return int(sum(np.size(v) for v in model.params.values()))


def fit_image(kind, image, steps=2000, lr=1e-3, seed=0, log_every=100, **model_kwargs):
    """
    Fit a coordinate model to an image with full-grid MSE and Adam

    Parameters:
    - kind: beignet, rff or vanilla
    - image: ImageTarget or (H, W, 3) array
    - steps: number of Adam steps
    - lr: constant learning rate
    - seed: initialization seed
    - log_every: PSNR logging period

    Returns:
    - trained model and a DataFrame trace with step, psnr and param_count
    """
    target = image if isinstance(image, ImageTarget) else ImageTarget(image)
    pixels = target.pixels
    model = build_image_model(kind, pixels.shape[:2], seed, **model_kwargs)
    params = model.params
    optimizer = init_optimizer(params, ScheduleSpec(kind="constant", learning_rate=lr))
    count = model_param_count(model)
    trace = []

    def record(step):
        value = psnr(render_image(model, pixels.shape[:2]), pixels)
        trace.append({"model": kind, "step": step, "psnr": value, "param_count": count})
        logger.info("%s step %d: PSNR %.2f dB", kind, step, value)

    for step in range(steps):
        if step % log_every == 0:
            record(step)
        tape = ad.Tape()
        names = list(params)
        leaves = [tape.watch(params[k], k) for k in names]
        loss = image_fit_loss(model, pixels, dict(zip(names, leaves)))
        grads = dict(zip(names, tape.gradient(loss, leaves)))
        params, optimizer = adam_step(params, grads, optimizer)
        model = with_params(model, params)
    record(steps)
    return model, pd.DataFrame(trace)
