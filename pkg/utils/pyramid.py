"""
Learnable multi-resolution Fourier feature pyramid.

Each level stores one periodic feature grid per temporal anchor, shaped
(anchors, *spatial, channels). Features are read out either on a structured
residual grid through FFTs (spectral_features) or at arbitrary points through
a direct mode sum (pointwise_features). Both readouts are linear in the stored
grids and are recorded on the tape as single linear_map nodes.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from utils.autodiff import linear_map
from utils.errors import ConfigError, DomainError, ResolutionError, ShapeError, UnsupportedSizeError
from utils.ndarray_fft import (
    extend_spectrum,
    extend_spectrum_adjoint,
    extended_modes,
    fold_spectrum,
    fold_spectrum_adjoint,
    interpolation_basis,
    is_power_of_two,
    mode_multiplier,
    signed_modes,
)

logger = logging.getLogger(__name__)

_worker_threads = max(1, int(os.environ.get("SPINN_THREADS", "1") or 1))


def set_worker_threads(count):
    """Number of threads used for chunked pointwise evaluation."""
    global _worker_threads
    _worker_threads = max(1, int(count))


def get_worker_threads():
    return _worker_threads


@dataclass
class PyramidConfig:
    num_scales: int = 4
    spatial_dims: int = 1
    min_grid: int = 2
    resize_scale: int = 2
    num_features: int = 8
    time_bins: int = 8
    t_resize_scale: float = 1.0
    global_precond: float = 1.0
    per_level_precond: float = 1.0
    spectral_precond_K: float = 0.0
    init_noise: float = 0.1
    level_sizes: list = None

    def __post_init__(self):
        if self.num_scales < 1:
            raise ConfigError(f"pyramid.num_scales must be >= 1, got {self.num_scales}")
        if self.num_features < 1:
            raise ConfigError(f"pyramid.num_features must be >= 1, got {self.num_features}")
        if self.spatial_dims not in (1, 2):
            raise ConfigError(f"pyramid.spatial_dims must be 1 or 2, got {self.spatial_dims}")
        if not self.init_noise > 0:
            raise ConfigError(f"pyramid.init_noise must be > 0, got {self.init_noise}")
        if self.time_bins < 0:
            raise ConfigError(f"pyramid.time_bins must be >= 0, got {self.time_bins}")
        if self.level_sizes is not None and len(self.level_sizes) != self.num_scales:
            raise ConfigError(
                f"pyramid.level_sizes has {len(self.level_sizes)} entries for {self.num_scales} scales"
            )
        for n in self.sizes:
            if n < 2 or not is_power_of_two(n):
                raise ConfigError(f"pyramid level size {n} is not an even power of two")

    @property
    def sizes(self):
        """Spatial size N of every level (same along each axis)."""
        if self.level_sizes is not None:
            return [int(n) for n in self.level_sizes]
        return [int(round(self.min_grid * self.resize_scale ** level)) for level in range(self.num_scales)]

    def level_time_bins(self, level):
        if self.time_bins == 0:
            return 0
        return max(1, int(round(self.time_bins * self.t_resize_scale ** level)))

    def level_anchors(self, level):
        return self.level_time_bins(level) + 1

    def level_scale(self, level):
        return self.global_precond * self.per_level_precond ** level

    def level_shape(self, level):
        n = self.sizes[level]
        return (self.level_anchors(level),) + (n,) * self.spatial_dims + (self.num_features,)

    @property
    def feature_dim(self):
        return self.num_scales * self.num_features


@dataclass
class FourierPyramid:
    config: PyramidConfig
    levels: list = field(default_factory=list)

    def params(self):
        return {f"pyramid/level{i}": grid for i, grid in enumerate(self.levels)}


@dataclass
class FeatureGridBundle:
    """Per-level features on a residual grid: values[alpha][level] has shape (T, *M, channels)."""

    values: dict
    rates: list
    grid_sizes: tuple
    times: np.ndarray
    shifts: np.ndarray


def param_count(config):
    return int(sum(np.prod(config.level_shape(level)) for level in range(config.num_scales)))


def init_pyramid(config, seed):
    """
    Draw i.i.d. Gaussian pyramid parameters

    Parameters:
    - config: PyramidConfig
    - seed: integer seed or numpy Generator

    Returns:
    - FourierPyramid
    """
    # One Gaussian grid per level, all anchors drawn together
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    levels = [rng.normal(0.0, config.init_noise, size=config.level_shape(level))
              for level in range(config.num_scales)]
    logger.debug("Initialized pyramid with sizes %s and %d parameters", config.sizes, param_count(config))
    return FourierPyramid(config, levels)


def blend_weights(num_bins, times):
    """
    Piecewise-linear blending weights over num_bins + 1 anchors

    Returns:
    - W: (P, A) value weights
    - W_t: (P, A) weights of the time derivative, constant within a bin
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.isnan(times).any() or (times < 0).any() or (times > 1).any():
        raise DomainError("normalized times must lie in [0, 1]")
    if num_bins == 0:
        return np.ones((len(times), 1)), np.zeros((len(times), 1))

    # Locate each time within its bin
    scaled = times * num_bins
    # t = 1 falls in the last bin so it returns the last anchor
    index = np.minimum(np.floor(scaled).astype(int), num_bins - 1)
    frac = scaled - index
    rows = np.arange(len(times))
    weights = np.zeros((len(times), num_bins + 1))
    rates = np.zeros_like(weights)
    # Hat functions on the two anchors around each time
    weights[rows, index] = 1.0 - frac
    weights[rows, index + 1] = frac
    rates[rows, index] = -float(num_bins)
    rates[rows, index + 1] = float(num_bins)
    return weights, rates


def blend_temporal(pyramid, t):
    """
    Stored per-level grids blended at one normalized time

    Returns:
    - grids: list of (*N, channels) arrays
    - rates: list of d/dt of those grids
    """
    grids, rates = [], []
    for level, stored in enumerate(pyramid.levels):
        weights, weight_rates = blend_weights(pyramid.config.level_time_bins(level), [t])
        grids.append(np.tensordot(weights[0], stored, axes=1))
        rates.append(np.tensordot(weight_rates[0], stored, axes=1))
    return grids, rates


def spectral_precond_weights(n, dims, exponent):
    """(1 + |k|)^(-K) on the FFT-ordered modes of a (n,)*dims grid, |k| Euclidean."""
    k = signed_modes(n).astype(float)
    # Euclidean mode magnitude over all axes
    mesh = np.meshgrid(*([k] * dims), indexing="ij")
    magnitude = np.sqrt(sum(m * m for m in mesh))
    return (1.0 + magnitude) ** (-exponent)


def _level_multiplier(config, level):
    """Real per-mode preconditioner of one level, shaped (*N,)."""
    n = config.sizes[level]
    scale = config.level_scale(level)
    if config.spectral_precond_K == 0:
        return np.full((n,) * config.spatial_dims, scale)
    return scale * spectral_precond_weights(n, config.spatial_dims, config.spectral_precond_K)


def apply_preconditioner(grids, config):
    """
    Effective grids from raw per-level grids

    Parameters:
    - grids: list of (*N, channels) arrays, one per level
    - config: PyramidConfig

    Returns:
    - list of g_global * g_level^l * s_K applied to each grid
    """
    spatial = tuple(range(config.spatial_dims))
    effective = []
    for level, grid in enumerate(grids):
        if config.spectral_precond_K == 0:
            effective.append(config.level_scale(level) * grid)
            continue
        # Spectral damping is applied mode by mode
        multiplier = _level_multiplier(config, level)[..., None]
        spec = np.fft.fftn(grid, axes=spatial) * multiplier
        effective.append(np.fft.ifftn(spec, axes=spatial).real)
    return effective


def _check_grid(config, grid_sizes, allow_aliasing):
    if len(grid_sizes) != config.spatial_dims:
        raise ShapeError(f"expected {config.spatial_dims} grid sizes, got {len(grid_sizes)}")
    for m in grid_sizes:
        if not is_power_of_two(m):
            raise UnsupportedSizeError(f"residual grid size {m} is not a power of two")
    # Coarse residual grids need the aliasing fold
    finest = max(config.sizes)
    if not allow_aliasing and min(grid_sizes) < finest:
        raise ResolutionError(
            f"residual grid {tuple(grid_sizes)} is coarser than the finest pyramid level {finest}; "
            "set grid.allow_aliasing to fold the spectrum"
        )


def _axis_broadcast(factor, axis, dims):
    """Reshape a (T, K) per-axis factor to broadcast against (T, *K_axes, channels)."""
    shape = [factor.shape[0]] + [1] * dims + [1]
    shape[1 + axis] = factor.shape[1]
    return factor.reshape(shape)


def _grid_operator(config, level, weights, shifts, alpha, grid_sizes):
    """
    Forward and adjoint of stored level grid -> feature derivative grid

    The forward chain is FFT, preconditioning, Nyquist extension, temporal
    blend, wavenumber/phase multiplier, fold onto the residual grid, inverse FFT.
    """
    dims = config.spatial_dims
    n = config.sizes[level]
    spatial = tuple(range(1, dims + 1))
    multiplier = _level_multiplier(config, level)[None, ..., None]
    factors = [_axis_broadcast(mode_multiplier(n, alpha[axis], shifts[:, axis]), axis, dims)
               for axis in range(dims)]
    # ifftn on the M grid divides by M, the level transform by N
    grid_scale = np.prod(grid_sizes) / float(n) ** dims

    def forward(theta):
        spec = np.fft.fftn(theta, axes=spatial) * multiplier
        ext = extend_spectrum(spec, axes=spatial)
        # Blend the anchors per time slice, then apply derivative and shift factors
        blended = np.tensordot(weights, ext, axes=(1, 0))
        for factor in factors:
            blended = blended * factor
        # Fold the extended modes onto the residual grid
        for axis, size in enumerate(grid_sizes):
            blended = fold_spectrum(blended, n, size, axis=1 + axis)
        return np.fft.ifftn(blended, axes=spatial).real * grid_scale

    def adjoint(g):
        # Same chain in reverse order with conjugated factors
        spec = np.fft.fftn(g, axes=spatial) / float(n) ** dims
        for axis in range(dims):
            spec = fold_spectrum_adjoint(spec, n, axis=1 + axis)
        for factor in factors:
            spec = spec * np.conj(factor)
        # Scatter the slices back onto the anchors
        ext = np.tensordot(weights.T, spec, axes=(1, 0))
        spec = extend_spectrum_adjoint(ext, [n] * dims, spatial) * multiplier
        return (np.fft.ifftn(spec, axes=spatial) * float(n) ** dims).real

    return forward, adjoint


def _validate_shifts(shifts, count, grid_sizes):
    dims = len(grid_sizes)
    if shifts is None:
        return np.zeros((count, dims))
    shifts = np.asarray(shifts, dtype=float)
    # A single shift applies to every slice
    if shifts.ndim == 1:
        shifts = np.broadcast_to(shifts, (count, dims))
    if shifts.shape != (count, dims):
        raise ShapeError(f"shifts must have shape {(count, dims)}, got {shifts.shape}")
    # Shifts stay within one cell of the residual grid
    upper = 1.0 / np.asarray(grid_sizes, dtype=float)
    if (shifts < -1e-12).any() or (shifts > upper + 1e-12).any():
        raise DomainError("grid shifts must lie in [0, 1/M] per axis")
    return shifts


def spectral_features(pyramid, times, grid_sizes, shifts=None, derivatives=((0,),),
                      allow_aliasing=False, levels=None, time_rate=False):
    """
    Feature grids and their spatial derivatives on a structured residual grid

    Parameters:
    - pyramid: FourierPyramid
    - times: (T,) normalized times in [0, 1], one residual-grid slice each
    - grid_sizes: residual grid size M per spatial axis
    - shifts: (T, d) phase-ramp shifts in [0, 1/M], or None
    - derivatives: iterable of per-axis derivative orders, e.g. (0,), (1,), (3,)
    - allow_aliasing: fold levels finer than the grid instead of raising
    - levels: optional replacement for pyramid.levels (arrays or taped Vars)
    - time_rate: also return d/dt of the value features

    Returns:
    - FeatureGridBundle
    """
    config = pyramid.config
    grid_sizes = tuple(int(m) for m in grid_sizes)
    _check_grid(config, grid_sizes, allow_aliasing)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    shifts = _validate_shifts(shifts, len(times), grid_sizes)
    levels = pyramid.levels if levels is None else levels

    # One taped linear map per derivative index and level
    values = {}
    for alpha in derivatives:
        alpha = tuple(alpha)
        if len(alpha) != config.spatial_dims:
            raise ShapeError(f"derivative index {alpha} does not match {config.spatial_dims} axes")
        values[alpha] = []
        for level, theta in enumerate(levels):
            weights, _ = blend_weights(config.level_time_bins(level), times)
            forward, adjoint = _grid_operator(config, level, weights, shifts, alpha, grid_sizes)
            values[alpha].append(linear_map(theta, forward, adjoint, opcode=f"spectral/l{level}{alpha}"))

    # Time derivatives come from the blending weight rates
    rates = None
    if time_rate:
        rates = []
        zero = (0,) * config.spatial_dims
        for level, theta in enumerate(levels):
            _, weight_rates = blend_weights(config.level_time_bins(level), times)
            forward, adjoint = _grid_operator(config, level, weight_rates, shifts, zero, grid_sizes)
            rates.append(linear_map(theta, forward, adjoint, opcode=f"spectral_rate/l{level}"))

    return FeatureGridBundle(values, rates, grid_sizes, times, shifts)


def _chunks(count, chunk_size):
    return [slice(start, min(start + chunk_size, count)) for start in range(0, count, chunk_size)]


def _map_chunks(fn, slices):
    """Apply fn to each chunk; results come back in chunk order regardless of thread count."""
    if _worker_threads == 1 or len(slices) == 1:
        return [fn(s) for s in slices]
    # pool.map keeps the input order
    with ThreadPoolExecutor(max_workers=_worker_threads) as pool:
        return list(pool.map(fn, slices))


def _point_operator(config, level, weights, points, alpha, chunk_size):
    dims = config.spatial_dims
    n = config.sizes[level]
    sizes = (n,) * dims
    spatial = tuple(range(1, dims + 1))
    multiplier = _level_multiplier(config, level)[None, ..., None]
    anchors, channels = weights.shape[1], config.num_features
    norm = float(n) ** dims
    ext_len = len(extended_modes(n))
    slices = _chunks(len(points), chunk_size)

    def forward(theta):
        ext = extend_spectrum(np.fft.fftn(theta, axes=spatial) * multiplier, axes=spatial)
        # Modes as rows, (anchor, channel) pairs as columns
        flat = np.moveaxis(ext, 0, -2).reshape(-1, anchors * channels)

        def chunk(s):
            basis = interpolation_basis(points[s], sizes, alpha)
            per_anchor = (basis @ flat).real.reshape(-1, anchors, channels)
            # Blend the anchors of each point
            return np.einsum("pa,pac->pc", weights[s], per_anchor)

        return np.concatenate(_map_chunks(chunk, slices), axis=0) / norm

    def adjoint(g):
        def chunk(s):
            basis = interpolation_basis(points[s], sizes, alpha)
            weighted = (weights[s][:, :, None] * g[s][:, None, :]).reshape(-1, anchors * channels)
            return np.conj(basis).T @ weighted

        # Accumulate chunk contributions to the extended spectrum
        flat = np.zeros((ext_len ** dims, anchors * channels), dtype=complex)
        for part in _map_chunks(chunk, slices):
            flat = flat + part
        ext = np.moveaxis((flat / norm).reshape((ext_len,) * dims + (anchors, channels)), -2, 0)
        spec = extend_spectrum_adjoint(ext, list(sizes), spatial) * multiplier
        return (np.fft.ifftn(spec, axes=spatial) * norm).real

    return forward, adjoint


def pointwise_features(pyramid, times, points, derivatives=((0,),), levels=None,
                       time_rate=False, chunk_size=1024):
    """
    Features at arbitrary points by direct Fourier interpolation

    Parameters:
    - pyramid: FourierPyramid
    - times: (P,) normalized times, one per point (a scalar is broadcast)
    - points: (P, d) unit-torus coordinates
    - derivatives, levels, time_rate: as in spectral_features
    - chunk_size: points per basis block

    Returns:
    - FeatureGridBundle whose arrays have shape (P, channels)
    """
    config = pyramid.config
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != config.spatial_dims:
        raise ShapeError(f"points must have {config.spatial_dims} columns, got {points.shape[1]}")
    if np.isnan(points).any():
        raise DomainError("pointwise_features received a NaN coordinate")
    # A scalar time is shared by all points
    times = np.broadcast_to(np.asarray(times, dtype=float), (len(points),))
    levels = pyramid.levels if levels is None else levels

    # One taped linear map per derivative index and level
    values = {}
    for alpha in derivatives:
        alpha = tuple(alpha)
        values[alpha] = []
        for level, theta in enumerate(levels):
            weights, _ = blend_weights(config.level_time_bins(level), times)
            forward, adjoint = _point_operator(config, level, weights, points, alpha, chunk_size)
            values[alpha].append(linear_map(theta, forward, adjoint, opcode=f"pointwise/l{level}{alpha}"))

    # Time derivatives come from the blending weight rates
    rates = None
    if time_rate:
        rates = []
        zero = (0,) * config.spatial_dims
        for level, theta in enumerate(levels):
            _, weight_rates = blend_weights(config.level_time_bins(level), times)
            forward, adjoint = _point_operator(config, level, weight_rates, points, zero, chunk_size)
            rates.append(linear_map(theta, forward, adjoint, opcode=f"pointwise_rate/l{level}"))

    return FeatureGridBundle(values, rates, None, times, None)
