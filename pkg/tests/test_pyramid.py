import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils import autodiff as ad
from utils.errors import ConfigError, DomainError, ResolutionError, UnsupportedSizeError
from utils.pyramid import (
    PyramidConfig,
    apply_preconditioner,
    blend_temporal,
    blend_weights,
    init_pyramid,
    param_count,
    pointwise_features,
    set_worker_threads,
    spectral_features,
)


def _grid_points(sizes, shifts):
    """Unit coordinates of every node of every slice, flattened like the spectral output."""
    axes = [np.arange(m) / m for m in sizes]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(sizes))
    return np.concatenate([mesh + shift for shift in shifts], axis=0)


def _spectral_as_points(bundle, alpha, level):
    values = bundle.values[alpha][level]
    return values.reshape(-1, values.shape[-1])


class TestConfig:
    def test_sizes_and_param_count(self):
        config = PyramidConfig(num_scales=3, min_grid=2, num_features=4, time_bins=2)
        assert config.sizes == [2, 4, 8]
        assert config.level_shape(2) == (3, 8, 4)
        assert param_count(config) == 3 * 4 * (2 + 4 + 8)
        assert config.feature_dim == 12

    def test_two_dimensional_shapes(self):
        config = PyramidConfig(num_scales=2, spatial_dims=2, min_grid=4, num_features=3, time_bins=0)
        assert config.level_shape(1) == (1, 8, 8, 3)
        assert param_count(config) == 3 * (16 + 64)

    def test_per_level_time_bins(self):
        config = PyramidConfig(num_scales=3, time_bins=8, t_resize_scale=0.5)
        assert [config.level_time_bins(level) for level in range(3)] == [8, 4, 2]

    def test_explicit_level_sizes(self):
        config = PyramidConfig(num_scales=3, level_sizes=[16, 16, 16])
        assert config.sizes == [16, 16, 16]

    @pytest.mark.parametrize("kwargs", [
        {"num_scales": 0},
        {"num_features": 0},
        {"init_noise": 0.0},
        {"num_scales": 2, "level_sizes": [4, 6]},
        {"num_scales": 2, "level_sizes": [4]},
        {"spatial_dims": 3},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            PyramidConfig(**kwargs)

    def test_preconditioner_scale(self):
        config = PyramidConfig(num_scales=4, global_precond=1000.0, per_level_precond=0.25)
        assert config.level_scale(2) == pytest.approx(62.5)

    def test_init_is_seeded(self):
        config = PyramidConfig(num_scales=2, num_features=3)
        a = init_pyramid(config, 7)
        b = init_pyramid(config, 7)
        for x, y in zip(a.levels, b.levels):
            assert np.array_equal(x, y)
        assert np.std(np.concatenate([g.ravel() for g in a.levels])) == pytest.approx(0.1, rel=0.3)


class TestTemporalBlending:
    def test_anchor_weights(self):
        weights, rates = blend_weights(4, [0.0, 0.25, 0.6, 1.0])
        assert_allclose(weights[0], [1, 0, 0, 0, 0])
        assert_allclose(weights[1], [0, 1, 0, 0, 0])
        assert_allclose(weights[2], [0, 0, 0.6, 0.4, 0], atol=1e-12)
        assert_allclose(weights[3], [0, 0, 0, 0, 1])
        assert_allclose(weights.sum(axis=1), 1.0)
        assert_allclose(rates.sum(axis=1), 0.0)

    def test_single_anchor(self):
        weights, rates = blend_weights(0, [0.3, 0.9])
        assert_allclose(weights, 1.0)
        assert_allclose(rates, 0.0)

    @pytest.mark.parametrize("t", [-0.1, 1.1, np.nan])
    def test_out_of_range(self, t):
        with pytest.raises(DomainError):
            blend_weights(2, [t])

    def test_features_are_linear_between_anchors(self, rng):
        config = PyramidConfig(num_scales=2, min_grid=4, num_features=2, time_bins=2)
        pyramid = init_pyramid(config, rng)
        left = spectral_features(pyramid, [0.0], (8,)).values[(0,)]
        right = spectral_features(pyramid, [0.5], (8,)).values[(0,)]
        middle = spectral_features(pyramid, [0.2], (8,)).values[(0,)]
        for level in range(2):
            assert_allclose(middle[level], 0.6 * left[level] + 0.4 * right[level], atol=1e-12)

    def test_blend_temporal_rates(self, rng):
        config = PyramidConfig(num_scales=1, min_grid=4, num_features=1, time_bins=4)
        pyramid = init_pyramid(config, rng)
        grids, rates = blend_temporal(pyramid, 0.3)
        ahead, _ = blend_temporal(pyramid, 0.31)
        assert_allclose(rates[0], (ahead[0] - grids[0]) / 0.01, atol=1e-9)


class TestReadout:
    @pytest.mark.parametrize("alpha", [(0,), (1,), (2,), (3,)])
    def test_spectral_matches_pointwise_1d(self, rng, alpha):
        config = PyramidConfig(num_scales=3, min_grid=2, num_features=3, time_bins=3, spectral_precond_K=1.0)
        pyramid = init_pyramid(config, rng)
        times = rng.uniform(0, 1, 4)
        shifts = rng.uniform(0, 1 / 16, (4, 1))
        bundle = spectral_features(pyramid, times, (16,), shifts, derivatives=[alpha])
        points = _grid_points((16,), shifts)
        point_times = np.repeat(times, 16)
        reference = pointwise_features(pyramid, point_times, points, derivatives=[alpha])
        for level in range(3):
            expected = reference.values[alpha][level]
            scale = np.abs(expected).max()
            assert_allclose(_spectral_as_points(bundle, alpha, level), expected, atol=1e-10 * scale)

    @pytest.mark.parametrize("alpha", [(0, 0), (2, 0), (0, 1)])
    def test_spectral_matches_pointwise_2d(self, rng, alpha):
        config = PyramidConfig(num_scales=2, spatial_dims=2, min_grid=4, num_features=2, time_bins=1)
        pyramid = init_pyramid(config, rng)
        times = np.array([0.2, 0.9])
        shifts = rng.uniform(0, 1 / 8, (2, 2))
        bundle = spectral_features(pyramid, times, (8, 8), shifts, derivatives=[alpha])
        points = _grid_points((8, 8), shifts)
        reference = pointwise_features(pyramid, np.repeat(times, 64), points, derivatives=[alpha])
        for level in range(2):
            expected = reference.values[alpha][level]
            assert_allclose(_spectral_as_points(bundle, alpha, level), expected,
                            atol=1e-10 * np.abs(expected).max())

    def test_time_rate_matches_pointwise(self, rng):
        config = PyramidConfig(num_scales=2, min_grid=4, num_features=2, time_bins=4)
        pyramid = init_pyramid(config, rng)
        times = np.array([0.1, 0.7])
        bundle = spectral_features(pyramid, times, (8,), time_rate=True)
        reference = pointwise_features(pyramid, np.repeat(times, 8), _grid_points((8,), np.zeros((2, 1))),
                                       time_rate=True)
        for level in range(2):
            assert_allclose(bundle.rates[level].reshape(-1, 2), reference.rates[level], atol=1e-10)

    def test_coarse_grid_needs_aliasing(self, rng):
        config = PyramidConfig(num_scales=3, min_grid=4, num_features=2, time_bins=1)
        pyramid = init_pyramid(config, rng)
        with pytest.raises(ResolutionError):
            spectral_features(pyramid, [0.5], (8,))

    @pytest.mark.parametrize("alpha", [(0,), (1,), (2,)])
    def test_aliased_grid_samples_the_interpolant(self, rng, alpha):
        config = PyramidConfig(num_scales=3, min_grid=4, num_features=2, time_bins=1)
        pyramid = init_pyramid(config, rng)
        shifts = np.array([[0.03]])
        bundle = spectral_features(pyramid, [0.5], (4,), shifts, derivatives=[alpha], allow_aliasing=True)
        reference = pointwise_features(pyramid, 0.5, _grid_points((4,), shifts), derivatives=[alpha])
        for level in range(3):
            expected = reference.values[alpha][level]
            assert_allclose(_spectral_as_points(bundle, alpha, level), expected,
                            atol=1e-10 * np.abs(expected).max())

    def test_bandlimit(self, rng):
        config = PyramidConfig(num_scales=1, min_grid=8, num_features=1, time_bins=0)
        pyramid = init_pyramid(config, rng)
        values = spectral_features(pyramid, [0.0], (32,)).values[(0,)][0][0, :, 0]
        spec = np.fft.fft(values)
        modes = np.abs(np.fft.fftfreq(32, 1 / 32))
        assert np.abs(spec[modes > 4]).max() < 1e-10 * np.abs(spec).max()

    def test_grid_validation(self, rng):
        config = PyramidConfig(num_scales=1, min_grid=4, num_features=1)
        pyramid = init_pyramid(config, rng)
        with pytest.raises(UnsupportedSizeError):
            spectral_features(pyramid, [0.0], (12,))
        with pytest.raises(DomainError):
            spectral_features(pyramid, [0.0], (8,), shifts=[[0.5]])

    def test_preconditioner_scales_features(self, rng):
        plain = PyramidConfig(num_scales=2, min_grid=4, num_features=1, time_bins=0)
        scaled = PyramidConfig(num_scales=2, min_grid=4, num_features=1, time_bins=0,
                               global_precond=3.0, per_level_precond=0.5)
        pyramid = init_pyramid(plain, rng)
        base = spectral_features(pyramid, [0.0], (8,)).values[(0,)]
        pyramid.config = scaled
        boosted = spectral_features(pyramid, [0.0], (8,)).values[(0,)]
        assert_allclose(boosted[0], 3.0 * base[0])
        assert_allclose(boosted[1], 1.5 * base[1])
        effective = apply_preconditioner([level[0] for level in pyramid.levels], scaled)
        assert_allclose(effective[1], 1.5 * pyramid.levels[1][0])

    @pytest.mark.parametrize("spatial_dims", [1, 2])
    def test_gradient_is_the_adjoint(self, rng, spatial_dims):
        sizes = (8,) * spatial_dims
        config = PyramidConfig(num_scales=2, spatial_dims=spatial_dims, min_grid=4, num_features=2,
                               time_bins=2, spectral_precond_K=0.5)
        pyramid = init_pyramid(config, rng)
        times = np.array([0.3, 0.8])
        shifts = rng.uniform(0, 1 / 8, (2, spatial_dims))
        alpha = (1,) + (0,) * (spatial_dims - 1)
        cotangent = rng.standard_normal((2,) + sizes + (2,))
        direction = rng.standard_normal(pyramid.levels[1].shape)

        tape = ad.Tape()
        leaf = tape.watch(pyramid.levels[1])
        bundle = spectral_features(pyramid, times, sizes, shifts, derivatives=[alpha],
                                   levels=[pyramid.levels[0], leaf])
        (grad,) = tape.gradient(ad.sum(bundle.values[alpha][1] * cotangent), [leaf])

        moved = spectral_features(pyramid, times, sizes, shifts, derivatives=[alpha],
                                  levels=[pyramid.levels[0], direction])
        assert np.sum(grad * direction) == pytest.approx(np.sum(moved.values[alpha][1] * cotangent), rel=1e-10)

    def test_pointwise_gradient_is_the_adjoint(self, rng):
        config = PyramidConfig(num_scales=1, min_grid=8, num_features=2, time_bins=2)
        pyramid = init_pyramid(config, rng)
        points = rng.uniform(0, 1, (10, 1))
        times = rng.uniform(0, 1, 10)
        cotangent = rng.standard_normal((10, 2))
        direction = rng.standard_normal(pyramid.levels[0].shape)

        tape = ad.Tape()
        leaf = tape.watch(pyramid.levels[0])
        bundle = pointwise_features(pyramid, times, points, derivatives=[(2,)], levels=[leaf], chunk_size=3)
        (grad,) = tape.gradient(ad.sum(bundle.values[(2,)][0] * cotangent), [leaf])
        moved = pointwise_features(pyramid, times, points, derivatives=[(2,)], levels=[direction])
        assert np.sum(grad * direction) == pytest.approx(np.sum(moved.values[(2,)][0] * cotangent), rel=1e-10)

    def test_thread_count_does_not_change_results(self, rng):
        config = PyramidConfig(num_scales=2, min_grid=4, num_features=2, time_bins=2)
        pyramid = init_pyramid(config, rng)
        points = rng.uniform(0, 1, (37, 1))
        times = rng.uniform(0, 1, 37)
        single = pointwise_features(pyramid, times, points, derivatives=[(1,)], chunk_size=5)
        set_worker_threads(3)
        threaded = pointwise_features(pyramid, times, points, derivatives=[(1,)], chunk_size=5)
        for a, b in zip(single.values[(1,)], threaded.values[(1,)]):
            assert np.array_equal(a, b)
