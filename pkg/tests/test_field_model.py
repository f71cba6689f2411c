import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils.decoder import DecoderConfig
from utils.diagnostics import burgers_report
from utils.errors import DomainError, ShapeError, UnsupportedDerivativeError
from utils.field_model import (
    DomainMap,
    ProfileAnsatz,
    build_beignet,
    build_coordinate_network,
    eval_grid,
    eval_on_axes,
    eval_point,
    inner_pointwise,
    inner_shifted_grid,
    parse_request,
    profile_domain,
    profile_eval,
    reinitialize,
    with_params,
)
from utils.problems import get_problem
from utils.pyramid import PyramidConfig


def _grid_points_1d(domain, size, shifts):
    return np.concatenate([domain.axis_coordinates(0, size, s[0]) for s in shifts])


def _profile_ansatz(tail=True, linear_term=0.0, seed=0):
    pyramid = PyramidConfig(num_scales=3, spatial_dims=1, min_grid=2, num_features=2, time_bins=0,
                            global_precond=10.0)
    decoder = DecoderConfig(arch="vanilla_mlp", width=8, depth=2, weight_fact=False)
    inner = build_beignet(pyramid, decoder, profile_domain(5.0), seed, use_coords=False, time_dependent=False)
    return ProfileAnsatz(inner, c=5.0, lam=0.5, tail=tail, linear_term=linear_term)


class TestDomainMap:
    def test_periodic_wrap(self):
        domain = DomainMap(lower=(-1.0,), upper=(1.0,))
        assert_allclose(domain.to_unit([[1.5], [-1.0], [0.0]]), [[0.25], [0.0], [0.5]])

    def test_non_periodic_is_affine(self):
        domain = profile_domain(30.0)
        assert_allclose(domain.to_unit([[-30.0], [30.0]]), [[0.0], [1.0]])

    def test_time_window(self):
        domain = DomainMap(lower=(0.0,), upper=(1.0,)).window(0.2, 0.4)
        assert domain.time_to_unit(0.3) == pytest.approx(0.5)
        assert domain.time_from_unit(1.0) == pytest.approx(0.4)


class TestRequests:
    def test_orders(self):
        assert parse_request(("", "x", "xxx", "t"), 1, True) == {"x": 3, "t": 1}

    @pytest.mark.parametrize("key", ["xt", "tt", "y", "xxxx"])
    def test_rejected(self, key):
        with pytest.raises(UnsupportedDerivativeError):
            parse_request(("", key), 1, True)

    def test_no_time_direction_when_stationary(self):
        with pytest.raises(UnsupportedDerivativeError):
            parse_request(("t",), 1, False)


class TestBeignet:
    REQUEST = ("", "t", "x", "xx", "xxx")

    def test_grid_matches_points_1d(self, tiny_model):
        shifts = np.array([[0.02], [0.11]])
        times = np.array([0.1, 0.6])
        grid = eval_grid(tiny_model, self.REQUEST, (8,), shifts=shifts, times=times)
        x = _grid_points_1d(tiny_model.domain, 8, shifts)
        point = eval_point(tiny_model, self.REQUEST, x, np.repeat(times, 8))
        for key in self.REQUEST:
            assert grid[key].shape == (2, 8, 1)
            scale = max(1.0, np.abs(point[key]).max())
            assert_allclose(grid[key].reshape(-1, 1), point[key], atol=1e-10 * scale)

    def test_derivatives_match_finite_differences(self, tiny_model):
        x = np.array([-0.7, 0.05, 0.42])
        t = 0.3
        h = 1e-5
        out = eval_point(tiny_model, ("x", "xx", "t"), x, t)

        def value(points, time):
            return eval_point(tiny_model, ("",), points, time)[""]

        dx = (value(x + h, t) - value(x - h, t)) / (2 * h)
        dxx = (value(x + h, t) - 2 * value(x, t) + value(x - h, t)) / h ** 2
        dt = (value(x, t + h) - value(x, t - h)) / (2 * h)
        assert_allclose(out["x"], dx, rtol=1e-5, atol=1e-7)
        assert_allclose(out["xx"], dxx, rtol=1e-3, atol=1e-3)
        assert_allclose(out["t"], dt, rtol=1e-5, atol=1e-7)

    def test_grid_matches_points_2d(self):
        problem = get_problem("ginzburg_landau")
        pyramid = PyramidConfig(num_scales=2, spatial_dims=2, min_grid=4, num_features=2, time_bins=1,
                                global_precond=5.0)
        decoder = DecoderConfig(width=6, depth=1, activation="swish", output_dim=2)
        model = build_beignet(pyramid, decoder, problem.domain, seed=1)
        request = ("", "t", "xx", "yy")
        shift = np.array([[0.03, 0.07]])
        grid = eval_grid(model, request, (8, 8), shifts=shift, times=[0.4])

        X, Y = np.meshgrid(problem.domain.axis_coordinates(0, 8, 0.03),
                           problem.domain.axis_coordinates(1, 8, 0.07), indexing="ij")
        points = np.stack([X.ravel(), Y.ravel()], axis=1)
        point = eval_point(model, request, points, 0.4)
        for key in request:
            assert grid[key].shape == (1, 8, 8, 2)
            scale = max(1.0, np.abs(point[key]).max())
            assert_allclose(grid[key].reshape(-1, 2), point[key], atol=1e-10 * scale)

    def test_eval_on_axes_picks_either_path(self, tiny_model):
        dyadic = tiny_model.domain.axis_coordinates(0, 16)
        irregular = np.linspace(-0.9, 0.9, 5)
        on_grid = eval_on_axes(tiny_model, ("",), [dyadic], times=[0.0, 0.5])[""]
        off_grid = eval_on_axes(tiny_model, ("",), [irregular], times=[0.0, 0.5])[""]
        assert on_grid.shape == (2, 16, 1)
        assert off_grid.shape == (2, 5, 1)
        direct = eval_point(tiny_model, ("",), dyadic, 0.5)[""]
        assert_allclose(on_grid[1], direct, atol=1e-10)

    def test_times_outside_window(self, tiny_model):
        with pytest.raises(DomainError):
            eval_point(tiny_model, ("",), np.zeros(2), 1.5)
        with pytest.raises(DomainError):
            eval_grid(tiny_model, ("",), (8,), times=[-0.1])

    def test_bad_inputs(self, tiny_model):
        with pytest.raises(ShapeError):
            eval_point(tiny_model, ("",), np.zeros((3, 2)), 0.0)
        with pytest.raises(ShapeError):
            eval_grid(tiny_model, ("",), (8,))
        with pytest.raises(DomainError):
            eval_point(tiny_model, ("",), np.array([np.nan]), 0.0)
        with pytest.raises(UnsupportedDerivativeError):
            eval_point(tiny_model, ("xt",), np.zeros(1), 0.0)

    def test_seeded_build(self, tiny_pyramid, tiny_decoder, allen_cahn):
        a = build_beignet(tiny_pyramid, tiny_decoder, allen_cahn.domain, seed=7)
        b = build_beignet(tiny_pyramid, tiny_decoder, allen_cahn.domain, seed=7)
        for key, value in a.params.items():
            assert np.array_equal(value, b.params[key])
        c = reinitialize(a, seed=8)
        assert not np.array_equal(c.params["pyramid/level0"], a.params["pyramid/level0"])
        assert c.params.keys() == a.params.keys()

    def test_with_params_round_trip(self, tiny_model):
        doubled = {k: 2.0 * v for k, v in tiny_model.params.items()}
        copy = with_params(tiny_model, doubled)
        assert_allclose(copy.params["pyramid/level1"], 2.0 * tiny_model.params["pyramid/level1"])
        x = np.array([0.1, 0.2])
        assert_allclose(eval_point(copy, ("",), x, 0.2)[""],
                        eval_point(tiny_model, ("",), x, 0.2, params=doubled)[""])


class TestCoordinateNetwork:
    @pytest.mark.parametrize("rff_features", [0, 4])
    def test_grid_matches_points(self, tiny_decoder, allen_cahn, rff_features):
        model = build_coordinate_network(tiny_decoder, allen_cahn.domain, seed=0, rff_features=rff_features)
        request = ("", "t", "x", "xx")
        shifts = np.array([[0.01]])
        grid = eval_grid(model, request, (16,), shifts=shifts, times=[0.25])
        point = eval_point(model, request, _grid_points_1d(model.domain, 16, shifts), 0.25)
        for key in request:
            assert_allclose(grid[key].reshape(-1, 1), point[key], atol=1e-10)

    def test_derivative_against_finite_difference(self, tiny_decoder, allen_cahn):
        model = build_coordinate_network(tiny_decoder, allen_cahn.domain, seed=3, rff_features=4, rff_sigma=0.5)
        x = np.array([-0.3, 0.4])
        h = 1e-6
        dx = eval_point(model, ("x",), x, 0.5)["x"]
        fd = (eval_point(model, ("",), x + h, 0.5)[""] - eval_point(model, ("",), x - h, 0.5)[""]) / (2 * h)
        assert_allclose(dx, fd, rtol=1e-5, atol=1e-8)


class TestProfileAnsatz:
    def test_profile_is_odd(self):
        ansatz = _profile_ansatz()
        eta = np.array([0.3, 1.7, 4.9])
        plus = profile_eval(ansatz, eta)
        minus = profile_eval(ansatz, -eta)
        assert_allclose(minus["U"], -plus["U"], atol=1e-12)
        assert_allclose(minus["U_y"], plus["U_y"], atol=1e-12)
        assert profile_eval(ansatz, np.zeros(1), need_derivative=False)["U"][0] == pytest.approx(0.0, abs=1e-14)

    def test_profile_derivative_in_physical_coordinate(self):
        ansatz = _profile_ansatz(seed=2)
        eta = np.array([0.5, 2.0])
        h = 1e-6
        out = profile_eval(ansatz, eta)
        z = np.sinh(eta)
        upper = profile_eval(ansatz, np.arcsinh(z + h), need_derivative=False)["U"]
        lower = profile_eval(ansatz, np.arcsinh(z - h), need_derivative=False)["U"]
        assert_allclose(out["U_y"], (upper - lower) / (2 * h), rtol=1e-5, atol=1e-8)

    def test_eta_outside_box(self):
        with pytest.raises(DomainError):
            profile_eval(_profile_ansatz(), np.array([5.5]))
        with pytest.raises(DomainError):
            ProfileAnsatz(_profile_ansatz().inner, c=-1.0)

    def test_shifted_grid_matches_pointwise(self):
        ansatz = _profile_ansatz(seed=4)
        eta, plus, minus = inner_shifted_grid(ansatz, 16, 0.02)
        assert eta.shape == (8,)
        assert (eta >= 0).all() and (eta <= ansatz.c).all()
        plus_ref, minus_ref = inner_pointwise(ansatz, eta)
        for grid_column, point_column in zip(plus + minus, plus_ref + minus_ref):
            assert_allclose(grid_column, point_column, atol=1e-9)

    def test_exact_profile_has_zero_residual(self):
        ansatz = _profile_ansatz(tail=False, linear_term=-1.0)
        zeroed = {k: np.zeros_like(v) for k, v in ansatz.inner.params.items()}
        ansatz.inner = with_params(ansatz.inner, zeroed)
        pde_mse, log_max = burgers_report(ansatz)
        assert pde_mse == 0.0
        assert log_max == -np.inf


@pytest.mark.parametrize("seed", range(50))
def test_random_instances_grid_matches_points(seed):
    rng = np.random.default_rng(seed)
    problem = get_problem("allen_cahn")
    pyramid = PyramidConfig(
        num_scales=int(rng.integers(1, 4)), spatial_dims=1, min_grid=int(2 ** rng.integers(1, 3)),
        num_features=int(rng.integers(1, 4)), time_bins=int(rng.integers(0, 4)),
        global_precond=float(rng.uniform(1.0, 10.0)), spectral_precond_K=float(rng.uniform(0.0, 1.0)),
    )
    decoder = DecoderConfig(arch=str(rng.choice(["modified_mlp", "vanilla_mlp"])), width=6, depth=2,
                            activation=str(rng.choice(["tanh", "swish", "sin", "sigmoid"])))
    model = build_beignet(pyramid, decoder, problem.domain, seed=seed)
    size = max(pyramid.sizes) * int(2 ** rng.integers(0, 2))
    shifts = rng.uniform(0.0, 1.0 / size, (2, 1))
    times = rng.uniform(0.0, 1.0, 2)
    request = ("",) + tuple("x" * m for m in range(1, int(rng.integers(1, 4)) + 1)) + ("t",)

    grid = eval_grid(model, request, (size,), shifts=shifts, times=times)
    point = eval_point(model, request, _grid_points_1d(problem.domain, size, shifts), np.repeat(times, size))
    for key in request:
        scale = np.abs(point[key]).max()
        assert np.abs(grid[key].reshape(-1, 1) - point[key]).max() <= 1e-10 * max(scale, 1e-300)
