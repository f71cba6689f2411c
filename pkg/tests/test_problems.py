import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils.errors import ConfigError, ReferenceFormatError, ShapeError
from utils.image_fit import build_image_model
from utils.problems import (
    ReferenceSolution,
    component_fields,
    generate_reference,
    get_problem,
    ic_loss,
    image_fit_loss,
    load_reference,
    profile_loss,
    render_image,
    residual_allen_cahn,
    residual_burgers_profile,
    residual_ginzburg_landau,
    residual_gray_scott,
    residual_kdv,
    save_reference,
    window_problem,
)
from utils.reference_solver import KDV_DISPERSION

ZERO_DERIVATIVES = {key: 0.0 for key in ("u_t", "v_t", "u_xx", "u_yy", "v_xx", "v_yy")}


class TestResiduals:
    def test_allen_cahn(self):
        assert residual_allen_cahn(0.5, 0.0, 0.0) == pytest.approx(-1.875)
        assert residual_allen_cahn(1.0, 0.0, 0.0) == 0.0

    def test_kdv(self):
        assert residual_kdv(1.0, 0.0, 1.0, 1.0) == pytest.approx(1.0 + KDV_DISPERSION)

    def test_ginzburg_landau(self):
        r_u, r_v = residual_ginzburg_landau(1.0, 0.0, ZERO_DERIVATIVES)
        assert r_u == pytest.approx(0.0)
        assert r_v == pytest.approx(15.0)

    def test_gray_scott(self):
        r_u, r_v = residual_gray_scott(0.0, 0.0, ZERO_DERIVATIVES)
        assert r_u == pytest.approx(-40.0)
        assert r_v == 0.0

    def test_burgers_linear_profile_is_exact(self):
        y = np.sinh(np.linspace(-30, 30, 101))
        assert np.all(residual_burgers_profile(-y, -1.0, y, 0.5) == 0.0)


class TestProblems:
    def test_unknown_problem(self):
        with pytest.raises(ConfigError, match="heat"):
            get_problem("heat")

    def test_allen_cahn_initial_condition(self, allen_cahn):
        assert_allclose(allen_cahn.initial_condition(np.array([[-1.0], [1.0], [0.0]]))[:, 0], [-1.0, -1.0, 0.0])
        assert allen_cahn.ic_values([np.linspace(-1, 1, 5)]).shape == (5, 1)

    def test_two_component_layout(self):
        problem = get_problem("gray_scott")
        assert problem.loss_terms == ("u_ic", "v_ic", "ru", "rv")
        assert problem.domain.t_upper == 2.0
        values = problem.ic_values([np.zeros(1), np.zeros(1)])
        assert_allclose(values[0, 0], [0.5, 0.25])

    def test_component_fields(self):
        values = {"": np.arange(6.0).reshape(3, 2), "t": np.ones((3, 2))}
        fields = component_fields(values, ("u", "v"))
        assert set(fields) == {"u", "v", "u_t", "v_t"}
        assert_allclose(fields["v"], [1.0, 3.0, 5.0])

    def test_window_keeps_transferred_data(self, allen_cahn):
        axes = [np.linspace(-1, 1, 4)]
        windowed = window_problem(allen_cahn, 0.5, 1.0, ic_data=(axes, np.full((4, 1), 0.3)))
        assert windowed.domain.t_lower == 0.5
        assert_allclose(windowed.ic_values(axes), 0.3)
        with pytest.raises(ShapeError):
            windowed.ic_values([np.linspace(-1, 1, 8)])


class TestLosses:
    def test_ic_loss_of_a_model(self, tiny_model, allen_cahn):
        losses = ic_loss(tiny_model, allen_cahn, [allen_cahn.domain.axis_coordinates(0, 16)])
        assert set(losses) == {"ics"}
        assert losses["ics"] > 0

    def test_profile_loss_needs_a_batch(self):
        with pytest.raises(ShapeError):
            profile_loss(None, np.array([]))

    def test_image_loss_is_zero_for_own_render(self):
        model = build_image_model("beignet", (8, 8), seed=0)
        image = render_image(model, (8, 8))
        assert float(image_fit_loss(model, image)) == pytest.approx(0.0, abs=1e-24)


class TestReferences:
    def _periodic_reference(self, endpoint_matches=True):
        x = np.linspace(-1.0, 1.0, 9)
        times = np.linspace(0.0, 1.0, 3)
        u = np.cos(np.pi * x)[None, :] * np.array([1.0, 0.5, 0.25])[:, None]
        if not endpoint_matches:
            u[:, -1] += 0.1
        return ReferenceSolution("allen_cahn", times, [x], {"u": u})

    def test_round_trip_trims_duplicate_endpoint(self, tmp_path):
        path = str(tmp_path / "ref.spinnref")
        save_reference(path, self._periodic_reference())
        loaded = load_reference(path)
        assert loaded.problem == "allen_cahn"
        assert loaded.axes[0].shape == (8,)
        assert loaded.fields["u"].shape == (3, 8)
        assert loaded.stacked().shape == (3, 8, 1)

    def test_non_repeating_endpoint(self, tmp_path):
        path = str(tmp_path / "ref.spinnref")
        save_reference(path, self._periodic_reference(endpoint_matches=False))
        with pytest.raises(ReferenceFormatError, match="repeat"):
            load_reference(path)

    def test_power_of_two_axes_untouched(self, ac_reference_path):
        loaded = load_reference(str(ac_reference_path))
        assert loaded.fields["u"].shape == (11, 64)

    def test_corrupted_file(self, tmp_path):
        path = tmp_path / "ref.spinnref"
        save_reference(str(path), self._periodic_reference())
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(ReferenceFormatError):
            load_reference(str(path))

    def test_no_generator_for_profile(self):
        with pytest.raises(ConfigError):
            generate_reference("burgers_profile")
