"""
PDE problems: residuals, initial conditions, loss layouts and reference data.

Residual sign conventions: Allen-Cahn and KdV as written in "= 0" form,
Ginzburg-Landau and Gray-Scott as r = u_t - RHS, the Burgers profile residual
as F_U = -lam U + ((1 + lam) y + U) U_y.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from utils import autodiff as ad
from utils import reference_solver
from utils.errors import ConfigError, PoisonedLossError, ReferenceFormatError, ShapeError
from utils.field_model import DomainMap, eval_on_axes, inner_pointwise, profile_terms
from utils.file_formats import REFERENCE_MAGIC, read_container, write_container

logger = logging.getLogger(__name__)


def residual_allen_cahn(u, u_t, u_xx):
    return u_t - reference_solver.AC_DIFFUSION * u_xx + 5.0 * u * u * u - 5.0 * u


def residual_kdv(u, u_t, u_x, u_xxx):
    return u_t + u * u_x + reference_solver.KDV_DISPERSION * u_xxx


def residual_ginzburg_landau(u, v, derivatives):
    """
    Real-variable Ginzburg-Landau residuals

    Parameters:
    - u, v: field values
    - derivatives: dict with u_t, v_t, u_xx, u_yy, v_xx, v_yy

    Returns:
    - (r_u, r_v) with r = time derivative - right-hand side
    """
    kappa, eps = reference_solver.GL_KAPPA, reference_solver.GL_EPSILON
    s = u * u + v * v
    rhs_u = eps * (derivatives["u_xx"] + derivatives["u_yy"]) + kappa * (u - u * s + 1.5 * v * s)
    rhs_v = eps * (derivatives["v_xx"] + derivatives["v_yy"]) + kappa * (v - v * s - 1.5 * u * s)
    return derivatives["u_t"] - rhs_u, derivatives["v_t"] - rhs_v


def residual_gray_scott(u, v, derivatives):
    """Gray-Scott residuals r = time derivative - right-hand side."""
    eps_u, eps_v, b1, b2, c1, c2 = reference_solver.GS_PARAMETERS
    reaction = u * v * v
    rhs_u = eps_u * (derivatives["u_xx"] + derivatives["u_yy"]) + b1 * (1.0 - u) - c1 * reaction
    rhs_v = eps_v * (derivatives["v_xx"] + derivatives["v_yy"]) - b2 * v + c2 * reaction
    return derivatives["u_t"] - rhs_u, derivatives["v_t"] - rhs_v


def residual_burgers_profile(U, U_y, y, lam):
    """
    Stationary self-similar Burgers residual

    (1 + lam) y + U is accumulated as (y + U) + lam y, which is the same value
    and cancels exactly for U = -y.
    """
    return -lam * U + ((y + U) + lam * y) * U_y


def _ic_allen_cahn(points):
    x = points[:, 0]
    return (x ** 2 * np.cos(np.pi * x))[:, None]


def _ic_kdv(points):
    return np.cos(np.pi * points[:, :1])


def _ic_ginzburg_landau(points):
    x, y = points[:, 0], points[:, 1]
    return np.stack([0.5 * np.cos(np.pi * x) * np.sin(np.pi * y),
                     0.5 * np.sin(np.pi * x) * np.cos(np.pi * y)], axis=1)


def _ic_gray_scott(points):
    bump = np.exp(-20.0 * (points[:, 0] ** 2 + points[:, 1] ** 2))
    return np.stack([1.0 - 0.5 * bump, 0.25 * bump], axis=1)


def _fields_allen_cahn(f):
    return (residual_allen_cahn(f["u"], f["u_t"], f["u_xx"]),)


def _fields_kdv(f):
    return (residual_kdv(f["u"], f["u_t"], f["u_x"], f["u_xxx"]),)


def _fields_ginzburg_landau(f):
    return residual_ginzburg_landau(f["u"], f["v"], f)


def _fields_gray_scott(f):
    return residual_gray_scott(f["u"], f["v"], f)


@dataclass
class ProblemSpec:
    name: str
    spatial_dims: int
    components: tuple
    domain: DomainMap
    request: tuple
    residual: object
    initial_condition: object
    ic_terms: tuple
    residual_terms: tuple
    init_weights: dict
    reference_file: str
    num_chunks: int = 16
    num_windows: int = 1
    ic_data: object = None
    kind: str = "time_dependent"

    @property
    def loss_terms(self):
        return self.ic_terms + self.residual_terms

    def ic_values(self, axes):
        """Initial field on the tensor grid given by axes, (*sizes, components)."""
        if self.ic_data is not None:
            data_axes, values = self.ic_data
            if [len(a) for a in data_axes] != [len(a) for a in axes] or not all(
                np.allclose(a, b) for a, b in zip(data_axes, axes)
            ):
                raise ShapeError("transferred initial data lives on a different grid")
            return values
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        flat = self.initial_condition(mesh.reshape(-1, len(axes)))
        return flat.reshape(mesh.shape[:-1] + (len(self.components),))


def _periodic_box(dims, t_upper=1.0):
    return DomainMap(lower=(-1.0,) * dims, upper=(1.0,) * dims, t_lower=0.0, t_upper=t_upper)


def get_problem(name):
    """
    Built-in problem definitions

    Parameters:
    - name: allen_cahn, kdv, ginzburg_landau, gray_scott or burgers_profile

    Returns:
    - ProblemSpec
    """
    if name == "allen_cahn":
        return ProblemSpec(
            name=name, spatial_dims=1, components=("u",), domain=_periodic_box(1),
            request=("", "t", "xx"), residual=_fields_allen_cahn,
            initial_condition=_ic_allen_cahn, ic_terms=("ics",), residual_terms=("res",),
            init_weights={"ics": 1.0, "res": 1.0}, reference_file="allen_cahn.spinnref",
            num_chunks=32,
        )
    elif name == "kdv":
        return ProblemSpec(
            name=name, spatial_dims=1, components=("u",), domain=_periodic_box(1),
            request=("", "t", "x", "xxx"), residual=_fields_kdv,
            initial_condition=_ic_kdv, ic_terms=("ics",), residual_terms=("res",),
            init_weights={"ics": 1.0, "res": 1.0}, reference_file="kdv.spinnref",
            num_chunks=16,
        )
    elif name == "ginzburg_landau":
        return ProblemSpec(
            name=name, spatial_dims=2, components=("u", "v"), domain=_periodic_box(2),
            request=("", "t", "xx", "yy"), residual=_fields_ginzburg_landau,
            initial_condition=_ic_ginzburg_landau, ic_terms=("u_ic", "v_ic"), residual_terms=("ru", "rv"),
            init_weights={"u_ic": 100.0, "v_ic": 100.0, "ru": 1.0, "rv": 1.0},
            reference_file="ginzburg_landau.spinnref", num_chunks=16, num_windows=5,
        )
    elif name == "gray_scott":
        return ProblemSpec(
            name=name, spatial_dims=2, components=("u", "v"), domain=_periodic_box(2, t_upper=2.0),
            request=("", "t", "xx", "yy"), residual=_fields_gray_scott,
            initial_condition=_ic_gray_scott, ic_terms=("u_ic", "v_ic"), residual_terms=("ru", "rv"),
            init_weights={"u_ic": 1.0, "v_ic": 1.0, "ru": 1.0, "rv": 1.0},
            reference_file="gray_scott.spinnref", num_chunks=32, num_windows=10,
        )
    elif name == "burgers_profile":
        return ProblemSpec(
            name=name, spatial_dims=1, components=("U",), domain=DomainMap((-30.0,), (30.0,), periodic=False),
            request=("", "x", "xx"), residual=None, initial_condition=None,
            ic_terms=(), residual_terms=("profile",), init_weights={"profile": 1.0},
            reference_file="", num_chunks=1, kind="profile",
        )
    raise ConfigError(
        f"Unknown problem '{name}', expected one of allen_cahn, kdv, ginzburg_landau, gray_scott, burgers_profile"
    )


def component_fields(values, components):
    """
    Split evaluation output into named fields

    values maps multi-index -> (..., n_components); the result maps "u", "u_t",
    "u_xx", "v", ... to (...) arrays.
    """
    fields = {}
    for key, array in values.items():
        for i, name in enumerate(components):
            fields[name if key == "" else f"{name}_{key}"] = array[..., i]
    return fields


def _mse(diff):
    return ad.mean(diff * diff)


def ic_loss(model, problem, axes, params=None):
    """
    Per-component MSE of the field at the initial time against the initial data

    Parameters:
    - model: field model
    - problem: ProblemSpec (ic_data takes precedence over the analytic IC)
    - axes: per-axis physical coordinates of the IC grid
    - params: optional parameter override

    Returns:
    - dict ic term -> scalar (Var when params are taped)
    """
    target = problem.ic_values(axes)
    values = eval_on_axes(model, ("",), axes, times=[problem.domain.t_lower], params=params)
    prediction = values[""]
    losses = {}
    for i, term in enumerate(problem.ic_terms):
        losses[term] = _mse(prediction[0][..., i] - target[..., i])
    return losses


def profile_residual(terms, lam):
    """F_U and its eta-derivative from the profile terms, via a first-order jet in eta."""
    U = ad.Jet([terms["U"], terms["U_eta"]])
    z = ad.Jet([terms["z"], terms["z_eta"]])
    U_y = ad.Jet([terms["U_y"], terms["dU_y"]])
    F = -lam * U + ((z + U) + lam * z) * U_y
    return F.coeffs[0], F.coeffs[1]


def profile_loss_from_terms(terms, lam):
    F, F_eta = profile_residual(terms, lam)
    loss = ad.mean(F * F + F_eta * F_eta)
    value = loss.value if isinstance(loss, ad.Var) else loss
    if not np.all(np.isfinite(value)):
        raise PoisonedLossError(f"profile loss is not finite: {float(value)}")
    return loss


def profile_loss(ansatz, eta, params=None):
    """
    Mean of F_U^2 + (d F_U / d eta)^2 over a batch of eta

    Parameters:
    - ansatz: ProfileAnsatz
    - eta: nonempty (P,) batch in [0, c]
    - params: optional parameter override for the inner model
    """
    eta = np.asarray(eta, dtype=float)
    if eta.size == 0:
        raise ShapeError("profile_loss needs a nonempty batch")
    plus, minus = inner_pointwise(ansatz, eta, params)
    return profile_loss_from_terms(profile_terms(ansatz, eta, plus, minus), ansatz.lam)


def image_axes(shape):
    """Unit coordinates j / n of an image grid, one array per axis."""
    return [np.arange(n) / n for n in shape]


def render_image(model, shape, params=None):
    """Model output on the (H, W) pixel grid, shaped (H, W, channels)."""
    return eval_on_axes(model, ("",), image_axes(shape), params=params)[""][0]


def image_fit_loss(model, image, params=None):
    """Full-grid mean squared error between the model image and the target (H, W, channels)."""
    return _mse(render_image(model, image.shape[:2], params=params) - image)


@dataclass
class ReferenceSolution:
    problem: str
    times: np.ndarray
    axes: list
    fields: dict = field(default_factory=dict)

    @property
    def components(self):
        return tuple(self.fields)

    def stacked(self):
        """Fields stacked on a trailing component axis, (T, *sizes, components)."""
        return np.stack([self.fields[c] for c in self.components], axis=-1)


def save_reference(path, reference):
    header = {
        "problem": reference.problem,
        "components": list(reference.components),
        "axes": len(reference.axes),
    }
    blocks = {"t": reference.times}
    for i, axis in enumerate(reference.axes):
        blocks[f"axis{i}"] = axis
    for name, values in reference.fields.items():
        blocks[f"field/{name}"] = values
    write_container(path, REFERENCE_MAGIC, header, blocks)


def _drop_duplicate_endpoint(axis_values, fields, axis_index):
    """Remove a repeated periodic endpoint after checking it repeats the first sample."""
    n = len(axis_values)
    if n < 3 or (n & (n - 1)) == 0 or ((n - 1) & (n - 2)) != 0:
        return axis_values, fields
    for name, values in fields.items():
        first = np.take(values, 0, axis=axis_index)
        last = np.take(values, n - 1, axis=axis_index)
        if not np.allclose(first, last, rtol=1e-10, atol=1e-12):
            raise ReferenceFormatError(
                f"field {name} has {n} samples on axis {axis_index - 1} but the last sample "
                "does not repeat the first"
            )
    trimmed = {name: np.take(values, np.arange(n - 1), axis=axis_index) for name, values in fields.items()}
    return axis_values[:-1], trimmed


def load_reference(path):
    """
    Read a reference solution

    Spatial axes of size 2^k + 1 whose last sample repeats the first are trimmed
    to 2^k samples.

    Returns:
    - ReferenceSolution
    """
    header, blocks = read_container(path, REFERENCE_MAGIC)
    try:
        times = blocks["t"]
        axes = [blocks[f"axis{i}"] for i in range(int(header["axes"]))]
        fields = {name: blocks[f"field/{name}"] for name in header["components"]}
    except KeyError as exc:
        raise ReferenceFormatError(f"{path}: missing block {exc}") from exc

    expected = (len(times),) + tuple(len(a) for a in axes)
    for name, values in fields.items():
        if values.shape != expected:
            raise ReferenceFormatError(f"{path}: field {name} has shape {values.shape}, expected {expected}")
        if not np.all(np.isfinite(values)):
            raise ReferenceFormatError(f"{path}: field {name} contains non-finite values")

    for i in range(len(axes)):
        axes[i], fields = _drop_duplicate_endpoint(axes[i], fields, i + 1)
    return ReferenceSolution(header["problem"], times, axes, fields)


def generate_reference(name, **kwargs):
    """Run the built-in ETDRK4 integrator for a time-dependent problem."""
    if name not in reference_solver.SOLVERS:
        raise ConfigError(f"No reference generator for problem '{name}'")
    times, axes, fields = reference_solver.SOLVERS[name](**kwargs)
    return ReferenceSolution(name, times, axes, fields)


def window_problem(problem, t_lower, t_upper, ic_data=None):
    """The problem restricted to one time window, optionally with transferred initial data."""
    return replace(problem, domain=problem.domain.window(t_lower, t_upper), ic_data=ic_data)
