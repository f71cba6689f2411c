"""
Solution fields built from a feature pyramid (or raw coordinates) and a decoder.

A derivative request is a collection of multi-index strings: "" for the value,
"x", "xx", "xxx", "y", "yy", "t". eval_grid serves requests on structured grids
through the FFT path, eval_point at arbitrary physical points. Both return a
dict keyed by multi-index with arrays (or Vars) of shape (..., output_dim).
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from utils import autodiff as ad
from utils.decoder import RFFEmbedding, decoder_forward, init_decoder, init_rff, rff_embed
from utils.errors import DomainError, ShapeError, UnsupportedDerivativeError
from utils.pyramid import FourierPyramid, init_pyramid, pointwise_features, spectral_features

logger = logging.getLogger(__name__)

AXIS_NAMES = ("x", "y")


@dataclass
class DomainMap:
    """Affine map from the physical box to the unit torus (or unit box when not periodic)."""

    lower: tuple
    upper: tuple
    t_lower: float = 0.0
    t_upper: float = 1.0
    periodic: bool = True

    @property
    def dims(self):
        return len(self.lower)

    @property
    def chain(self):
        return 1.0 / (np.asarray(self.upper, dtype=float) - np.asarray(self.lower, dtype=float))

    @property
    def time_chain(self):
        return 1.0 / (self.t_upper - self.t_lower)

    def to_unit(self, x):
        unit = (np.asarray(x, dtype=float) - np.asarray(self.lower, dtype=float)) * self.chain
        return np.mod(unit, 1.0) if self.periodic else unit

    def time_to_unit(self, t):
        unit = (np.asarray(t, dtype=float) - self.t_lower) * self.time_chain
        # absorb roundoff at the window edges
        return np.where(np.abs(unit - np.clip(unit, 0.0, 1.0)) < 1e-12, np.clip(unit, 0.0, 1.0), unit)

    def time_from_unit(self, unit):
        return self.t_lower + np.asarray(unit, dtype=float) * (self.t_upper - self.t_lower)

    def axis_coordinates(self, axis, size, shift=0.0):
        """Physical coordinates of the uniform grid j/size + shift along one axis."""
        span = self.upper[axis] - self.lower[axis]
        return self.lower[axis] + span * (np.arange(size) / size + shift)

    def window(self, t_lower, t_upper):
        return replace(self, t_lower=t_lower, t_upper=t_upper)


@dataclass
class BeignetModel:
    pyramid: FourierPyramid
    decoder: object
    decoder_params: dict
    domain: DomainMap
    use_coords: bool = True
    time_dependent: bool = True

    @property
    def output_dim(self):
        return self.decoder.output_dim

    @property
    def params(self):
        merged = dict(self.pyramid.params())
        merged.update(self.decoder_params)
        return merged


@dataclass
class CoordinateNetwork:
    """MLP on centered coordinates 2x~ - 1 (and time), optionally through random Fourier features."""

    decoder: object
    decoder_params: dict
    domain: DomainMap
    rff: RFFEmbedding = None
    time_dependent: bool = True

    @property
    def output_dim(self):
        return self.decoder.output_dim

    @property
    def params(self):
        return dict(self.decoder_params)


def coordinate_feature_dim(spatial_dims, use_coords, periodic, time_dependent):
    """Number of raw coordinate columns appended to the pyramid features."""
    count = 0
    if use_coords:
        count += 2 * spatial_dims if periodic else spatial_dims
    if time_dependent:
        count += 1
    return count


def build_beignet(pyramid_config, decoder_config, domain, seed, use_coords=True, time_dependent=True):
    """
    Initialize a pyramid + decoder model

    The decoder input dimension is set from the pyramid and coordinate layout.
    """
    rng = np.random.default_rng(seed)
    input_dim = pyramid_config.feature_dim + coordinate_feature_dim(
        pyramid_config.spatial_dims, use_coords, domain.periodic, time_dependent
    )
    decoder_config = replace(decoder_config, input_dim=input_dim)
    pyramid = init_pyramid(pyramid_config, rng)
    params = init_decoder(decoder_config, rng)
    return BeignetModel(pyramid, decoder_config, params, domain, use_coords, time_dependent)


def build_coordinate_network(decoder_config, domain, seed, rff_features=0, rff_sigma=1.0, time_dependent=True):
    rng = np.random.default_rng(seed)
    raw_dim = domain.dims + (1 if time_dependent else 0)
    rff = None
    if rff_features:
        rff = init_rff(raw_dim, rff_features, rff_sigma, rng)
        input_dim = rff.output_dim
    else:
        input_dim = raw_dim
    decoder_config = replace(decoder_config, input_dim=input_dim)
    return CoordinateNetwork(decoder_config, init_decoder(decoder_config, rng), domain, rff, time_dependent)


def reinitialize(model, seed):
    """Fresh parameters of the same architecture."""
    if isinstance(model, BeignetModel):
        rng = np.random.default_rng(seed)
        pyramid = init_pyramid(model.pyramid.config, rng)
        return replace(model, pyramid=pyramid, decoder_params=init_decoder(model.decoder, rng))
    rng = np.random.default_rng(seed)
    rff = model.rff
    if rff is not None:
        rff = init_rff(rff.B.shape[1], rff.B.shape[0], rff.sigma, rng)
    return replace(model, rff=rff, decoder_params=init_decoder(model.decoder, rng))


def with_params(model, params):
    """Copy of model holding the given parameter arrays."""
    decoder_params = {k: v for k, v in params.items() if k.startswith("decoder/")}
    if isinstance(model, BeignetModel):
        levels = [params[f"pyramid/level{i}"] for i in range(len(model.pyramid.levels))]
        return replace(model, pyramid=FourierPyramid(model.pyramid.config, levels), decoder_params=decoder_params)
    return replace(model, decoder_params=decoder_params)


def parse_request(request, spatial_dims, time_dependent):
    """
    Highest order needed per direction

    Returns:
    - dict direction -> order, e.g. {"x": 3, "t": 1}
    """
    valid = set(AXIS_NAMES[:spatial_dims]) | ({"t"} if time_dependent else set())
    orders = {}
    for key in request:
        if key == "":
            continue
        if len(set(key)) != 1:
            raise UnsupportedDerivativeError(f"mixed derivative '{key}' is not supported")
        if len(key) > ad.MAX_JET_ORDER:
            raise UnsupportedDerivativeError(f"derivative '{key}' exceeds order {ad.MAX_JET_ORDER}")
        direction = key[0]
        if direction not in valid:
            raise UnsupportedDerivativeError(f"derivative '{key}' has no direction '{direction}' in this model")
        if direction == "t" and len(key) > 1:
            raise UnsupportedDerivativeError("time derivatives above first order are not available")
        orders[direction] = max(orders.get(direction, 0), len(key))
    return orders


def _alphas(orders, spatial_dims):
    """Per-axis derivative multi-indices needed for the requested orders."""
    alphas = [(0,) * spatial_dims]
    for axis, name in enumerate(AXIS_NAMES[:spatial_dims]):
        for m in range(1, orders.get(name, 0) + 1):
            alpha = [0] * spatial_dims
            alpha[axis] = m
            alphas.append(tuple(alpha))
    return alphas


def _coordinate_jet(domain, unit_points, unit_times, orders, use_coords, time_dependent, centered, periodic):
    """
    Raw coordinate columns and their derivatives with respect to physical x and t

    With periodic set, x~ is fed as (cos 2 pi x~, sin 2 pi x~); otherwise as 2x~ - 1
    when centered, else as x~.
    """
    count = len(unit_points)
    dims = domain.dims
    chain = domain.chain
    columns = []
    tails = {name: [] for name in orders}

    if use_coords:
        if periodic:
            phase = 2.0 * np.pi * unit_points
            columns.extend([np.cos(phase), np.sin(phase)])
        else:
            columns.append(2.0 * unit_points - 1.0 if centered else unit_points)
    if time_dependent:
        t_column = unit_times[:, None]
        columns.append(2.0 * t_column - 1.0 if centered else t_column)
    value = np.concatenate(columns, axis=1) if columns else np.zeros((count, 0))

    for name, order in orders.items():
        for m in range(1, order + 1):
            parts = []
            if use_coords:
                if periodic:
                    for trig in (np.cos, np.sin):
                        block = np.zeros((count, dims))
                        if name != "t":
                            axis = AXIS_NAMES.index(name)
                            rate = 2.0 * np.pi * chain[axis]
                            block[:, axis] = rate ** m * trig(2.0 * np.pi * unit_points[:, axis] + m * np.pi / 2)
                        parts.append(block)
                else:
                    block = np.zeros((count, dims))
                    if name != "t" and m == 1:
                        axis = AXIS_NAMES.index(name)
                        block[:, axis] = (2.0 if centered else 1.0) * chain[axis]
                    parts.append(block)
            if time_dependent:
                block = np.zeros((count, 1))
                if name == "t" and m == 1:
                    block[:, 0] = (2.0 if centered else 1.0) * domain.time_chain
                parts.append(block)
            tails[name].append(np.concatenate(parts, axis=1) if parts else np.zeros((count, 0)))
    return ad.MultiJet(value, tails)


def _pyramid_jet(model, bundle, orders, flatten):
    """MultiJet over the concatenated level features, derivatives in physical units."""
    dims = model.pyramid.config.spatial_dims
    chain = model.domain.chain
    zero = (0,) * dims
    pieces = []
    for level in range(len(bundle.values[zero])):
        tails = {}
        for name, order in orders.items():
            if name == "t":
                tails["t"] = [flatten(bundle.rates[level]) * model.domain.time_chain]
                continue
            axis = AXIS_NAMES.index(name)
            coeffs = []
            for m in range(1, order + 1):
                alpha = [0] * dims
                alpha[axis] = m
                coeffs.append(flatten(bundle.values[tuple(alpha)][level]) * chain[axis] ** m)
            tails[name] = coeffs
        pieces.append(ad.MultiJet(flatten(bundle.values[zero][level]), tails))
    return pieces


def _split_params(model, params):
    if params is None:
        return None, model.decoder_params
    decoder_params = {k: v for k, v in params.items() if k.startswith("decoder/")}
    levels = None
    if isinstance(model, BeignetModel):
        levels = [params[f"pyramid/level{i}"] for i in range(len(model.pyramid.levels))]
    return levels, decoder_params


def _decode(model, decoder_params, jet, request, out_shape):
    out = decoder_forward(decoder_params, jet, model.decoder)
    results = {}
    for key in request:
        results[key] = ad.reshape(out.coefficient(key), out_shape + (model.output_dim,))
    return results


def _coordinate_network_eval(model, request, unit_points, unit_times, decoder_params, out_shape):
    orders = parse_request(request, model.domain.dims, model.time_dependent)
    jet = _coordinate_jet(model.domain, unit_points, unit_times, orders, True, model.time_dependent,
                          centered=True, periodic=False)
    if model.rff is not None:
        jet = rff_embed(model.rff.B, jet)
    return _decode(model, decoder_params, jet, request, out_shape)


def _unit_times(model, times, count):
    if not model.time_dependent:
        return np.zeros(count)
    if times is None:
        raise ShapeError("time-dependent model requires times")
    unit = model.domain.time_to_unit(np.broadcast_to(np.asarray(times, dtype=float), (count,)))
    if np.isnan(unit).any() or (unit < 0).any() or (unit > 1).any():
        raise DomainError(
            f"times must lie in [{model.domain.t_lower}, {model.domain.t_upper}]"
        )
    return unit


def eval_grid(model, request, grid_sizes, shifts=None, times=None, params=None, allow_aliasing=False):
    """
    Field and requested derivatives on a structured grid

    Parameters:
    - model: BeignetModel or CoordinateNetwork
    - request: iterable of multi-index strings
    - grid_sizes: grid size per spatial axis
    - shifts: (T, d) unit-torus shifts in [0, 1/M] or None
    - times: (T,) physical times (ignored for time-independent models)
    - params: optional parameter dict overriding the model's arrays (e.g. taped Vars)
    - allow_aliasing: fold pyramid levels finer than the grid

    Returns:
    - dict multi-index -> array of shape (T, *grid_sizes, output_dim)
    """
    request = tuple(dict.fromkeys(request))
    grid_sizes = tuple(int(m) for m in grid_sizes)
    dims = model.domain.dims
    if len(grid_sizes) != dims:
        raise ShapeError(f"expected {dims} grid sizes, got {len(grid_sizes)}")
    slice_times = np.atleast_1d(np.asarray(times, dtype=float)) if (model.time_dependent and times is not None) else None
    count = len(slice_times) if slice_times is not None else 1
    if model.time_dependent and slice_times is None:
        raise ShapeError("time-dependent model requires times")
    unit_times = _unit_times(model, slice_times, count)
    shift_array = np.zeros((count, dims)) if shifts is None else np.broadcast_to(
        np.asarray(shifts, dtype=float), (count, dims)
    )

    # unit coordinates of every node, (T, *M, d)
    axes = [np.arange(m) / m for m in grid_sizes]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    unit_points = mesh[None] + shift_array.reshape((count,) + (1,) * dims + (dims,))
    flat_points = unit_points.reshape(-1, dims)
    flat_times = np.repeat(unit_times, int(np.prod(grid_sizes)))
    out_shape = (count,) + grid_sizes

    levels, decoder_params = _split_params(model, params)
    if isinstance(model, CoordinateNetwork):
        return _coordinate_network_eval(model, request, flat_points, flat_times, decoder_params, out_shape)

    orders = parse_request(request, dims, model.time_dependent)
    bundle = spectral_features(
        model.pyramid, unit_times, grid_sizes, shift_array, _alphas(orders, dims),
        allow_aliasing=allow_aliasing, levels=levels, time_rate="t" in orders,
    )
    channels = model.pyramid.config.num_features
    pieces = _pyramid_jet(model, bundle, orders, lambda a: ad.reshape(a, (-1, channels)))
    pieces.append(_coordinate_jet(model.domain, flat_points, flat_times, orders,
                                  model.use_coords, model.time_dependent, centered=False,
                                  periodic=model.domain.periodic))
    jet = ad.concatenate_jets(pieces, axis=-1)
    return _decode(model, decoder_params, jet, request, out_shape)


def eval_point(model, request, x, t=None, params=None):
    """
    Field and requested derivatives at arbitrary physical points

    Parameters:
    - model: BeignetModel or CoordinateNetwork
    - request: iterable of multi-index strings
    - x: (P, d) physical coordinates (a (P,) vector is accepted for 1-D models)
    - t: (P,) physical times or a scalar (time-dependent models only)
    - params: optional parameter override

    Returns:
    - dict multi-index -> array of shape (P, output_dim)
    """
    request = tuple(dict.fromkeys(request))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    dims = model.domain.dims
    if x.shape[1] != dims:
        raise ShapeError(f"points must have {dims} columns, got {x.shape[1]}")
    if np.isnan(x).any():
        raise DomainError("eval_point received a NaN coordinate")
    unit_points = model.domain.to_unit(x)
    unit_times = _unit_times(model, t, len(x))
    out_shape = (len(x),)

    levels, decoder_params = _split_params(model, params)
    if isinstance(model, CoordinateNetwork):
        return _coordinate_network_eval(model, request, unit_points, unit_times, decoder_params, out_shape)

    orders = parse_request(request, dims, model.time_dependent)
    features = pointwise_features(
        model.pyramid, unit_times, unit_points, _alphas(orders, dims),
        levels=levels, time_rate="t" in orders,
    )
    pieces = _pyramid_jet(model, features, orders, lambda a: a)
    pieces.append(_coordinate_jet(model.domain, unit_points, unit_times, orders,
                                  model.use_coords, model.time_dependent, centered=False,
                                  periodic=model.domain.periodic))
    jet = ad.concatenate_jets(pieces, axis=-1)
    return _decode(model, decoder_params, jet, request, out_shape)


def _is_dyadic_grid(coords, lower, upper):
    """True when coords are exactly the nodes lower + (upper - lower) j / n with n a power of two."""
    n = len(coords)
    if n < 1 or (n & (n - 1)) != 0:
        return False
    expected = lower + (upper - lower) * np.arange(n) / n
    return np.allclose(coords, expected, rtol=0.0, atol=1e-12 * max(1.0, abs(upper - lower)))


def eval_on_axes(model, request, axes, times=None, params=None, allow_aliasing=True):
    """
    Evaluate on a tensor grid given by per-axis physical coordinates

    Uses the structured FFT path when every axis is a dyadic grid aligned with the
    domain, and the pointwise path otherwise.

    Returns:
    - dict multi-index -> array of shape (T, *len(axes), output_dim); T = 1 for
      time-independent models
    """
    domain = model.domain
    axes = [np.asarray(a, dtype=float) for a in axes]
    structured = isinstance(model, BeignetModel) and all(
        _is_dyadic_grid(a, domain.lower[i], domain.upper[i]) for i, a in enumerate(axes)
    )
    if structured:
        return eval_grid(model, request, [len(a) for a in axes], times=times,
                         params=params, allow_aliasing=allow_aliasing)

    count = len(np.atleast_1d(times)) if (model.time_dependent and times is not None) else 1
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    points = np.tile(mesh, (count, 1))
    point_times = None
    if model.time_dependent:
        point_times = np.repeat(np.atleast_1d(np.asarray(times, dtype=float)), len(mesh))
    values = eval_point(model, request, points, point_times, params=params)
    shape = (count,) + tuple(len(a) for a in axes) + (model.output_dim,)
    return {key: ad.reshape(v, shape) for key, v in values.items()}


@dataclass
class ProfileAnsatz:
    """
    U(z(eta)) = U~(eta) - U~(-eta) - tail(z) + linear_term * z, z = sinh(eta)

    tail(z) = z^(15 + p) (1 + z)^(-15) with p = lam / (1 + lam), extended as an odd
    function. linear_term is zero except when a fixture needs U = -z exactly.
    """

    inner: object
    c: float = 30.0
    lam: float = 0.5
    tail: bool = True
    linear_term: float = 0.0

    def __post_init__(self):
        if not self.c > 0:
            raise DomainError(f"profile bound c must be positive, got {self.c}")
        if not self.lam > 0:
            raise DomainError(f"similarity exponent must be positive, got {self.lam}")


def profile_domain(c):
    return DomainMap(lower=(-c,), upper=(c,), periodic=False)


def profile_tail(eta, lam, order=2):
    """
    Odd-extended far-field tail and its eta-derivatives, closed form

    Returns:
    - list [T, T_eta, ...] up to order
    """
    eta = np.asarray(eta, dtype=float)
    a = np.abs(eta)
    sign = np.where(eta < 0, -1.0, 1.0)
    z = ad.Jet([np.sinh(a), np.cosh(a), np.sinh(a), np.cosh(a)][: order + 1])
    p = lam / (1.0 + lam)
    tail = ad.power(z, 15.0 + p) * ad.power(1.0 + z, -15.0)
    # odd in eta: even-order coefficients flip sign, odd-order ones do not
    return [sign * c if m % 2 == 0 else c for m, c in enumerate(tail.coeffs)]


def _inner_columns(values, request):
    return [ad.reshape(values[key], (-1,)) for key in request]


INNER_REQUEST = ("", "x", "xx")


def inner_pointwise(ansatz, eta, params=None):
    """Inner model value and first two eta-derivatives at eta and at -eta."""
    eta = np.asarray(eta, dtype=float)
    plus = eval_point(ansatz.inner, INNER_REQUEST, eta[:, None], params=params)
    minus = eval_point(ansatz.inner, INNER_REQUEST, -eta[:, None], params=params)
    return _inner_columns(plus, INNER_REQUEST), _inner_columns(minus, INNER_REQUEST)


def inner_shifted_grid(ansatz, grid_size, shift, params=None):
    """
    Inner jets on the upper half of a shifted structured grid

    The grid x~_j = j/M + shift covers eta = c (2 x~_j - 1); the nodes with
    eta >= 0 form the batch and the mirrored nodes -eta sit on the grid with
    shift 1/M - shift, at index M - 1 - j.

    Returns:
    - eta: (M/2,) batch coordinates in [0, c]
    - plus, minus: inner jets at eta and -eta
    """
    m = int(grid_size)
    half = np.arange(m // 2, m)
    eta = ansatz.c * (2.0 * (half / m + shift) - 1.0)
    plus = eval_grid(ansatz.inner, INNER_REQUEST, (m,), shifts=[[shift]], params=params)
    minus = eval_grid(ansatz.inner, INNER_REQUEST, (m,), shifts=[[1.0 / m - shift]], params=params)
    mirror = m - 1 - half
    plus = [column[half] for column in _inner_columns(plus, INNER_REQUEST)]
    minus = [column[mirror] for column in _inner_columns(minus, INNER_REQUEST)]
    return eta, plus, minus


def profile_terms(ansatz, eta, plus, minus):
    """
    U and its derivatives from inner jets

    Returns:
    - dict with z, z_eta, U, U_eta, U_y and dU_y (the eta-derivative of U_y)
    """
    eta = np.asarray(eta, dtype=float)
    sh, ch = np.sinh(eta), np.cosh(eta)

    # antisymmetrized inner part; odd derivatives of U~(-eta) pick up a sign
    a0 = plus[0] - minus[0]
    a1 = plus[1] + minus[1]
    a2 = plus[2] - minus[2]
    if ansatz.tail:
        t0, t1, t2 = profile_tail(eta, ansatz.lam, order=2)
        a0, a1, a2 = a0 - t0, a1 - t1, a2 - t2

    U, U_eta = a0, a1
    U_y = a1 / ch
    dU_y = (a2 - a1 * (sh / ch)) / ch
    if ansatz.linear_term:
        U = U + ansatz.linear_term * sh
        U_eta = U_eta + ansatz.linear_term * ch
        U_y = U_y + ansatz.linear_term
    return {"z": sh, "z_eta": ch, "U": U, "U_eta": U_eta, "U_y": U_y, "dU_y": dU_y}


def profile_eval(ansatz, eta, need_derivative=True, params=None):
    """
    Evaluate the profile U(z) and optionally U_y at eta

    Parameters:
    - ansatz: ProfileAnsatz
    - eta: (P,) coordinates with |eta| <= c
    - need_derivative: also return U_y
    - params: optional parameter override for the inner model

    Returns:
    - dict with "U" (and "U_y")
    """
    eta = np.asarray(eta, dtype=float)
    if np.isnan(eta).any() or (np.abs(eta) > ansatz.c).any():
        raise DomainError(f"profile coordinates must satisfy |eta| <= {ansatz.c}")
    plus, minus = inner_pointwise(ansatz, eta, params)
    terms = profile_terms(ansatz, eta, plus, minus)
    out = {"U": terms["U"]}
    if need_derivative:
        out["U_y"] = terms["U_y"]
    return out
