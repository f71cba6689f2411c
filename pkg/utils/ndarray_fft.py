"""
Dense FFT core used by the feature pyramid, the reference solver and the diagnostics.

Conventions shared by every module:
- grids are float64 numpy arrays, spectra complex128 arrays in FFT mode order
  (index m maps to signed mode m for m < N/2 and m - N otherwise)
- forward transforms are unnormalized, inverse transforms carry 1/N per axis
- the unpaired -N/2 coefficient is split half-and-half across modes -N/2 and +N/2
  whenever a spectrum is evaluated off-grid, differentiated or phase shifted
"""
import numpy as np

from utils.errors import DomainError, UnsupportedSizeError


def is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


def _normalize_axes(ndim, axes):
    # None means every axis; negative axes wrap
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def _check_axes(shape, axes):
    for axis in axes:
        if not is_power_of_two(shape[axis]):
            raise UnsupportedSizeError(
                f"FFT axis {axis} has size {shape[axis]}, expected a power of two"
            )


def fft(grid, axes=None):
    """
    Unnormalized forward DFT over the given axes

    Parameters:
    - grid: real or complex array
    - axes: axes to transform (default: all)

    Returns:
    - complex128 spectrum in FFT mode order
    """
    grid = np.asarray(grid)
    axes = _normalize_axes(grid.ndim, axes)
    # Only power-of-two axes are accepted
    _check_axes(grid.shape, axes)
    return np.fft.fftn(grid, axes=axes)


def ifft(spec, axes=None):
    """
    Inverse of fft, including the 1/N normalization per axis

    Returns a complex array; callers holding real data take `.real`.
    """
    spec = np.asarray(spec)
    axes = _normalize_axes(spec.ndim, axes)
    _check_axes(spec.shape, axes)
    return np.fft.ifftn(spec, axes=axes)


def signed_modes(n):
    """Signed integer modes of an axis of size n, in FFT order."""
    return np.concatenate([np.arange(0, (n + 1) // 2), np.arange(-(n // 2), 0)])


def extended_modes(n):
    """
    Signed modes of the extended (Nyquist-split) spectrum of an axis of size n

    Even n gives -n/2..n/2 (n + 1 entries); odd n gives the usual symmetric range.
    """
    if n % 2 == 0 and n > 1:
        return np.arange(-(n // 2), n // 2 + 1)
    return np.arange(-((n - 1) // 2), (n - 1) // 2 + 1)


def extend_spectrum(spec, axes):
    """
    Reorder a spectrum to signed-mode order and split its Nyquist coefficients

    Parameters:
    - spec: complex array in FFT mode order
    - axes: axes to extend

    Returns:
    - complex array whose extended axes have size n + 1 (even n) or n (odd n),
      ordered as extended_modes(n)
    """
    ext = np.asarray(spec)
    for axis in _normalize_axes(ext.ndim, axes):
        n = ext.shape[axis]
        # Signed-mode order puts the Nyquist bin first
        ext = np.fft.fftshift(ext, axes=axis)
        if n % 2 == 0 and n > 1:
            # Split the Nyquist coefficient across -n/2 and +n/2
            half_nyquist = 0.5 * np.take(ext, [0], axis=axis)
            body = np.take(ext, np.arange(1, n), axis=axis)
            ext = np.concatenate([half_nyquist, body, half_nyquist], axis=axis)
    return ext


def extend_spectrum_adjoint(ext, sizes, axes):
    """
    Adjoint of extend_spectrum

    Parameters:
    - ext: array laid out like an extend_spectrum output
    - sizes: original sizes n of the extended axes
    - axes: the extended axes, in the same order as sizes
    """
    out = np.asarray(ext)
    for n, axis in zip(sizes, _normalize_axes(out.ndim, axes)):
        if n % 2 == 0 and n > 1:
            # Both Nyquist halves feed the single FFT bin
            first = np.take(out, [0], axis=axis)
            last = np.take(out, [n], axis=axis)
            body = np.take(out, np.arange(1, n), axis=axis)
            out = np.concatenate([0.5 * (first + last), body], axis=axis)
        out = np.fft.ifftshift(out, axes=axis)
    return out


def mode_multiplier(n, order=0, shift=0.0):
    """
    Per-mode factor (2 pi i k)^order * exp(2 pi i k shift) on the extended modes of size n

    shift may be a scalar or a 1-D array (one shift per slice); the result then has
    shape (len(shift), n_extended).
    """
    k = extended_modes(n).astype(float)
    shift = np.asarray(shift, dtype=float)
    # Phase shift first, then the derivative factor
    factor = np.exp(2j * np.pi * np.multiply.outer(shift, k))
    if order:
        factor = factor * (2j * np.pi * k) ** order
    return factor


def fold_spectrum(ext, n, size, axis):
    """
    Place an extended spectrum onto an FFT-ordered grid of `size` bins

    Modes land on bin k mod size; aliases (size < n) are summed.
    """
    # Bin of each extended mode on the target grid
    bins = extended_modes(n) % size
    moved = np.moveaxis(np.asarray(ext), axis, 0)
    out = np.zeros((size,) + moved.shape[1:], dtype=complex)
    # Plain assignment unless modes alias onto the same bin
    if len(np.unique(bins)) == len(bins):
        out[bins] = moved
    else:
        np.add.at(out, bins, moved)
    return np.moveaxis(out, 0, axis)


def fold_spectrum_adjoint(grid_spec, n, axis):
    """Adjoint of fold_spectrum: gather the bins of each extended mode."""
    size = grid_spec.shape[axis]
    bins = extended_modes(n) % size
    return np.take(grid_spec, bins, axis=axis)


def interpolation_basis(points, sizes, orders=None):
    """
    Rows of the Fourier interpolation operator at arbitrary points

    Parameters:
    - points: (P, d) unit-torus coordinates
    - sizes: spatial sizes of the spectrum
    - orders: per-axis derivative orders (default zeros)

    Returns:
    - (P, K) complex array; row p contracted with the flattened extended spectrum
      and divided by prod(sizes) gives the interpolant (or its derivative) at point p
    """
    points = np.asarray(points, dtype=float)
    orders = orders or (0,) * len(sizes)
    # Outer product of the per-axis factors, last axis fastest
    basis = np.ones((points.shape[0], 1), dtype=complex)
    for axis, (n, order) in enumerate(zip(sizes, orders)):
        factor = mode_multiplier(n, order, points[:, axis])
        basis = (basis[:, :, None] * factor[:, None, :]).reshape(points.shape[0], -1)
    return basis


def dft_at_point(spec, x, orders=None):
    """
    Evaluate the Fourier interpolant of a spectrum at arbitrary points

    Parameters:
    - spec: spectrum with its d spatial axes first, followed by any channel axes
    - x: a point of shape (d,) or points of shape (P, d) in [0, 1)^d (any real value
      is accepted, the interpolant is 1-periodic)
    - orders: optional per-axis derivative orders

    Returns:
    - real values of shape (*channels) for a single point, (P, *channels) otherwise
    """
    spec = np.asarray(spec)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    points = np.atleast_2d(x)
    # NaN would silently poison every value
    if np.isnan(points).any():
        raise DomainError("dft_at_point received a NaN coordinate")

    d = points.shape[1]
    sizes = spec.shape[:d]
    channels = spec.shape[d:]
    # Channels are flattened into columns of one matrix product
    ext = extend_spectrum(spec, axes=range(d))
    basis = interpolation_basis(points, sizes, orders)
    coeffs = ext.reshape(basis.shape[1], -1)
    values = basis @ coeffs / np.prod(sizes)

    # Hermitian spectra interpolate to real values; round-off scales with sum |basis * coeff|
    scale = np.abs(basis) @ np.abs(coeffs) / np.prod(sizes)
    if (np.abs(values.imag) > 1e-10 * scale).any():
        worst = np.max(np.abs(values.imag) / np.maximum(scale, np.finfo(float).tiny))
        raise DomainError(
            f"dft_at_point: interpolant has an imaginary part of {worst:.3e} relative to its scale, "
            "the spectrum is not Hermitian"
        )

    values = values.real.reshape((points.shape[0],) + channels)
    return values[0] if single else values
