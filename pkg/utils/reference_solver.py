"""
Pseudospectral reference solutions with exponential time differencing RK4.

Each system is written as v_t = L v + N(v) in Fourier space with a diagonal
linear part L; the ETDRK4 coefficients are evaluated by contour averaging in
the complex plane, which stays accurate where L*dt is tiny.
"""
import logging

import numpy as np

from utils.ndarray_fft import signed_modes

logger = logging.getLogger(__name__)

# Allen-Cahn
AC_DIFFUSION = 1e-4
AC_REACTION = 5.0
# KdV
KDV_DISPERSION = 0.022 ** 2
# Ginzburg-Landau
GL_KAPPA = 10.0
GL_EPSILON = GL_KAPPA / 50.0 ** 2
# Gray-Scott (eps_u, eps_v, b1, b2, c1, c2)
GS_PARAMETERS = (0.2, 0.1, 40.0, 100.0, 1000.0, 1000.0)


def etdrk4_coefficients(linear, dt, n_roots=64):
    """
    ETDRK4 update coefficients for a diagonal linear operator

    Parameters:
    - linear: complex array of L per mode
    - dt: time step
    - n_roots: contour points on the unit circle around each L*dt

    Returns:
    - dict with E, E2, Q, f1, f2, f3 (same shape as linear)
    """
    linear = np.asarray(linear, dtype=complex)
    roots = np.exp(2j * np.pi * (np.arange(n_roots) + 0.5) / n_roots)
    lr = dt * linear[..., None] + roots
    lr_sq = lr ** 2
    lr_cu = lr ** 3
    exp_lr = np.exp(lr)
    coeffs = {
        "E": np.exp(dt * linear),
        "E2": np.exp(0.5 * dt * linear),
        "Q": dt * ((np.exp(lr / 2.0) - 1.0) / lr).mean(axis=-1),
        "f1": dt * ((-4.0 - lr + exp_lr * (4.0 - 3.0 * lr + lr_sq)) / lr_cu).mean(axis=-1),
        "f2": dt * ((2.0 + lr + exp_lr * (lr - 2.0)) / lr_cu).mean(axis=-1),
        "f3": dt * ((-4.0 - 3.0 * lr - lr_sq + exp_lr * (4.0 - lr)) / lr_cu).mean(axis=-1),
    }
    if np.isrealobj(linear) or np.all(linear.imag == 0):
        coeffs = {k: v.real.astype(complex) for k, v in coeffs.items()}
    return coeffs


def etdrk4_step(v, nonlinear, coeffs):
    """One ETDRK4 step of v_t = L v + N(v) in Fourier space."""
    E, E2, Q = coeffs["E"], coeffs["E2"], coeffs["Q"]
    n_v = nonlinear(v)
    a = E2 * v + Q * n_v
    n_a = nonlinear(a)
    b = E2 * v + Q * n_a
    n_b = nonlinear(b)
    c = E2 * a + Q * (2.0 * n_b - n_v)
    n_c = nonlinear(c)
    return E * v + coeffs["f1"] * n_v + 2.0 * coeffs["f2"] * (n_a + n_b) + coeffs["f3"] * n_c


def integrate(v0, linear, nonlinear, t_final, num_times, dt):
    """
    Integrate from t = 0 and record num_times equispaced snapshots including both ends

    The step is shrunk so that every output interval holds a whole number of steps.

    Returns:
    - times: (num_times,)
    - snapshots: list of spectra
    """
    times = np.linspace(0.0, t_final, num_times)
    interval = times[1] - times[0] if num_times > 1 else t_final
    substeps = max(1, int(np.ceil(interval / dt - 1e-9)))
    step = interval / substeps
    coeffs = etdrk4_coefficients(linear, step)
    logger.info("ETDRK4: %d snapshots, %d steps of %.3e", num_times, substeps * (num_times - 1), step)

    v = v0
    snapshots = [v0.copy()]
    for index in range(1, num_times):
        for _ in range(substeps):
            v = etdrk4_step(v, nonlinear, coeffs)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"reference integration diverged before t={times[index]:.4f}")
        snapshots.append(v.copy())
    return times, snapshots


def wavenumbers(n, length=2.0):
    """Physical wavenumbers of an n-point periodic grid of the given length, FFT order."""
    return 2.0 * np.pi * signed_modes(n) / length


def dealias_mask(n, dims):
    """2/3-rule mask on an (n,)*dims FFT-ordered grid."""
    keep = np.abs(signed_modes(n)) < n / 3.0
    mask = keep
    for _ in range(dims - 1):
        mask = np.multiply.outer(mask, keep)
    return mask


def grid_axis(n, lower=-1.0, upper=1.0):
    """Periodic grid without the duplicated endpoint."""
    return lower + (upper - lower) * np.arange(n) / n


def solve_allen_cahn(n=512, num_times=201, dt=1e-4):
    """
    u_t = 1e-4 u_xx + 5u - 5u^3 on [-1, 1), u(x, 0) = x^2 cos(pi x)

    Returns:
    - (times, [x], {"u": (T, n)})
    """
    x = grid_axis(n)
    k = wavenumbers(n)
    linear = AC_REACTION - AC_DIFFUSION * k ** 2

    def nonlinear(v):
        u = np.fft.ifft(v).real
        return np.fft.fft(-AC_REACTION * u ** 3)

    times, snaps = integrate(np.fft.fft(x ** 2 * np.cos(np.pi * x)), linear, nonlinear, 1.0, num_times, dt)
    return times, [x], {"u": np.stack([np.fft.ifft(s).real for s in snaps])}


def solve_kdv(n=512, num_times=251, dt=2.5e-5):
    """
    u_t + u u_x + 0.022^2 u_xxx = 0 on [-1, 1), u(x, 0) = cos(pi x)

    Returns:
    - (times, [x], {"u": (T, n)})
    """
    x = grid_axis(n)
    k = wavenumbers(n)
    linear = 1j * KDV_DISPERSION * k ** 3
    derivative = 1j * k * dealias_mask(n, 1)

    def nonlinear(v):
        u = np.fft.ifft(v).real
        return -0.5 * derivative * np.fft.fft(u * u)

    times, snaps = integrate(np.fft.fft(np.cos(np.pi * x)), linear, nonlinear, 1.0, num_times, dt)
    return times, [x], {"u": np.stack([np.fft.ifft(s).real for s in snaps])}


def _laplacian_symbol(n):
    k = wavenumbers(n)
    return -(k[:, None] ** 2 + k[None, :] ** 2)


def solve_ginzburg_landau(n=128, num_times=101, dt=1e-3):
    """
    Real form of the complex Ginzburg-Landau system on [-1, 1)^2, t in [0, 1]

    Initial state u0 = 0.5 cos(pi x) sin(pi y), v0 = 0.5 sin(pi x) cos(pi y).

    Returns:
    - (times, [x, y], {"u": (T, n, n), "v": (T, n, n)})
    """
    x = grid_axis(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    lap = _laplacian_symbol(n)
    linear = np.stack([GL_EPSILON * lap + GL_KAPPA] * 2)
    mask = dealias_mask(n, 2)

    def nonlinear(v):
        u_re, u_im = np.fft.ifft2(v).real
        s = u_re ** 2 + u_im ** 2
        n_u = GL_KAPPA * (-u_re * s + 1.5 * u_im * s)
        n_v = GL_KAPPA * (-u_im * s - 1.5 * u_re * s)
        return np.stack([np.fft.fft2(n_u), np.fft.fft2(n_v)]) * mask

    u0 = 0.5 * np.cos(np.pi * X) * np.sin(np.pi * Y)
    v0 = 0.5 * np.sin(np.pi * X) * np.cos(np.pi * Y)
    times, snaps = integrate(np.fft.fft2(np.stack([u0, v0])), linear, nonlinear, 1.0, num_times, dt)
    fields = np.stack([np.fft.ifft2(s).real for s in snaps])
    return times, [x, x], {"u": fields[:, 0], "v": fields[:, 1]}


def solve_gray_scott(n=128, num_times=101, dt=2.5e-4):
    """
    Gray-Scott system on [-1, 1)^2, t in [0, 2]

    Initial state u0 = 1 - b/2, v0 = b/4 with b = exp(-20 (x^2 + y^2)).

    Returns:
    - (times, [x, y], {"u": (T, n, n), "v": (T, n, n)})
    """
    eps_u, eps_v, b1, b2, c1, c2 = GS_PARAMETERS
    x = grid_axis(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    lap = _laplacian_symbol(n)
    linear = np.stack([eps_u * lap - b1, eps_v * lap - b2])
    mask = dealias_mask(n, 2)
    # the constant source b1 lives in the zero mode
    source = np.zeros((n, n), dtype=complex)
    source[0, 0] = b1 * n * n

    def nonlinear(v):
        u, w = np.fft.ifft2(v).real
        reaction = u * w * w
        return np.stack([
            np.fft.fft2(-c1 * reaction) * mask + source,
            np.fft.fft2(c2 * reaction) * mask,
        ])

    bump = np.exp(-20.0 * (X ** 2 + Y ** 2))
    u0 = 1.0 - 0.5 * bump
    v0 = 0.25 * bump
    times, snaps = integrate(np.fft.fft2(np.stack([u0, v0])), linear, nonlinear, 2.0, num_times, dt)
    fields = np.stack([np.fft.ifft2(s).real for s in snaps])
    return times, [x, x], {"u": fields[:, 0], "v": fields[:, 1]}


SOLVERS = {
    "allen_cahn": solve_allen_cahn,
    "kdv": solve_kdv,
    "ginzburg_landau": solve_ginzburg_landau,
    "gray_scott": solve_gray_scott,
}
