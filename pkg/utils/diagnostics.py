"""
Evaluation metrics and analysis tools.
"""
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from sklearn.metrics import mean_squared_error

from utils import autodiff as ad
from utils.decoder import param_count as decoder_param_count
from utils.errors import ShapeError, UndefinedMetricError
from utils.field_model import build_beignet, eval_on_axes, inner_pointwise, profile_terms
from utils.problems import get_problem, profile_residual
from utils.pyramid import param_count as pyramid_param_count
from utils.reference_solver import KDV_DISPERSION
from utils.training import (
    TrainConfig,
    chunk_losses,
    ic_grid_axes,
    init_optimizer,
    init_weighting,
    residual_values,
    sample_batch,
    train_step,
)

logger = logging.getLogger(__name__)

PSNR_CAP = 200.0
BURGERS_GRID_POINTS = 1000


@dataclass
class MetricReport:
    """Named scalar metrics with the grid and step they were computed on."""

    metrics: dict
    grid: str = ""
    step: int = 0

    @property
    def flagged(self):
        return sorted(k for k, v in self.metrics.items() if not np.isfinite(v))

    def to_frame(self):
        rows = [{"metric": k, "value": v, "grid": self.grid, "step": self.step} for k, v in self.metrics.items()]
        return pd.DataFrame(rows, columns=["metric", "value", "grid", "step"])


def relative_l2(prediction, reference, component_axis=None):
    """
    Relative L2 error ||prediction - reference|| / ||reference||

    Parameters:
    - prediction, reference: arrays of the same shape
    - component_axis: if given, one error per index along this axis

    Returns:
    - float, or an array with one entry per component
    """
    prediction = np.asarray(prediction, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if prediction.shape != reference.shape:
        raise ShapeError(f"prediction shape {prediction.shape} does not match reference {reference.shape}")
    if component_axis is not None:
        return np.array([
            relative_l2(np.take(prediction, i, axis=component_axis), np.take(reference, i, axis=component_axis))
            for i in range(reference.shape[component_axis])
        ])
    norm = np.linalg.norm(reference.ravel())
    if norm == 0:
        raise UndefinedMetricError("relative L2 error is undefined for a zero reference")
    return float(np.linalg.norm((prediction - reference).ravel()) / norm)


def burgers_grid(c):
    """Centered diagnostic points eta_i = c (i + 1/2) / 1000."""
    return c * (np.arange(BURGERS_GRID_POINTS) + 0.5) / BURGERS_GRID_POINTS


def burgers_report(ansatz, params=None):
    """
    PDE MSE and log10 max |F_U| on the fixed diagnostic grid

    The grid is only used for reporting.

    Returns:
    - (pde_mse, log10_max_residual)
    """
    eta = burgers_grid(ansatz.c)
    plus, minus = inner_pointwise(ansatz, eta, params)
    residual, _ = profile_residual(profile_terms(ansatz, eta, plus, minus), ansatz.lam)
    residual = np.asarray(residual, dtype=float)
    pde_mse = float(mean_squared_error(np.zeros_like(residual), residual))
    with np.errstate(divide="ignore"):
        log_max = float(np.log10(np.max(np.abs(residual))))
    return pde_mse, log_max


def psnr(prediction, target):
    """
    Peak signal-to-noise ratio for pixel values in [0, 1]

    An exact match is reported as 200 dB.
    """
    prediction = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    if prediction.shape != target.shape:
        raise ShapeError(f"image shapes differ: {prediction.shape} vs {target.shape}")
    mse = mean_squared_error(target.reshape(-1), prediction.reshape(-1))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


@dataclass
class ErrorSpectrum:
    modes: np.ndarray
    mode_rms: np.ndarray
    bin_edges: list = field(default_factory=list)
    bin_rms: np.ndarray = None
    bin_counts: np.ndarray = None

    def total_energy(self):
        """Mean squared error recovered from the binned spectrum."""
        return float(np.sum(self.bin_counts * self.bin_rms ** 2))

    def to_frame(self):
        return pd.DataFrame({
            "k_low": [lo for lo, _ in self.bin_edges],
            "k_high": [hi for _, hi in self.bin_edges],
            "count": self.bin_counts,
            "rms": self.bin_rms,
        })


def error_spectrum(prediction, reference):
    """
    Frequency-resolved error of a 1-D field over time

    Parameters:
    - prediction, reference: (T, N) arrays on a periodic grid without a repeated endpoint

    Returns:
    - ErrorSpectrum: one-sided |k| = 0..N/2 magnitudes, RMS over time, then RMS over
      pairs of neighboring modes; an odd mode left at the end joins the last pair
    """
    prediction = np.asarray(prediction, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if prediction.shape != reference.shape or prediction.ndim != 2:
        raise ShapeError(f"error_spectrum needs matching (T, N) arrays, got {prediction.shape} and {reference.shape}")
    n = prediction.shape[1]
    coeffs = np.fft.fft(prediction - reference, axis=1) / n
    power = np.abs(coeffs) ** 2

    half = n // 2
    modes = np.arange(half + 1)
    one_sided = power[:, :half + 1].copy()
    # fold -k onto k; 0 and the Nyquist mode are unpaired
    one_sided[:, 1:(n + 1) // 2] += power[:, :half:-1]
    mode_rms = np.sqrt(one_sided.mean(axis=0))

    num_bins = len(modes) // 2
    edges = [(2 * b, 2 * b + 1) for b in range(num_bins)]
    if len(modes) % 2 and num_bins:
        edges[-1] = (edges[-1][0], len(modes) - 1)
    elif not num_bins:
        edges = [(0, len(modes) - 1)]
    counts = np.array([hi - lo + 1 for lo, hi in edges])
    bin_rms = np.array([np.sqrt(np.mean(mode_rms[lo:hi + 1] ** 2)) for lo, hi in edges])
    return ErrorSpectrum(modes, mode_rms, edges, bin_rms, counts)


def fourier_mode(n, k, phase="cos"):
    """Grid mode cos/sin(2 pi k j / n), scaled to unit mean square on the grid."""
    if phase not in ("cos", "sin"):
        raise ShapeError(f"mode phase must be 'cos' or 'sin', got {phase!r}")
    angle = 2.0 * np.pi * k * np.arange(n) / n
    pattern = np.cos(angle) if phase == "cos" else np.sin(angle)
    norm = np.sqrt(np.mean(pattern ** 2))
    if norm == 0:
        raise UndefinedMetricError(f"the {phase} pattern of mode {k} vanishes on a {n}-point grid")
    return pattern / norm


def modal_tangent_energy(field_fn, params, pattern):
    """
    Squared parameter-gradient norm of a_k = mean(field * pattern)

    Parameters:
    - field_fn: callable(params) -> (N,) field (array or Var)
    - params: dict name -> array
    - pattern: (N,) unit-mean-square Fourier pattern on the grid

    Returns:
    - float energy
    """
    tape = ad.Tape()
    names = list(params)
    leaves = [tape.watch(params[k], k) for k in names]
    values = field_fn(dict(zip(names, leaves)))
    projection = ad.mean(values * pattern)
    if not isinstance(projection, ad.Var):
        return 0.0
    grads = tape.gradient(projection, leaves)
    return float(sum(np.sum(g * g) for g in grads))


def modal_tangent(model, k, variant="output", grid_size=None, t_eval=None, phase="cos", params=None):
    """
    Modal tangent energy of a 1-D time-dependent model at wavenumber k

    Parameters:
    - model: field model on a 1-D domain
    - k: wavenumber in cycles per domain length
    - variant: "output" projects u itself; "operator" projects the linearized KdV
      spatial operator u_bar u_x + u_bar_x u + 0.022^2 u_xxx around the current state
    - grid_size: evaluation grid (defaults to 4k, at least 16)
    - t_eval: physical evaluation time (defaults to the domain start)
    - phase: "cos" or "sin" pattern

    Returns:
    - float energy
    """
    if variant not in ("output", "operator"):
        raise ShapeError(f"Unknown modal tangent variant '{variant}'")
    domain = model.domain
    n = int(grid_size or max(16, 4 * int(k)))
    axes = [domain.axis_coordinates(0, n)]
    times = [domain.t_lower if t_eval is None else t_eval] if model.time_dependent else None
    pattern = fourier_mode(n, k, phase)
    base = params or model.params

    if variant == "output":
        def field_fn(p):
            return ad.reshape(eval_on_axes(model, ("",), axes, times=times, params=p)[""], (n,))
        return modal_tangent_energy(field_fn, base, pattern)

    frozen = eval_on_axes(model, ("", "x"), axes, times=times, params=base)
    u_bar = np.reshape(frozen[""], (n,))
    u_bar_x = np.reshape(frozen["x"], (n,))

    def operator_fn(p):
        values = eval_on_axes(model, ("", "x", "xxx"), axes, times=times, params=p)
        u = ad.reshape(values[""], (n,))
        u_x = ad.reshape(values["x"], (n,))
        u_xxx = ad.reshape(values["xxx"], (n,))
        return u_bar * u_x + u_bar_x * u + KDV_DISPERSION * u_xxx

    return modal_tangent_energy(operator_fn, base, pattern)


def top_mode(pyramid_config):
    """Highest wavenumber stored on the finest pyramid level."""
    return max(pyramid_config.sizes) // 2


def kdv_stiffness_sweep(pyramid_config, decoder_config, scale_counts=(4, 6, 8, 10), seed=0, Mx=None, Mt=16):
    """
    Initialization stiffness of KdV models with growing pyramid depth

    For each scale count: initial residual loss, pyramid-gradient norm, and the
    output and operator-composed modal energies at the top represented mode.

    Returns:
    - DataFrame, one row per scale count
    """
    problem = get_problem("kdv")
    rows = []
    for num_scales in scale_counts:
        config = replace(pyramid_config, num_scales=int(num_scales), level_sizes=None)
        model = build_beignet(config, decoder_config, problem.domain, seed)
        grid = int(Mx or max(config.sizes))
        train_config = TrainConfig(Mx=grid, Mt=Mt, shift_mode="none", allow_aliasing=True, num_chunks=1)
        batch = sample_batch(problem, train_config, np.random.default_rng(seed))

        tape = ad.Tape()
        names = list(model.params)
        leaves = [tape.watch(model.params[k], k) for k in names]
        (residual,) = residual_values(problem, model, train_config, batch, dict(zip(names, leaves)))
        loss = ad.mean(chunk_losses(residual, 1))
        grads = tape.gradient(loss, leaves)
        pyramid_norm = float(np.sqrt(sum(np.sum(g * g) for name, g in zip(names, grads) if name.startswith("pyramid/"))))

        k = top_mode(config)
        rows.append({
            "num_scales": int(num_scales),
            "param_count": pyramid_param_count(config) + decoder_param_count(model.decoder),
            "top_mode": k,
            "init_residual_loss": float(loss.value),
            "pyramid_grad_norm": pyramid_norm,
            "modal_output": modal_tangent(model, k, "output"),
            "modal_operator": modal_tangent(model, k, "operator"),
        })
        logger.info("KdV stiffness: %d scales, residual loss %.3e", num_scales, rows[-1]["init_residual_loss"])
    return pd.DataFrame(rows)


def residual_path_throughput(problem, model, config, steps=5, warmup=1):
    """
    Optimizer steps per second through the FFT and pointwise residual paths

    Warm-up steps are excluded from the timing.

    Returns:
    - dict path -> steps/sec
    """
    rates = {}
    ic_axes = ic_grid_axes(problem, config.ic_grid)
    for path in ("fft", "pointwise"):
        path_config = replace(config, residual_path=path)
        rng = np.random.default_rng(config.seed)
        params = model.params
        optimizer = init_optimizer(params, config.schedule, config.beta1, config.beta2, config.eps)
        weighting = init_weighting(problem, path_config)
        start = None
        for step in range(warmup + steps):
            if step == warmup:
                start = time.perf_counter()
            batch = sample_batch(problem, path_config, rng)
            outcome = train_step(problem, model, params, optimizer, weighting, path_config, batch, ic_axes)
            params, optimizer, weighting = outcome.params, outcome.optimizer, outcome.weighting
        rates[path] = steps / (time.perf_counter() - start)
        logger.info("%s residual path: %.3f steps/s", path, rates[path])
    return rates


def throughput_frame(rates):
    return pd.DataFrame([{"residual_path": k, "steps_per_sec": v} for k, v in rates.items()])


def modal_sweep(model, wavenumbers, variant="output", grid_size=None):
    """Modal tangent energy per wavenumber as a DataFrame."""
    n = grid_size or max(16, 4 * int(max(wavenumbers)))
    rows = [{"k": int(k), "variant": variant, "energy": modal_tangent(model, int(k), variant, grid_size=n)}
            for k in wavenumbers]
    return pd.DataFrame(rows)
