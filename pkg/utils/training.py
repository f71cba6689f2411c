"""
Training loop for field models and the self-similar profile ansatz.

A step samples collocation (time jitter and per-slice grid shifts, or a Burgers
batch), builds the loss terms on a fresh tape, optionally refreshes the
grad-norm weights, takes one Adam step and emits a metric record.
"""
import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from utils import autodiff as ad
from utils.errors import ConfigError, NumericalError, PoisonedStepError, ShapeError
from utils.field_model import (
    ProfileAnsatz,
    eval_grid,
    eval_on_axes,
    eval_point,
    inner_pointwise,
    inner_shifted_grid,
    profile_terms,
    reinitialize,
    with_params,
)
from utils.problems import component_fields, ic_loss, profile_loss_from_terms, window_problem

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("exponential", "cosine", "constant")
SHIFT_MODES = ("per_slice", "none")
RESIDUAL_PATHS = ("fft", "pointwise")
WEIGHTING_SCHEMES = ("grad_norm", "none")
SAMPLERS = ("shifted_grid", "uniform")


@dataclass
class ScheduleSpec:
    kind: str = "exponential"
    learning_rate: float = 1e-3
    warmup_steps: int = 0
    decay_steps: int = 2000
    decay_rate: float = 0.9
    total_steps: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"Unknown schedule kind '{self.kind}', expected one of {', '.join(SCHEDULE_KINDS)}")
        if self.warmup_steps < 0 or self.decay_steps <= 0:
            raise ConfigError("schedule needs warmup_steps >= 0 and decay_steps > 0")


def lr_schedule(step, spec):
    """
    Learning rate at a given step

    Parameters:
    - step: optimizer step, >= 0
    - spec: ScheduleSpec

    Returns:
    - linear warmup from 0, then the staircase lr * rate^floor((step - warmup) / decay_steps),
      a cosine decay reaching 0 at total_steps, or a constant rate
    """
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    base = spec.learning_rate
    if spec.warmup_steps and step < spec.warmup_steps:
        return base * step / spec.warmup_steps
    elapsed = step - spec.warmup_steps
    if spec.kind == "exponential":
        return base * spec.decay_rate ** (elapsed // spec.decay_steps)
    elif spec.kind == "cosine":
        span = max(1, spec.total_steps - spec.warmup_steps)
        progress = min(1.0, elapsed / span)
        return 0.5 * base * (1.0 + np.cos(np.pi * progress))
    elif spec.kind == "constant":
        return base
    raise ConfigError(f"Unknown schedule kind '{spec.kind}'")


@dataclass
class OptimizerState:
    step: int
    m: dict
    v: dict
    schedule: ScheduleSpec
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params, schedule=None, beta1=0.9, beta2=0.999, eps=1e-8):
    schedule = schedule or ScheduleSpec()
    return OptimizerState(
        step=0,
        m={k: np.zeros_like(v, dtype=float) for k, v in params.items()},
        v={k: np.zeros_like(v, dtype=float) for k, v in params.items()},
        schedule=schedule, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params, grads, state):
    """
    One bias-corrected Adam update

    Parameters:
    - params: dict name -> array
    - grads: dict name -> gradient array of the same shape
    - state: OptimizerState

    Returns:
    - (new params, new OptimizerState); the inputs are not modified

    A non-finite gradient raises PoisonedStepError before anything is updated.
    """
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"gradient of {name} has shape {np.shape(g)}, expected {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise PoisonedStepError(
                f"non-finite gradient for {name} at step {state.step}",
                dump={"step": state.step, "parameter": name},
            )

    lr = lr_schedule(state.step, state.schedule)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, step=t, m=new_m, v=new_v)


@dataclass
class WeightingState:
    weights: dict
    scheme: str = "grad_norm"
    causal_tol: float = 1.0
    num_chunks: int = 16
    update_every: int = 1000
    momentum: float = 0.9

    def __post_init__(self):
        if self.scheme not in WEIGHTING_SCHEMES:
            raise ConfigError(f"Unknown weighting scheme '{self.scheme}'")
        if any(not w > 0 for w in self.weights.values()):
            raise ConfigError(f"loss weights must be positive, got {self.weights}")
        if self.num_chunks < 1 or self.update_every < 1:
            raise ConfigError("weighting needs num_chunks >= 1 and update_every >= 1")


def grad_norm_targets(norms):
    """Balanced weights sum_j |g_j| / (m |g_i|) over the terms with a positive norm."""
    positive = {k: float(n) for k, n in norms.items() if np.isfinite(n) and n > 0}
    if not positive:
        return {}
    total = sum(positive.values())
    return {k: total / (len(positive) * n) for k, n in positive.items()}


def grad_norm_weights(norms, state):
    """
    Moving-average update of the loss weights from per-term gradient norms

    Terms with a zero norm keep their weight for this update; if every norm is
    zero the weights are returned unchanged.
    """
    targets = grad_norm_targets(norms)
    weights = dict(state.weights)
    for name, target in targets.items():
        weights[name] = state.momentum * weights[name] + (1.0 - state.momentum) * target
    return weights


def causal_weights(chunk_losses, tol):
    """w_k = exp(-tol * sum_{j<k} L_j); plain constants, never differentiated."""
    losses = np.asarray(chunk_losses, dtype=float)
    preceding = np.concatenate([[0.0], np.cumsum(losses)[:-1]])
    return np.exp(-tol * preceding)


@dataclass
class TrainConfig:
    max_steps: int = 1000
    seed: int = 0
    Mx: int = 64
    My: int = 0
    Mt: int = 64
    shift_mode: str = "per_slice"
    allow_aliasing: bool = False
    residual_path: str = "fft"
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weighting: str = "grad_norm"
    init_weights: dict = None
    causal_tol: float = 1.0
    num_chunks: int = 0
    update_every_steps: int = 1000
    ic_grid: int = 256
    log_every: int = 100
    eval_every: int = 0
    checkpoint_every: int = 0
    batch_size: int = 2048
    sampler: str = "shifted_grid"

    def __post_init__(self):
        if self.max_steps < 0:
            raise ConfigError(f"training.max_steps must be >= 0, got {self.max_steps}")
        if self.shift_mode not in SHIFT_MODES:
            raise ConfigError(f"Unknown shift_mode '{self.shift_mode}', expected one of {', '.join(SHIFT_MODES)}")
        if self.residual_path not in RESIDUAL_PATHS:
            raise ConfigError(f"Unknown residual_path '{self.residual_path}'")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"Unknown sampler '{self.sampler}', expected one of {', '.join(SAMPLERS)}")
        if self.Mt < 1 or self.Mx < 1 or self.batch_size < 1:
            raise ConfigError("grid sizes and batch size must be positive")

    def grid_sizes(self, dims):
        sizes = (self.Mx, self.My or self.Mx)
        return sizes[:dims]


def init_weighting(problem, config):
    weights = dict(problem.init_weights)
    if config.init_weights:
        unknown = set(config.init_weights) - set(weights)
        if unknown:
            raise ConfigError(f"init_weights names unknown loss terms {sorted(unknown)}")
        weights.update(config.init_weights)
    num_chunks = config.num_chunks or problem.num_chunks
    if problem.kind != "profile" and config.Mt % num_chunks:
        raise ConfigError(f"num_chunks={num_chunks} does not divide Mt={config.Mt}")
    return WeightingState(
        weights={k: float(v) for k, v in weights.items()},
        scheme=config.weighting,
        causal_tol=config.causal_tol,
        num_chunks=num_chunks,
        update_every=config.update_every_steps,
    )


def ic_grid_axes(problem, size):
    """Uniform periodic IC grid with `size` nodes per axis."""
    domain = problem.domain
    return [domain.axis_coordinates(axis, size) for axis in range(domain.dims)]


@dataclass
class Batch:
    """One step's collocation: residual slice times and shifts, or a profile batch."""

    times: np.ndarray = None
    shifts: np.ndarray = None
    eta: np.ndarray = None
    grid_shift: float = None


def sample_batch(problem, config, rng, c=None):
    """
    Draw the collocation of one step

    Time-dependent problems get t~_n = n / Mt + tau with tau ~ U[0, 1/Mt] and one
    shift per slice drawn from U[0, 1/M] per axis (both zero when shift_mode is
    "none"). Profile problems get a phase shift of a 2*batch grid or a uniform
    batch on [0, c].
    """
    if problem.kind == "profile":
        if config.sampler == "shifted_grid":
            return Batch(grid_shift=float(rng.uniform(0.0, 1.0 / (2 * config.batch_size))))
        return Batch(eta=rng.uniform(0.0, c, config.batch_size))

    sizes = np.asarray(config.grid_sizes(problem.spatial_dims), dtype=float)
    unit_times = np.arange(config.Mt) / config.Mt
    if config.shift_mode == "per_slice":
        unit_times = unit_times + rng.uniform(0.0, 1.0 / config.Mt)
        shifts = rng.uniform(0.0, 1.0, (config.Mt, len(sizes))) / sizes
    else:
        shifts = np.zeros((config.Mt, len(sizes)))
    return Batch(times=problem.domain.time_from_unit(unit_times), shifts=shifts)


def _pointwise_grid(model, request, grid_sizes, shifts, times, params):
    """Structured-grid nodes evaluated one by one through eval_point."""
    domain = model.domain
    dims = domain.dims
    axes = [np.arange(m) / m for m in grid_sizes]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    unit = mesh[None] + np.asarray(shifts).reshape((len(times),) + (1,) * dims + (dims,))
    points = np.asarray(domain.lower) + unit.reshape(-1, dims) / domain.chain
    point_times = np.repeat(times, int(np.prod(grid_sizes)))
    values = eval_point(model, request, points, point_times, params=params)
    shape = (len(times),) + tuple(grid_sizes) + (model.output_dim,)
    return {key: ad.reshape(v, shape) for key, v in values.items()}


def residual_values(problem, model, config, batch, params=None):
    """PDE residual arrays, one (T, *M) array (or Var) per residual term."""
    grid_sizes = config.grid_sizes(problem.spatial_dims)
    if config.residual_path == "fft":
        values = eval_grid(model, problem.request, grid_sizes, shifts=batch.shifts, times=batch.times,
                           params=params, allow_aliasing=config.allow_aliasing)
    else:
        values = _pointwise_grid(model, problem.request, grid_sizes, batch.shifts, batch.times, params)
    return problem.residual(component_fields(values, problem.components))


def chunk_losses(residual, num_chunks):
    """Mean squared residual per contiguous time chunk, shape (num_chunks,)."""
    count = np.shape(_array(residual))[0]
    if count % num_chunks:
        raise ConfigError(f"num_chunks={num_chunks} does not divide {count} residual time slices")
    squared = residual * residual
    return ad.mean(ad.reshape(squared, (num_chunks, -1)), axis=1)


def compute_losses(problem, model, params, config, batch, weighting, ic_axes=None):
    """
    Unweighted loss terms of one step

    Parameters:
    - problem: ProblemSpec
    - model: field model, or ProfileAnsatz for profile problems
    - params: parameter dict (arrays, or taped Vars for training)
    - config: TrainConfig
    - batch: Batch from sample_batch
    - weighting: WeightingState (chunk count and causal tolerance)
    - ic_axes: IC grid axes (time-dependent problems)

    Returns:
    - (dict term -> scalar, per-chunk summed residual losses or None)
    """
    if problem.kind == "profile":
        if batch.grid_shift is not None:
            eta, plus, minus = inner_shifted_grid(model, 2 * config.batch_size, batch.grid_shift, params)
        else:
            eta = batch.eta
            plus, minus = inner_pointwise(model, eta, params)
        loss = profile_loss_from_terms(profile_terms(model, eta, plus, minus), model.lam)
        return {problem.residual_terms[0]: loss}, None

    losses = dict(ic_loss(model, problem, ic_axes, params))
    per_chunk = [chunk_losses(r, weighting.num_chunks) for r in residual_values(problem, model, config, batch, params)]
    # two-field systems share one causal profile from the summed chunk losses
    summed = np.sum([_array(c) for c in per_chunk], axis=0)
    w = causal_weights(summed, weighting.causal_tol)
    for term, chunks in zip(problem.residual_terms, per_chunk):
        losses[term] = ad.mean(chunks * w)
    return losses, summed


def weighted_total(losses, weights):
    total = None
    for name, loss in losses.items():
        term = weights[name] * loss
        total = term if total is None else total + term
    return total


def _params_of(model):
    return model.inner.params if isinstance(model, ProfileAnsatz) else model.params


def _with_params(model, params):
    if isinstance(model, ProfileAnsatz):
        return replace(model, inner=with_params(model.inner, params))
    return with_params(model, params)


def _array(x):
    return x.value if isinstance(x, ad.Var) else x


def _scalar(x):
    return float(np.asarray(_array(x)).reshape(()))


@dataclass
class TrainState:
    """Everything needed to continue a run: model, optimizer, weights and RNG state."""

    model: object
    optimizer: OptimizerState
    weighting: WeightingState
    rng_state: dict
    step: int = 0


@dataclass
class TrainResult:
    model: object
    optimizer: OptimizerState
    weighting: WeightingState
    rng_state: dict
    metrics: list = field(default_factory=list)

    @property
    def step(self):
        return self.optimizer.step

    def frame(self):
        """Metric records as a DataFrame, one row per logged step."""
        return pd.DataFrame(self.metrics)


@dataclass
class StepOutcome:
    params: dict
    optimizer: OptimizerState
    weighting: WeightingState
    losses: dict
    total: object
    lr: float


def train_step(problem, model, params, optimizer, weighting, config, batch, ic_axes=None):
    """
    One optimizer step on a sampled batch

    The grad-norm weights are refreshed at step 0 and every update_every steps,
    with one extra backward pass per loss term, before the weighted total is
    differentiated.
    """
    step = optimizer.step
    tape = ad.Tape()
    names = list(params)
    leaves = [tape.watch(params[k], k) for k in names]
    losses, _ = compute_losses(problem, model, dict(zip(names, leaves)), config, batch, weighting, ic_axes)

    if weighting.scheme == "grad_norm" and len(losses) > 1 and step % weighting.update_every == 0:
        norms = {}
        for term, loss in losses.items():
            grads = tape.gradient(loss, leaves)
            norms[term] = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
        weighting = replace(weighting, weights=grad_norm_weights(norms, weighting))

    total = weighted_total(losses, weighting.weights)
    grads = dict(zip(names, tape.gradient(total, leaves)))
    lr = lr_schedule(step, optimizer.schedule)
    params, optimizer = adam_step(params, grads, optimizer)
    return StepOutcome(params, optimizer, weighting, losses, total, lr)


class MetricSink:
    """Appends metric records to a JSON-lines file."""

    def __init__(self, path):
        self.path = path
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)

    def write(self, record):
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def train(problem, model, config, evaluate=None, sink=None, resume=None, on_checkpoint=None, ic_axes=None):
    """
    Train a model on a problem

    Parameters:
    - problem: ProblemSpec
    - model: BeignetModel / CoordinateNetwork, or ProfileAnsatz for profile problems
    - config: TrainConfig
    - evaluate: optional callable (model, problem) -> dict of named metrics, run every
      eval_every steps and at the end
    - sink: optional MetricSink receiving every record
    - resume: optional TrainState to continue from
    - on_checkpoint: optional callable(TrainState), called every checkpoint_every steps
    - ic_axes: IC grid axes; defaults to a uniform ic_grid-point grid

    Returns:
    - TrainResult; the metric records never contain wall-clock values
    """
    if problem.kind == "profile" and not isinstance(model, ProfileAnsatz):
        raise ConfigError("profile problems train a ProfileAnsatz")
    if problem.kind != "profile" and ic_axes is None:
        ic_axes = ic_grid_axes(problem, config.ic_grid)

    if resume is not None:
        model, optimizer, weighting = resume.model, resume.optimizer, resume.weighting
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
    else:
        rng = np.random.default_rng(config.seed)
        schedule = config.schedule
        if schedule.kind == "cosine" and not schedule.total_steps:
            schedule = replace(schedule, total_steps=config.max_steps)
        optimizer = init_optimizer(_params_of(model), schedule, config.beta1, config.beta2, config.eps)
        weighting = init_weighting(problem, config)

    c = model.c if isinstance(model, ProfileAnsatz) else None
    params = _params_of(model)
    metrics = []
    logger.info("Training %s for %d steps from step %d", problem.name, config.max_steps, optimizer.step)

    def emit(record):
        metrics.append(record)
        if sink is not None:
            sink.write(record)

    while optimizer.step < config.max_steps:
        step = optimizer.step
        batch = sample_batch(problem, config, rng, c)
        try:
            outcome = train_step(problem, model, params, optimizer, weighting, config, batch, ic_axes)
            params, optimizer, weighting = outcome.params, outcome.optimizer, outcome.weighting
            losses, total, lr = outcome.losses, outcome.total, outcome.lr
        except NumericalError as exc:
            exc.dump.update({
                "step": step,
                "problem": problem.name,
                "weights": dict(weighting.weights),
                "last_record": metrics[-1] if metrics else None,
            })
            logger.error("Numerical failure at step %d: %s", step, exc)
            raise

        model = _with_params(model, params)
        if step % config.log_every == 0 or optimizer.step == config.max_steps:
            record = {"step": step, "lr": lr, "loss": _scalar(total)}
            for term, loss in losses.items():
                record[f"loss/{term}"] = _scalar(loss)
                record[f"weight/{term}"] = weighting.weights[term]
            if evaluate is not None and config.eval_every and step % config.eval_every == 0:
                record.update({f"eval/{k}": v for k, v in evaluate(model, problem).items()})
            logger.info("step %d loss %.6e lr %.3e", step, record["loss"], lr)
            emit(record)
        if on_checkpoint is not None and config.checkpoint_every and optimizer.step % config.checkpoint_every == 0:
            on_checkpoint(TrainState(model, optimizer, weighting, rng.bit_generator.state, optimizer.step))

    # final record on the next batch, drawn from a copy so a resumed run sees the same stream
    peek = np.random.default_rng()
    peek.bit_generator.state = rng.bit_generator.state
    batch = sample_batch(problem, config, peek, c)
    losses, _ = compute_losses(problem, model, params, config, batch, weighting, ic_axes)
    final = {"step": optimizer.step, "final": True, "loss": _scalar(weighted_total(losses, weighting.weights))}
    for term, loss in losses.items():
        final[f"loss/{term}"] = _scalar(loss)
    if evaluate is not None:
        final.update({f"eval/{k}": v for k, v in evaluate(model, problem).items()})
    emit(final)
    return TrainResult(model, optimizer, weighting, rng.bit_generator.state, metrics)


@dataclass
class WindowPlan:
    num_windows: int = 1
    steps_per_window: int = 0
    transfer: str = "discrete_ic_transfer"

    def __post_init__(self):
        if self.num_windows < 1:
            raise ConfigError(f"num_windows must be >= 1, got {self.num_windows}")
        if self.transfer != "discrete_ic_transfer":
            raise ConfigError(f"Unknown window_mode '{self.transfer}'")


@dataclass
class WindowResult:
    models: list
    results: list
    edges: np.ndarray

    @property
    def metrics(self):
        return [record for result in self.results for record in result.metrics]


def window_edges(problem, num_windows):
    return np.linspace(problem.domain.t_lower, problem.domain.t_upper, num_windows + 1)


def train_windows(problem, model, config, plan=None, evaluate=None, sink=None, ic_axes=None, on_checkpoint=None):
    """
    Train consecutive time windows with independent networks

    Window w is initialized with seed + w and trained on its own time interval; the
    field it predicts at its end time, sampled on the IC grid, is the initial data of
    window w + 1. One window is the same as calling train.

    on_checkpoint, if given, is called as on_checkpoint(models, state) every
    checkpoint_every steps and after each finished window; models holds the finished
    windows followed by the model of the current one.

    Returns:
    - WindowResult with one model per window and the window edges
    """
    plan = plan or WindowPlan(problem.num_windows, config.max_steps)
    steps = plan.steps_per_window or config.max_steps
    edges = window_edges(problem, plan.num_windows)
    if ic_axes is None:
        ic_axes = ic_grid_axes(problem, config.ic_grid)

    models, results = [], []
    ic_data = problem.ic_data
    for w in range(plan.num_windows):
        sub_problem = window_problem(problem, edges[w], edges[w + 1], ic_data)
        sub_model = model if w == 0 else reinitialize(model, config.seed + w)
        sub_model = replace(sub_model, domain=sub_problem.domain)
        sub_config = replace(config, seed=config.seed + w, max_steps=steps)
        logger.info("Window %d/%d on t in [%.4f, %.4f]", w + 1, plan.num_windows, edges[w], edges[w + 1])

        window_sink = _WindowSink(sink, w) if sink is not None and plan.num_windows > 1 else sink
        window_checkpoint = _window_hook(on_checkpoint, list(models)) if on_checkpoint is not None else None
        result = train(sub_problem, sub_model, sub_config, evaluate=evaluate, sink=window_sink, ic_axes=ic_axes,
                       on_checkpoint=window_checkpoint)
        models.append(result.model)
        results.append(result)
        if on_checkpoint is not None:
            on_checkpoint(list(models), TrainState(result.model, result.optimizer, result.weighting,
                                                   result.rng_state, result.step))

        terminal = eval_on_axes(result.model, ("",), ic_axes, times=[edges[w + 1]])[""][0]
        ic_data = (ic_axes, terminal)
    return WindowResult(models, results, edges)


def _window_hook(on_checkpoint, done):
    def hook(state):
        on_checkpoint(done + [state.model], state)
    return hook


class _WindowSink:
    def __init__(self, sink, window):
        self.sink = sink
        self.window = window

    def write(self, record):
        self.sink.write(dict(record, window=self.window))


def window_index(edges, times):
    """Window owning each time; a shared edge belongs to the later window."""
    index = np.searchsorted(edges, np.asarray(times, dtype=float), side="right") - 1
    return np.clip(index, 0, len(edges) - 2)


def predict(model, axes, times=None, max_points=65536):
    """
    Model values on a tensor grid, evaluated a few time slices at a time

    Returns:
    - (T, *sizes, output_dim) array
    """
    if not model.time_dependent or times is None:
        return eval_on_axes(model, ("",), axes, times=times)[""]
    times = np.atleast_1d(np.asarray(times, dtype=float))
    per_slice = int(np.prod([len(a) for a in axes]))
    batch = max(1, max_points // max(1, per_slice))
    parts = [eval_on_axes(model, ("",), axes, times=times[i:i + batch])[""] for i in range(0, len(times), batch)]
    return np.concatenate(parts, axis=0)


def stitched_eval(models, edges, axes, times):
    """
    Evaluate per-window models on one grid, picking the window by time

    Returns:
    - (T, *sizes, output_dim) array covering every requested time
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    owner = window_index(edges, times)
    out = None
    for w in np.unique(owner):
        selected = np.flatnonzero(owner == w)
        values = predict(models[w], axes, times[selected])
        if out is None:
            out = np.zeros((len(times),) + values.shape[1:])
        out[selected] = values
    return out
