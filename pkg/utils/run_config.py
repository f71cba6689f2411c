"""
Declarative run configuration and checkpoints.

A run config is a JSON object whose sections mirror the dataclasses below;
unknown keys are rejected with their full key path.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import numpy as np

from utils.decoder import DecoderConfig
from utils.decoder import param_count as decoder_param_count
from utils.errors import CheckpointError, ConfigError
from utils.field_model import (
    ProfileAnsatz,
    build_beignet,
    build_coordinate_network,
    coordinate_feature_dim,
    profile_domain,
    reinitialize,
    with_params,
)
from utils.file_formats import CHECKPOINT_MAGIC, read_container, write_container
from utils.problems import get_problem
from utils.pyramid import PyramidConfig
from utils.pyramid import param_count as pyramid_param_count
from utils.training import (
    OptimizerState,
    ScheduleSpec,
    TrainConfig,
    WeightingState,
    WindowPlan,
    window_edges,
)

logger = logging.getLogger(__name__)


@dataclass
class PyramidSection:
    num_scales: int = 4
    min_grid: int = 2
    resize_scale: int = 2
    num_features: int = 8
    time_bins: int = 8
    t_resize_scale: float = 1.0
    init_noise: float = 0.1
    global_precond: float = 1.0
    per_level_precond: float = 1.0
    spectral_precond_K: float = 0.0
    level_sizes: list = None


@dataclass
class FeaturesSection:
    use_coords: bool = True
    rff_features: int = 0
    rff_sigma: float = 1.0


@dataclass
class GridSection:
    Mx: int = 64
    My: int = 0
    Mt: int = 64
    shift_mode: str = "per_slice"
    allow_aliasing: bool = False
    residual_path: str = "fft"
    ic_grid: int = 256


@dataclass
class MlpSection:
    arch: str = "modified_mlp"
    width: int = 256
    depth: int = 4
    activation: str = "tanh"
    weight_fact: bool = True
    fact_mean: float = 1.0
    fact_std: float = 0.1


@dataclass
class TrainingSection:
    max_steps: int = 1000
    log_every: int = 100
    eval_every: int = 0
    checkpoint_every: int = 0
    window_mode: str = "discrete_ic_transfer"
    num_windows: int = 0
    steps_per_window: int = 0


@dataclass
class OptimSection:
    learning_rate: float = 1e-3
    schedule: str = "exponential"
    warmup_steps: int = 0
    decay_steps: int = 2000
    decay_rate: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class WeightingSection:
    scheme: str = "grad_norm"
    init_weights: dict = None
    causal_tol: float = 1.0
    num_chunks: int = 0
    update_every_steps: int = 1000


@dataclass
class BurgersSection:
    c: float = 30.0
    lam: float = 0.5
    tail: bool = True
    linear_term: float = 0.0
    batch_size: int = 2048
    sampler: str = "shifted_grid"


@dataclass
class RunConfig:
    problem: str = "allen_cahn"
    model: str = "beignet"
    seed: int = 0
    out: str = ""
    reference: str = ""
    pyramid: PyramidSection = field(default_factory=PyramidSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    grid: GridSection = field(default_factory=GridSection)
    mlp: MlpSection = field(default_factory=MlpSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    optim: OptimSection = field(default_factory=OptimSection)
    weighting: WeightingSection = field(default_factory=WeightingSection)
    burgers: BurgersSection = field(default_factory=BurgersSection)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        config = _parse_section(cls, data, "")
        if config.model not in ("beignet", "mlp"):
            raise ConfigError(f"model must be 'beignet' or 'mlp', got '{config.model}'")
        return config

    @property
    def output_dir(self):
        return self.out or os.path.join("runs", self.problem)


def _check_type(value, default, path):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string, got {value!r}")
    return value


def _parse_section(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown config key '{prefix}{unknown[0]}'")
    defaults = cls()
    values = {}
    for name, value in data.items():
        path = f"{prefix}{name}"
        default = getattr(defaults, name)
        if is_dataclass(default):
            values[name] = _parse_section(type(default), value, f"{path}.")
        else:
            values[name] = _check_type(value, default, path)
    return cls(**values)


def load_run_config(path):
    """Parse a JSON run config file."""
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)


def save_run_config(path, config):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def build_problem(config):
    """ProblemSpec of the run; the profile problem takes its domain from burgers.c."""
    problem = get_problem(config.problem)
    if problem.kind == "profile":
        problem = replace(problem, domain=profile_domain(config.burgers.c))
    return problem


def pyramid_config(config, spatial_dims):
    return PyramidConfig(spatial_dims=spatial_dims, **asdict(config.pyramid))


def decoder_config(config, output_dim):
    return DecoderConfig(output_dim=output_dim, **asdict(config.mlp))


def build_model(config, problem, seed=None):
    """
    Fresh model for the run

    Returns:
    - BeignetModel / CoordinateNetwork, or a ProfileAnsatz around one for the
      profile problem
    """
    seed = config.seed if seed is None else seed
    time_dependent = problem.kind != "profile"
    dec = decoder_config(config, len(problem.components))
    if config.model == "beignet":
        inner = build_beignet(pyramid_config(config, problem.spatial_dims), dec, problem.domain, seed,
                              use_coords=config.features.use_coords, time_dependent=time_dependent)
    else:
        inner = build_coordinate_network(dec, problem.domain, seed, rff_features=config.features.rff_features,
                                         rff_sigma=config.features.rff_sigma, time_dependent=time_dependent)
    if problem.kind == "profile":
        b = config.burgers
        return ProfileAnsatz(inner, c=b.c, lam=b.lam, tail=b.tail, linear_term=b.linear_term)
    return inner


def to_train_config(config):
    o, g, w, t, b = config.optim, config.grid, config.weighting, config.training, config.burgers
    schedule = ScheduleSpec(kind=o.schedule, learning_rate=o.learning_rate, warmup_steps=o.warmup_steps,
                            decay_steps=o.decay_steps, decay_rate=o.decay_rate, total_steps=t.max_steps)
    return TrainConfig(
        max_steps=t.max_steps, seed=config.seed, Mx=g.Mx, My=g.My, Mt=g.Mt, shift_mode=g.shift_mode,
        allow_aliasing=g.allow_aliasing, residual_path=g.residual_path, schedule=schedule,
        beta1=o.beta1, beta2=o.beta2, eps=o.eps, weighting=w.scheme, init_weights=w.init_weights,
        causal_tol=w.causal_tol, num_chunks=w.num_chunks, update_every_steps=w.update_every_steps,
        ic_grid=g.ic_grid, log_every=t.log_every, eval_every=t.eval_every,
        checkpoint_every=t.checkpoint_every, batch_size=b.batch_size, sampler=b.sampler,
    )


def window_plan(config, problem):
    t = config.training
    return WindowPlan(num_windows=t.num_windows or problem.num_windows,
                      steps_per_window=t.steps_per_window or t.max_steps, transfer=t.window_mode)


@dataclass
class Checkpoint:
    config: RunConfig
    models: list
    edges: np.ndarray
    optimizer: OptimizerState = None
    weighting: WeightingState = None
    rng_state: dict = None
    step: int = 0

    @property
    def model(self):
        return self.models[-1]


def _params_of(model):
    return model.inner.params if isinstance(model, ProfileAnsatz) else model.params


def _apply_params(model, params):
    if isinstance(model, ProfileAnsatz):
        return replace(model, inner=with_params(model.inner, params))
    return with_params(model, params)


def save_checkpoint(path, config, models, optimizer=None, weighting=None, rng_state=None, edges=None):
    """
    Write per-window parameters, the latest optimizer and weighting state and the RNG state

    Parameters:
    - path: destination file
    - config: RunConfig of the run
    - models: list of trained models, one per time window
    - optimizer, weighting, rng_state: state of the most recent window
    - edges: window edges (defaults to a single window over the domain)
    """
    blocks = {}
    for w, model in enumerate(models):
        for name, value in _params_of(model).items():
            blocks[f"window{w}/{name}"] = value
    header = {
        "config": config.to_dict(),
        "windows": len(models),
        "edges": [float(e) for e in (edges if edges is not None else [])],
        "step": optimizer.step if optimizer is not None else 0,
        "rng_state": rng_state,
    }
    if optimizer is not None:
        for name in optimizer.m:
            blocks[f"adam/m/{name}"] = optimizer.m[name]
            blocks[f"adam/v/{name}"] = optimizer.v[name]
        header["optimizer"] = {
            "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
            "schedule": asdict(optimizer.schedule),
        }
    if weighting is not None:
        header["weighting"] = asdict(weighting)
    write_container(path, CHECKPOINT_MAGIC, header, blocks)
    logger.info("Checkpoint written to %s at step %d", path, header["step"])


def load_checkpoint(path):
    """
    Rebuild models and training state from a checkpoint

    Window w > 0 is rebuilt with seed + w, matching train_windows. A checkpoint written
    during a windowed run holds the finished windows and the current one.
    """
    header, blocks = read_container(path, CHECKPOINT_MAGIC)
    try:
        config = RunConfig.from_dict(header["config"])
        num_windows = int(header["windows"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint header ({exc})") from exc

    problem = build_problem(config)
    base = build_model(config, problem)
    edges = np.asarray(header.get("edges") or window_edges(problem, num_windows), dtype=float)[:num_windows + 1]
    models = []
    for w in range(num_windows):
        prefix = f"window{w}/"
        params = {k[len(prefix):]: v for k, v in blocks.items() if k.startswith(prefix)}
        expected = _params_of(base)
        if set(params) != set(expected):
            raise CheckpointError(f"{path}: window {w} parameters do not match the configured model")
        for name, value in params.items():
            if value.shape != np.shape(expected[name]):
                raise CheckpointError(f"{path}: {name} has shape {value.shape}, expected {np.shape(expected[name])}")
        model = base if w == 0 else reinitialize(base, config.seed + w)
        if problem.kind != "profile":
            model = replace(model, domain=problem.domain.window(edges[w], edges[w + 1]))
        models.append(_apply_params(model, params))

    optimizer = None
    if "optimizer" in header:
        meta = header["optimizer"]
        names = [k[len("adam/m/"):] for k in blocks if k.startswith("adam/m/")]
        optimizer = OptimizerState(
            step=int(header["step"]),
            m={n: blocks[f"adam/m/{n}"] for n in names},
            v={n: blocks[f"adam/v/{n}"] for n in names},
            schedule=ScheduleSpec(**meta["schedule"]),
            beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
        )
    weighting = WeightingState(**header["weighting"]) if "weighting" in header else None
    return Checkpoint(config, models, edges, optimizer, weighting, header.get("rng_state"), int(header["step"]))


def run_param_count(config, problem):
    """Trainable parameter count of the configured model, without building it."""
    time_dependent = problem.kind != "profile"
    dec = decoder_config(config, len(problem.components))
    if config.model == "beignet":
        pyr = pyramid_config(config, problem.spatial_dims)
        input_dim = pyr.feature_dim + coordinate_feature_dim(
            problem.spatial_dims, config.features.use_coords, problem.domain.periodic, time_dependent
        )
        return pyramid_param_count(pyr) + decoder_param_count(replace(dec, input_dim=input_dim))
    raw_dim = problem.spatial_dims + (1 if time_dependent else 0)
    input_dim = 2 * config.features.rff_features if config.features.rff_features else raw_dim
    return decoder_param_count(replace(dec, input_dim=input_dim))
