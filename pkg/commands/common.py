"""
Helpers shared by the command modules: config resolution, reference loading,
evaluation callbacks and artifact writing.
"""
import json
import logging
import os

import numpy as np

from utils.diagnostics import MetricReport, burgers_report, relative_l2
from utils.errors import ShapeError
from utils.file_formats import atomic_write_bytes
from utils.problems import load_reference
from utils.run_config import load_run_config
from utils.training import predict, stitched_eval

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.spinnckpt"
METRICS_NAME = "metrics.jsonl"
REPORT_NAME = "report.csv"
REFERENCE_DIR = "references"


def resolve_run_config(args):
    """Load --config and apply the --seed and --out overrides."""
    config = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "out", None):
        config.out = args.out
    return config


def attach_run_log(out_dir):
    """Mirror log records, with timestamps, into <out>/run.log."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.abspath(os.path.join(out_dir, "run.log"))
    root = logging.getLogger()
    for handler in root.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == path:
            return
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)


def reference_path(config, problem, override=None):
    return override or config.reference or os.path.join(REFERENCE_DIR, problem.reference_file)


def require_reference(config, problem, override=None):
    """Load the reference of a time-dependent problem, naming the expected path when it is missing."""
    path = reference_path(config, problem, override)
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"Reference file not found: {path} (create it with 'make-reference --problem {problem.name}')"
        )
    reference = load_reference(path)
    if tuple(reference.components) != tuple(problem.components):
        raise ShapeError(
            f"reference components {reference.components} do not match problem components {problem.components}"
        )
    return reference


def window_times(reference, domain):
    """Reference time indices inside a model's time window."""
    tol = 1e-12 * max(1.0, abs(domain.t_upper))
    return np.flatnonzero((reference.times >= domain.t_lower - tol) & (reference.times <= domain.t_upper + tol))


def make_evaluator(reference):
    """Relative L2 error per component, restricted to the model's time window."""
    def evaluate(model, problem):
        index = window_times(reference, model.domain)
        if not len(index):
            return {}
        times = np.clip(reference.times[index], model.domain.t_lower, model.domain.t_upper)
        prediction = predict(model, reference.axes, times)
        target = reference.stacked()[index]
        errors = relative_l2(prediction, target, component_axis=-1)
        return {f"rel_l2/{name}": float(e) for name, e in zip(problem.components, errors)}
    return evaluate


def field_report(problem, models, edges, reference, step=0):
    """
    Relative L2 over the whole reference grid, overall and per component

    Returns:
    - MetricReport
    """
    if models[0].output_dim != len(reference.components):
        raise ShapeError(
            f"model has {models[0].output_dim} outputs but the reference has {len(reference.components)} components"
        )
    prediction = stitched_eval(models, edges, reference.axes, reference.times)
    target = reference.stacked()
    metrics = {"rel_l2": relative_l2(prediction, target)}
    for name, error in zip(problem.components, relative_l2(prediction, target, component_axis=-1)):
        metrics[f"rel_l2/{name}"] = float(error)
    grid = "x".join(str(len(a)) for a in reference.axes) + f"x{len(reference.times)}"
    return MetricReport(metrics, grid=grid, step=step)


def profile_report(ansatz, step=0):
    pde_mse, log_max = burgers_report(ansatz)
    return MetricReport({"pde_mse": pde_mse, "log10_max_residual": log_max}, grid="centered1000", step=step)


def write_csv(frame, path):
    atomic_write_bytes(path, frame.to_csv(index=False).encode("utf-8"))
    logger.info("Wrote %s (%d rows)", path, len(frame))


def write_json(path, payload):
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n").encode("utf-8"))


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def write_poison_dump(out_dir, exc):
    """Diagnostic dump of a numerical failure, <out>/poisoned_step.json."""
    payload = {"error": type(exc).__name__, "message": str(exc)}
    payload.update(getattr(exc, "dump", {}) or {})
    if getattr(exc, "node_index", None) is not None:
        payload["node_index"] = exc.node_index
        payload["opcode"] = exc.opcode
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "poisoned_step.json"), payload)
