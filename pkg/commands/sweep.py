"""sweep: train a list of config variants and tabulate their final errors."""
import copy
import json
import logging
import os
from dataclasses import replace

import pandas as pd

from commands import common
from commands.train import run_training
from utils.errors import ConfigError
from utils.run_config import RunConfig, build_problem, load_run_config, run_param_count

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["name", "num_scales", "num_features", "param_count", "rel_l2", "residual_loss", "status"]
SPEC_KEYS = {"base", "points", "target_params", "reference", "out", "max_features"}


def load_sweep_spec(path):
    """
    Read a sweep spec

    Keys: base (run config path or object), points (list of dotted-key override
    objects, each optionally named), target_params (match this parameter count by
    choosing pyramid.num_features), reference, out, max_features.
    """
    with open(path, encoding="utf-8") as f:
        try:
            spec = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    unknown = sorted(set(spec) - SPEC_KEYS)
    if unknown:
        raise ConfigError(f"Unknown sweep key '{unknown[0]}'")
    if "base" not in spec:
        raise ConfigError("sweep spec needs a 'base' run config")
    return spec


def apply_overrides(data, overrides):
    """Copy of a config dict with dotted-key overrides applied."""
    data = copy.deepcopy(data)
    for key, value in overrides.items():
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"Unknown config key '{key}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"Unknown config key '{key}'")
        node[parts[-1]] = value
    return data


def match_num_features(config, problem, target, max_features=256):
    """
    Features per level whose total parameter count is closest to target

    Returns:
    - (num_features, param_count), num_features None when nothing is within 10%
    """
    best = None
    for d in range(1, max_features + 1):
        candidate = replace(config, pyramid=replace(config.pyramid, num_features=d))
        count = run_param_count(candidate, problem)
        if best is None or abs(count - target) < abs(best[1] - target):
            best = (d, count)
    if abs(best[1] - target) > 0.1 * target:
        return None, best[1]
    return best


def run_sweep(spec, out_dir, reference_override=None, seed=None):
    """
    Returns:
    - DataFrame with one row per point (an empty table keeps the header)
    """
    base = spec["base"]
    base_dict = load_run_config(base).to_dict() if isinstance(base, str) else RunConfig.from_dict(base).to_dict()
    if seed is not None:
        base_dict["seed"] = seed
    reference = reference_override or spec.get("reference")
    target = int(spec.get("target_params") or 0)
    rows = []
    for index, point in enumerate(spec.get("points", [])):
        point = dict(point)
        name = str(point.pop("name", f"point{index}"))
        config = RunConfig.from_dict(apply_overrides(base_dict, point))
        config.out = os.path.join(out_dir, name)
        problem = build_problem(config)

        if target and "pyramid.num_features" not in point:
            features, count = match_num_features(config, problem, target, int(spec.get("max_features", 256)))
            if features is None:
                logger.warning("Sweep point %s: no num_features within 10%% of %d parameters", name, target)
                rows.append({"name": name, "num_scales": config.pyramid.num_scales, "num_features": None,
                             "param_count": count, "rel_l2": None, "residual_loss": None,
                             "status": "skipped: no parameter match"})
                continue
            config = replace(config, pyramid=replace(config.pyramid, num_features=features))

        outcome = run_training(config, reference_override=reference)
        metrics = outcome.report.metrics
        rows.append({
            "name": name,
            "num_scales": config.pyramid.num_scales,
            "num_features": config.pyramid.num_features,
            "param_count": run_param_count(config, problem),
            "rel_l2": metrics.get("rel_l2", metrics.get("pde_mse")),
            "residual_loss": metrics.get("final_residual_loss"),
            "status": "ok",
        })
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def run(args):
    spec = load_sweep_spec(args.config)
    out = args.out or spec.get("out") or os.path.join("runs", "sweep")
    common.attach_run_log(out)
    table = run_sweep(spec, out, args.reference, args.seed)
    common.write_csv(table, os.path.join(out, "sweep.csv"))
    return 0
