"""diagnose: error spectra, modal tangent sweeps, profile reports, stiffness and throughput tables."""
import logging
import os

import numpy as np
import pandas as pd

from commands import common
from utils.diagnostics import (
    error_spectrum,
    kdv_stiffness_sweep,
    modal_sweep,
    residual_path_throughput,
    throughput_frame,
    top_mode,
)
from utils.errors import ConfigError
from utils.run_config import (
    build_model,
    build_problem,
    decoder_config,
    load_checkpoint,
    pyramid_config,
    to_train_config,
)
from utils.training import stitched_eval

logger = logging.getLogger(__name__)

MODES = ("spectrum", "modal", "burgers", "stiffness", "throughput")


def spectrum_table(checkpoint, reference):
    """Binned error spectrum per component of a 1-D run."""
    problem = build_problem(checkpoint.config)
    if problem.spatial_dims != 1:
        raise ConfigError("error spectra are computed for 1-D problems")
    prediction = stitched_eval(checkpoint.models, checkpoint.edges, reference.axes, reference.times)
    target = reference.stacked()
    frames = []
    for i, name in enumerate(problem.components):
        frame = error_spectrum(prediction[..., i], target[..., i]).to_frame()
        frame.insert(0, "component", name)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def modal_table(checkpoint):
    """Output and operator-composed modal energies at powers of two up to the top pyramid mode."""
    model = checkpoint.models[0]
    if checkpoint.config.model == "beignet":
        highest = top_mode(model.pyramid.config)
    else:
        highest = 64
    wavenumbers = [2 ** j for j in range(int(np.log2(highest)) + 1)]
    grid = 4 * highest
    return pd.concat([modal_sweep(model, wavenumbers, variant, grid_size=grid) for variant in ("output", "operator")],
                     ignore_index=True)


def run(args):
    mode = args.mode
    if mode not in MODES:
        raise ConfigError(f"Unknown diagnose mode '{mode}', expected one of {', '.join(MODES)}")

    if mode in ("stiffness", "throughput"):
        if not args.config:
            raise ConfigError(f"diagnose --mode {mode} needs --config")
        config = common.resolve_run_config(args)
        out = config.output_dir
        common.attach_run_log(out)
        if mode == "stiffness":
            pyr = pyramid_config(config, 1)
            table = kdv_stiffness_sweep(pyr, decoder_config(config, 1), seed=config.seed, Mt=config.grid.Mt)
        else:
            problem = build_problem(config)
            rates = residual_path_throughput(problem, build_model(config, problem), to_train_config(config),
                                             steps=args.steps)
            table = throughput_frame(rates)
        common.write_csv(table, os.path.join(out, f"{mode}.csv"))
        return 0

    if not args.checkpoint:
        raise ConfigError(f"diagnose --mode {mode} needs --checkpoint")
    checkpoint = load_checkpoint(args.checkpoint)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    common.attach_run_log(out)
    problem = build_problem(checkpoint.config)
    if mode == "burgers":
        if problem.kind != "profile":
            raise ConfigError("diagnose --mode burgers needs a burgers_profile checkpoint")
        table = common.profile_report(checkpoint.model, step=checkpoint.step).to_frame()
    elif mode == "spectrum":
        reference = common.require_reference(checkpoint.config, problem, args.reference)
        table = spectrum_table(checkpoint, reference)
    else:
        table = modal_table(checkpoint)
    common.write_csv(table, os.path.join(out, f"{mode}.csv"))
    return 0
