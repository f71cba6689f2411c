"""image-fit: coordinate regression of an image with several model kinds."""
import logging
import os

import pandas as pd

from commands import common
from utils.errors import ConfigError
from utils.image_fit import MODEL_KINDS, fit_image, pattern_image, read_ppm, write_ppm
from utils.problems import render_image

logger = logging.getLogger(__name__)


def run(args):
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in MODEL_KINDS]
    if unknown:
        raise ConfigError(f"Unknown image model kind '{unknown[0]}', expected one of {', '.join(MODEL_KINDS)}")
    out = args.out or os.path.join("runs", "image_fit")
    common.attach_run_log(out)

    image = read_ppm(args.image) if args.image else pattern_image()
    write_ppm(os.path.join(out, "target.ppm"), image)
    seed = 0 if args.seed is None else args.seed

    traces = []
    for kind in kinds:
        model, trace = fit_image(kind, image, steps=args.steps, lr=args.lr, seed=seed)
        traces.append(trace)
        write_ppm(os.path.join(out, f"{kind}.ppm"), render_image(model, image.pixels.shape[:2]))

    table = pd.concat(traces, ignore_index=True) if traces else pd.DataFrame(
        columns=["model", "step", "psnr", "param_count"])
    common.write_csv(table, os.path.join(out, "psnr_trace.csv"))
    if len(table):
        summary = table.sort_values("step").groupby("model", sort=False).tail(1)
        common.write_csv(summary.reset_index(drop=True), os.path.join(out, "summary.csv"))
    return 0
