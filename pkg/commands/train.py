"""train: fit a model to a problem and write checkpoint, metrics and report."""
import logging
import os
from dataclasses import dataclass

import pandas as pd

from commands import common
from utils.errors import ConfigError, NumericalError
from utils.run_config import (
    build_model,
    build_problem,
    load_checkpoint,
    save_checkpoint,
    save_run_config,
    to_train_config,
    window_plan,
)
from utils.training import MetricSink, TrainState, train, train_windows, window_edges

logger = logging.getLogger(__name__)


@dataclass
class TrainOutcome:
    report: object
    metrics: pd.DataFrame
    models: list
    edges: object


def run_training(config, reference_override=None, resume_path=None):
    """
    Train one run config end to end

    Writes config.json, metrics.jsonl, checkpoint.spinnckpt and report.csv under
    the run's output directory.

    Returns:
    - TrainOutcome
    """
    out = config.output_dir
    common.attach_run_log(out)
    problem = build_problem(config)
    reference = None
    if problem.kind != "profile":
        reference = common.require_reference(config, problem, reference_override)

    save_run_config(os.path.join(out, "config.json"), config)
    metrics_path = os.path.join(out, common.METRICS_NAME)
    if os.path.exists(metrics_path) and resume_path is None:
        os.remove(metrics_path)
    sink = MetricSink(metrics_path)
    checkpoint_path = os.path.join(out, common.CHECKPOINT_NAME)
    train_config = to_train_config(config)
    evaluate = common.make_evaluator(reference) if reference is not None else None
    ic_axes = reference.axes if reference is not None else None
    plan = window_plan(config, problem)

    def on_checkpoint(state):
        save_checkpoint(checkpoint_path, config, [state.model], state.optimizer, state.weighting, state.rng_state)

    try:
        if plan.num_windows == 1 or problem.kind == "profile":
            resume = None
            if resume_path is not None:
                saved = load_checkpoint(resume_path)
                if len(saved.models) != 1 or saved.optimizer is None:
                    raise ConfigError("only single-window checkpoints with optimizer state can be resumed")
                resume = TrainState(saved.model, saved.optimizer, saved.weighting, saved.rng_state, saved.step)
            model = build_model(config, problem)
            result = train(problem, model, train_config, evaluate=evaluate, sink=sink, resume=resume,
                           on_checkpoint=on_checkpoint, ic_axes=ic_axes)
            models, edges, last = [result.model], window_edges(problem, 1), result
            frame = result.frame()
        else:
            if resume_path is not None:
                raise ConfigError("windowed runs cannot be resumed from a checkpoint")
            edges = window_edges(problem, plan.num_windows)

            def on_window_checkpoint(models, state):
                save_checkpoint(checkpoint_path, config, models, state.optimizer, state.weighting,
                                state.rng_state, edges)

            windows = train_windows(problem, build_model(config, problem), train_config, plan,
                                    evaluate=evaluate, sink=sink, ic_axes=ic_axes,
                                    on_checkpoint=on_window_checkpoint)
            models, edges, last = windows.models, windows.edges, windows.results[-1]
            frame = pd.DataFrame(windows.metrics)
    except NumericalError as exc:
        common.write_poison_dump(out, exc)
        raise

    save_checkpoint(checkpoint_path, config, models, last.optimizer, last.weighting, last.rng_state, edges)
    if problem.kind == "profile":
        report = common.profile_report(models[0], step=last.step)
    else:
        report = common.field_report(problem, models, edges, reference, step=last.step)
    final = frame[frame["final"].fillna(False).astype(bool)] if "final" in frame else frame.iloc[0:0]
    if len(final):
        row = final.iloc[-1]
        report.metrics["final_loss"] = float(row["loss"])
        report.metrics["final_residual_loss"] = float(sum(row[f"loss/{t}"] for t in problem.residual_terms))
    common.write_csv(report.to_frame(), os.path.join(out, common.REPORT_NAME))
    for name, value in report.metrics.items():
        logger.info("%s = %.6e", name, value)
    return TrainOutcome(report, frame, models, edges)


def run(args):
    config = common.resolve_run_config(args)
    run_training(config, reference_override=args.reference, resume_path=args.checkpoint)
    return 0
