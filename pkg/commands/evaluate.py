"""eval: metric report of a checkpoint against its reference."""
import logging
import os

from commands import common
from utils.run_config import build_problem, load_checkpoint

logger = logging.getLogger(__name__)


def evaluate_checkpoint(checkpoint_path, reference_override=None):
    """
    Returns:
    - MetricReport (relative L2 overall and per component, or the profile metrics)
    """
    checkpoint = load_checkpoint(checkpoint_path)
    problem = build_problem(checkpoint.config)
    if problem.kind == "profile":
        return common.profile_report(checkpoint.model, step=checkpoint.step)
    reference = common.require_reference(checkpoint.config, problem, reference_override)
    return common.field_report(problem, checkpoint.models, checkpoint.edges, reference, step=checkpoint.step)


def run(args):
    report = evaluate_checkpoint(args.checkpoint, args.reference)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    common.attach_run_log(out)
    common.write_csv(report.to_frame(), os.path.join(out, "eval_report.csv"))
    for name, value in report.metrics.items():
        logger.info("%s = %.6e", name, value)
    return 0
