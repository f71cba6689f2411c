"""make-reference: integrate a benchmark with the built-in ETDRK4 solver and save it."""
import logging
import os

from commands import common
from utils.errors import ConfigError
from utils.problems import generate_reference, get_problem, save_reference

logger = logging.getLogger(__name__)


def run(args):
    problem = get_problem(args.problem)
    if problem.spatial_dims == 2 and args.resolution and args.resolution > 128:
        raise ConfigError(f"{problem.name} references are generated on grids up to 128 x 128")
    options = {}
    if args.resolution:
        options["n"] = args.resolution
    if args.num_times:
        options["num_times"] = args.num_times
    if args.dt:
        options["dt"] = args.dt
    path = args.out or os.path.join(common.REFERENCE_DIR, problem.reference_file)
    reference = generate_reference(problem.name, **options)
    save_reference(path, reference)
    shape = reference.stacked().shape
    logger.info("Reference for %s written to %s with shape %s", problem.name, path, shape)
    return 0
