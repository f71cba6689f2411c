import logging

import numpy as np
import pytest

from utils.decoder import DecoderConfig
from utils.field_model import build_beignet
from utils.problems import generate_reference, get_problem, save_reference
from utils.pyramid import PyramidConfig, set_worker_threads
from utils.run_config import RunConfig
from utils.training import ScheduleSpec, TrainConfig


@pytest.fixture(autouse=True)
def _single_thread():
    set_worker_threads(1)
    yield
    set_worker_threads(1)


@pytest.fixture(autouse=True)
def _detach_file_handlers():
    """Drop run.log handlers that command tests attach to the root logger."""
    root = logging.getLogger()
    before = list(root.handlers)
    yield
    for handler in list(root.handlers):
        if handler not in before:
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_pyramid():
    return PyramidConfig(num_scales=2, spatial_dims=1, min_grid=4, num_features=2, time_bins=2,
                         global_precond=10.0, init_noise=0.1)


@pytest.fixture
def tiny_decoder():
    return DecoderConfig(arch="modified_mlp", width=8, depth=2, activation="tanh",
                         weight_fact=True, fact_mean=1.0, fact_std=0.1)


@pytest.fixture
def allen_cahn():
    return get_problem("allen_cahn")


@pytest.fixture
def tiny_model(tiny_pyramid, tiny_decoder, allen_cahn):
    return build_beignet(tiny_pyramid, tiny_decoder, allen_cahn.domain, seed=0)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(max_steps=3, seed=0, Mx=8, Mt=8, num_chunks=4, ic_grid=16, log_every=1,
                       update_every_steps=2, schedule=ScheduleSpec(learning_rate=1e-3))


@pytest.fixture
def tiny_run_data(tmp_path, ac_reference_path):
    """Smallest Allen-Cahn run config, as a plain dict."""
    return {
        "problem": "allen_cahn",
        "model": "beignet",
        "seed": 0,
        "out": str(tmp_path / "run"),
        "reference": str(ac_reference_path),
        "pyramid": {"num_scales": 2, "num_features": 2, "min_grid": 4, "time_bins": 2, "global_precond": 10.0},
        "grid": {"Mx": 8, "Mt": 8, "ic_grid": 16},
        "mlp": {"width": 8, "depth": 2},
        "training": {"max_steps": 4, "log_every": 2},
        "weighting": {"num_chunks": 4, "update_every_steps": 2},
    }


@pytest.fixture
def tiny_run_config(tiny_run_data):
    return RunConfig.from_dict(tiny_run_data)


@pytest.fixture(scope="session")
def ac_reference_path(tmp_path_factory):
    """Coarse Allen-Cahn reference shared by the end-to-end tests."""
    path = tmp_path_factory.mktemp("references") / "allen_cahn.spinnref"
    save_reference(str(path), generate_reference("allen_cahn", n=64, num_times=11, dt=1e-3))
    return path
