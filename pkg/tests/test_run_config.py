import glob
import os
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils.errors import CheckpointError, ConfigError
from utils.field_model import ProfileAnsatz, reinitialize
from utils.problems import save_reference, generate_reference
from utils.run_config import (
    RunConfig,
    build_model,
    build_problem,
    load_checkpoint,
    load_run_config,
    run_param_count,
    save_checkpoint,
    save_run_config,
    to_train_config,
    window_plan,
)
from utils.training import init_optimizer, init_weighting

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
RUN_CONFIGS = sorted(p for p in glob.glob(os.path.join(CONFIG_DIR, "*.json"))
                     if not os.path.basename(p).startswith("sweep_"))


def _params(model):
    return model.inner.params if isinstance(model, ProfileAnsatz) else model.params


class TestParsing:
    def test_round_trip_is_a_fixed_point(self, tiny_run_config, tmp_path):
        assert RunConfig.from_dict(tiny_run_config.to_dict()) == tiny_run_config
        path = str(tmp_path / "config.json")
        save_run_config(path, tiny_run_config)
        assert load_run_config(path) == tiny_run_config

    def test_defaults_fill_missing_sections(self):
        config = RunConfig.from_dict({"problem": "kdv"})
        assert config.pyramid.num_scales == 4
        assert config.output_dir == os.path.join("runs", "kdv")

    def test_unknown_key_names_its_path(self, tiny_run_data):
        tiny_run_data["pyramid"]["num_scale"] = 3
        with pytest.raises(ConfigError, match="pyramid.num_scale"):
            RunConfig.from_dict(tiny_run_data)

    @pytest.mark.parametrize("data, path", [
        ({"seed": "zero"}, "seed"),
        ({"training": {"max_steps": 1.5}}, "training.max_steps"),
        ({"training": {"max_steps": True}}, "training.max_steps"),
        ({"grid": {"allow_aliasing": 1}}, "grid.allow_aliasing"),
        ({"optim": {"learning_rate": "fast"}}, "optim.learning_rate"),
        ({"mlp": 3}, "mlp"),
    ])
    def test_type_errors(self, data, path):
        with pytest.raises(ConfigError, match=path):
            RunConfig.from_dict(data)

    def test_integers_are_accepted_as_floats(self):
        config = RunConfig.from_dict({"optim": {"learning_rate": 1}})
        assert isinstance(config.optim.learning_rate, float)

    def test_unknown_model(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"model": "cnn"})

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{\"problem\": ")
        with pytest.raises(ConfigError):
            load_run_config(str(path))


@pytest.mark.parametrize("path", RUN_CONFIGS, ids=os.path.basename)
def test_shipped_configs_load(path):
    config = load_run_config(path)
    problem = build_problem(config)
    train_config = to_train_config(config)
    assert train_config.max_steps == config.training.max_steps
    init_weighting(problem, train_config)
    plan = window_plan(config, problem)
    assert plan.num_windows >= 1
    assert run_param_count(config, problem) > 0


def test_shipped_config_set():
    names = {os.path.basename(p) for p in RUN_CONFIGS}
    assert {"allen_cahn.json", "kdv.json", "ginzburg_landau.json", "gray_scott.json",
            "burgers_beignet.json", "burgers_mlp.json"} <= names


@pytest.mark.parametrize("overrides", [
    {},
    {"model": "mlp"},
    {"model": "mlp", "features": {"rff_features": 4}},
    {"features": {"use_coords": False}},
])
def test_param_count_matches_built_model(tiny_run_data, overrides):
    tiny_run_data.update(overrides)
    config = RunConfig.from_dict(tiny_run_data)
    problem = build_problem(config)
    model = build_model(config, problem)
    assert run_param_count(config, problem) == sum(np.size(v) for v in model.params.values())


def test_profile_model_and_count():
    config = RunConfig.from_dict({
        "problem": "burgers_profile",
        "pyramid": {"num_scales": 3, "num_features": 2, "time_bins": 0},
        "features": {"use_coords": False},
        "mlp": {"arch": "vanilla_mlp", "width": 4, "depth": 2, "weight_fact": False},
        "burgers": {"c": 10.0, "batch_size": 8},
    })
    problem = build_problem(config)
    assert problem.domain.upper == (10.0,)
    model = build_model(config, problem)
    assert isinstance(model, ProfileAnsatz)
    assert model.c == 10.0
    assert run_param_count(config, problem) == sum(np.size(v) for v in _params(model).values())


class TestCheckpoints:
    def test_round_trip(self, tiny_run_config, tmp_path):
        problem = build_problem(tiny_run_config)
        model = build_model(tiny_run_config, problem)
        train_config = to_train_config(tiny_run_config)
        optimizer = replace(init_optimizer(model.params, train_config.schedule), step=7)
        optimizer.m["pyramid/level0"] += 0.5
        weighting = replace(init_weighting(problem, train_config), weights={"ics": 3.0, "res": 0.25})
        rng_state = np.random.default_rng(11).bit_generator.state
        path = str(tmp_path / "checkpoint.spinnckpt")
        save_checkpoint(path, tiny_run_config, [model], optimizer, weighting, rng_state)

        loaded = load_checkpoint(path)
        assert loaded.config == tiny_run_config
        assert loaded.step == 7
        assert loaded.rng_state == rng_state
        assert loaded.weighting == weighting
        assert loaded.optimizer.schedule == optimizer.schedule
        assert_allclose(loaded.optimizer.m["pyramid/level0"], optimizer.m["pyramid/level0"])
        for name, value in model.params.items():
            assert np.array_equal(loaded.model.params[name], value)
        assert_allclose(loaded.edges, [0.0, 1.0])

    def test_windows(self, tiny_run_config, tmp_path):
        problem = build_problem(tiny_run_config)
        first = build_model(tiny_run_config, problem)
        second = replace(reinitialize(first, tiny_run_config.seed + 1), domain=problem.domain.window(0.5, 1.0))
        path = str(tmp_path / "checkpoint.spinnckpt")
        save_checkpoint(path, tiny_run_config, [first, second], edges=[0.0, 0.5, 1.0])

        loaded = load_checkpoint(path)
        assert len(loaded.models) == 2
        assert loaded.optimizer is None and loaded.weighting is None
        assert loaded.models[0].domain.t_upper == 0.5
        assert loaded.models[1].domain.t_lower == 0.5
        for name, value in second.params.items():
            assert np.array_equal(loaded.models[1].params[name], value)

    def test_partial_window_run(self, tiny_run_config, tmp_path):
        problem = build_problem(tiny_run_config)
        first = replace(build_model(tiny_run_config, problem), domain=problem.domain.window(0.0, 0.5))
        path = str(tmp_path / "checkpoint.spinnckpt")
        save_checkpoint(path, tiny_run_config, [first], edges=[0.0, 0.5, 1.0])

        loaded = load_checkpoint(path)
        assert len(loaded.models) == 1
        assert_allclose(loaded.edges, [0.0, 0.5])
        assert loaded.model.domain.t_upper == 0.5

    def test_corruption(self, tiny_run_config, tmp_path):
        problem = build_problem(tiny_run_config)
        path = tmp_path / "checkpoint.spinnckpt"
        save_checkpoint(str(path), tiny_run_config, [build_model(tiny_run_config, problem)])
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0x10
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_reference_is_not_a_checkpoint(self, tmp_path):
        path = str(tmp_path / "ref.spinnref")
        save_reference(path, generate_reference("allen_cahn", n=16, num_times=2, dt=1e-2))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_mismatched_architecture(self, tiny_run_config, tmp_path):
        problem = build_problem(tiny_run_config)
        other = replace(tiny_run_config, pyramid=replace(tiny_run_config.pyramid, num_features=3))
        path = str(tmp_path / "checkpoint.spinnckpt")
        save_checkpoint(path, tiny_run_config, [build_model(other, problem)])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
