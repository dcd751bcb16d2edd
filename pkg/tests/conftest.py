from __future__ import annotations

import numpy as np
import pytest

from nnmpc import plant
from nnmpc.config import ExperimentConfig
from nnmpc.experiment import generate_dataset, run_pipeline, train_model
from nnmpc.narx import NarxModel, RegressorSpec, init_model

# Filled by tests/test_acceptance.py, printed after the run.
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def random_model(rng, spec=RegressorSpec(), hidden=7, scaled=True, weight_range=1.0) -> NarxModel:
    """Random network with a scaling roughly matching reactor signals."""
    if scaled:
        in_scale = np.array(
            [[12.0, 0.25]] * spec.ny + [[0.15, 6.0]] * spec.nu
        ) + rng.uniform(-0.05, 0.05, (spec.width, 2))
        out_scale = (12.0 + rng.uniform(-1, 1), 0.25 + rng.uniform(-0.05, 0.05))
    else:
        in_scale, out_scale = None, (0.0, 1.0)
    return init_model(spec, hidden, rng, in_scale, out_scale, weight_range)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_config() -> ExperimentConfig:
    return ExperimentConfig()


@pytest.fixture(scope="session")
def default_dataset(default_config):
    return generate_dataset(default_config)


@pytest.fixture(scope="session")
def trained_model(default_config, default_dataset):
    model, _ = train_model(default_config, default_dataset)
    return model


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory, default_config):
    out = tmp_path_factory.mktemp("pipeline")
    result = run_pipeline(default_config, out, solver_trace=True)
    return result, out


@pytest.fixture(scope="session")
def ss01():
    return plant.steady_state(0.1)
