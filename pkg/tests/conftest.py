import os

import numpy as np
import pytest
import torch

torch.set_num_threads(int(os.environ.get("ADVNORM_THREADS", "1")))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_CONFIG = os.path.join(ROOT, "configs", "default.json")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_config():
    from advnorm.config import ExperimentConfig

    return ExperimentConfig.load(DEFAULT_CONFIG)


@pytest.fixture(scope="session")
def default_splits(default_config):
    from advnorm.pipeline import build_splits

    return build_splits(default_config)


@pytest.fixture(scope="session")
def small_config(default_config):
    """Default phantoms and hyperparameters with a short training schedule."""
    return default_config.with_train(total_epochs=5)


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    """Default config on two volumes per domain with one joint epoch after pretraining."""
    import json

    with open(DEFAULT_CONFIG) as fh:
        doc = json.load(fh)
    doc["phantom"]["volumes_per_domain"] = 2
    doc["train"]["total_epochs"] = 4
    path = tmp_path_factory.mktemp("configs") / "tiny.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


ACCEPTANCE_RESULTS = {}


def record_acceptance(number, passed, detail):
    """Remember one acceptance-criterion outcome for the end-of-run summary."""
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
