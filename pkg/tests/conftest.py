import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sgexpress import config as cfg
from sgexpress.diagnostics import gradcheck_config
from sgexpress.model import SceneGraphVLM

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY_DATA = {"caption": 24, "relation": 42, "count": 20, "test_relation": 21, "test_count": 10, "test_caption": 8}
TINY_STAGES = {"1": {"steps": 2, "batch_size": 4}, "2": {"steps": 2, "batch_size": 4},
               "3": {"steps": 2, "batch_size": 4}}


def tiny_config(**flags) -> dict:
    """Small model and data sizes; every stage runs two steps."""
    config = gradcheck_config()
    cfg._merge(config, {"scene": {"size_range": [2, 4], "border": 1}, "data": TINY_DATA, "stages": TINY_STAGES,
                        "seeds": [0, 1], "flags": flags})
    cfg.validate(config)
    return config


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny):
    return SceneGraphVLM(cfg.model_config(tiny))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS):
            terminalreporter.write_line(line)
