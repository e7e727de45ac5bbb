import pytest
import torch
from hypothesis import settings

from streetfield.synthetic import SyntheticConfig, generate_synthetic_scene

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_scene():
    """16x16, 4 views: cheap enough for smoke runs."""
    return generate_synthetic_scene(SyntheticConfig(width=16, height=16, num_views=4), seed=3)


@pytest.fixture(scope="session")
def small_scene():
    return generate_synthetic_scene(SyntheticConfig(width=32, height=32, num_views=9), seed=1)


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one verdict line per acceptance criterion for the summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
