import numpy as np
import pytest

from cimer.expert import generate_dataset
from cimer.koopman import LiftingSpec, fit_koopman
from cimer.planar_env import EnvConfig


@pytest.fixture(scope="session")
def env_config():
    return EnvConfig()


@pytest.fixture(scope="session")
def expert_stack(env_config):
    """200 expert demonstrations and the motion prior fitted on them."""
    dataset, ok = generate_dataset(env_config, [[0, 100, k] for k in range(200)])
    model = fit_koopman(dataset, LiftingSpec(5, 4, 2))
    return dataset, model, ok


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
