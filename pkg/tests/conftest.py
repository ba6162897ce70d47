import numpy as np
import pytest

from compbalance.attention import TokenSequence
from compbalance.conditions import Box, Layout
from compbalance.schedule import NoiseSchedule

PROMPT = "a red cube and a blue ball"


@pytest.fixture
def sched():
    return NoiseSchedule.linear()


@pytest.fixture
def tokens():
    return TokenSequence.from_prompt(PROMPT, objects=["cube", "ball"])


@pytest.fixture
def two_box_layout(tokens):
    cube, ball = tokens.object_token_indices
    return Layout((Box(0.05, 0.05, 0.45, 0.95, cube, "cube"), Box(0.55, 0.05, 0.95, 0.95, ball, "ball")))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def custom_schedule(*alpha_bar, sigma=None):
    ab = np.array((1.0,) + tuple(alpha_bar))
    return NoiseSchedule(ab, np.zeros_like(ab) if sigma is None else np.array((0.0,) + tuple(sigma)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
