import numpy as np
import pytest

from saa.config import RunConfig
from saa.data import SynthTaskConfig, synth_generate

TINY = {
    "preset": "desk",
    "model.d": 16,
    "model.d_ff": 32,
    "encoder.n": 1,
    "encoder.conv_filters": 4,
    "decoder.k": 1,
    "lm.layers": 1,
    "train.epochs": 2,
    "train.warmup": 10,
    "train.batch_size": 16,
    "lm_train.epochs": 2,
    "joint.epochs": 1,
}


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return RunConfig(dict(TINY))


@pytest.fixture(scope="session")
def tiny_data():
    task = SynthTaskConfig(seed=3)
    return synth_generate(task, 32, "train"), synth_generate(task, 8, "dev")


def config_text(values: dict) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in values.items())


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
