import pytest

from msfm.synthdata import GeneratorConfig, generate_dataset
from msfm.trainer import TrainConfig, train

SHORT = TrainConfig(epochs=4, decay_epochs=(3,), hidden_dim=16, eval_every_epoch=False)


@pytest.fixture(scope="session")
def small_train():
    return generate_dataset(GeneratorConfig.occluder_heavy(), 40, 101)


@pytest.fixture(scope="session")
def small_val():
    return generate_dataset(GeneratorConfig.occluder_heavy(), 15, 202)


@pytest.fixture(scope="session")
def short_history(small_train):
    return train(small_train, SHORT)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
