import pytest

from pieprune.model import ModelConfig, build_model
from pieprune.tasks import generate_ioi_like, generate_random_pairs


@pytest.fixture(scope="session")
def default_model():
    return build_model(ModelConfig())


@pytest.fixture(scope="session")
def ioi32():
    return generate_ioi_like(32, 0, 32)


@pytest.fixture(scope="session")
def small_relu():
    return build_model(ModelConfig(n_layers=2, d_model=8, n_features=16, vocab_size=16, density=0.1, seed=1))


@pytest.fixture(scope="session")
def small_linear():
    return build_model(
        ModelConfig(n_layers=2, d_model=8, n_features=16, vocab_size=16, activation="identity", seed=1)
    )


@pytest.fixture(scope="session")
def small_pairs():
    return generate_random_pairs(8, 1, 16)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("AC")[1].split()[0])):
            terminalreporter.write_line(line)
