import numpy as np
import pytest
import torch

from ullava.data.synthetic import make_corpus
from ullava.model import ModelConfig, ULlava

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def res_corpus():
    return make_corpus("res+rec", 3, seed=11)


@pytest.fixture
def toy_model(res_corpus):
    samples, _ = res_corpus
    return ULlava.for_samples(ModelConfig(), samples)
