import numpy as np
import pytest

from npsm.config import RunConfig
from npsm.data import generate
from npsm.model import Model

# (criterion, verdict, detail) lines collected by test_acceptance.py
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, verdict, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}")


def small_cfg(**kw) -> RunConfig:
    base = dict(K=3, D=2, C=3, T_max=3, n_stages=2, dtype="float64", mlp_hidden=4)
    base.update(kw)
    return RunConfig(**base)


def small_model(seed=0, n_id=3, **kw) -> Model:
    return Model.init(small_cfg(seed=seed, **kw), n_id)


@pytest.fixture(scope="session")
def tiny_ds():
    return generate(seed=3, n_scenes=24, n_identities=3, image_size=64,
                    person_width=(10, 16), person_height=(20, 30))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
