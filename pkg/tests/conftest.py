import numpy as np
import pytest

from multicos import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def clean_tape():
    T.TAPE.clear()
    T.TAPE.active = True
    yield
    T.TAPE.clear()
