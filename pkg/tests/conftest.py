import pytest

from rwf.numerics import RngStream


@pytest.fixture
def rng():
    return RngStream(1234)
