import pytest

from fedboost import paillier


@pytest.fixture(scope="session")
def key128():
    return paillier.keygen(128, seed=1234)


@pytest.fixture(scope="session")
def key64():
    return paillier.keygen(64, seed=99)
