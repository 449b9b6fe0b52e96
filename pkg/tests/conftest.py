import pytest
from arwaves.lattice import LatticeSet, enumerate
from arwaves.surface import Surface, make_surface


@pytest.fixture(scope="session")
def lattice1() -> LatticeSet:
    return enumerate(1)


@pytest.fixture(scope="session")
def lattice3() -> LatticeSet:
    return enumerate(3)


@pytest.fixture(scope="session")
def lattice11() -> LatticeSet:
    return enumerate(11)


@pytest.fixture(scope="session")
def sphere() -> Surface:
    return make_surface("sphere:0.2")


@pytest.fixture(scope="session")
def monge() -> Surface:
    return make_surface("monge:0.5")


@pytest.fixture(scope="session")
def plane() -> Surface:
    return make_surface("plane:0.3")
