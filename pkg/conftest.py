import pytest

from capacity import CapacityCache
from grid import Grid
from kernels import KernelKind, KernelSpec
from settings import configure_logging

configure_logging(console=False, send=False)


@pytest.fixture(scope="session")
def grid1d() -> Grid:
    # h = 1/8, fine enough for the unit-ball cover
    return Grid(dim=1, N=64, L=4.0)


@pytest.fixture(scope="session")
def grid2d() -> Grid:
    return Grid(dim=2, N=32, L=4.0)


@pytest.fixture(scope="session")
def bessel1d() -> KernelSpec:
    return KernelSpec(kind=KernelKind.BESSEL, alpha=0.5, dim=1)


@pytest.fixture(scope="session")
def riesz1d() -> KernelSpec:
    return KernelSpec(kind=KernelKind.RIESZ, alpha=0.25, dim=1)


@pytest.fixture(scope="session")
def bessel2d() -> KernelSpec:
    return KernelSpec(kind=KernelKind.BESSEL, alpha=1.0, dim=2)


@pytest.fixture(scope="session")
def shared_cache() -> CapacityCache:
    return CapacityCache()
