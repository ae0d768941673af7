import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fklab.geometry import halfplane_domain, koch_prefractal, line_boundary


@pytest.fixture(scope="session")
def koch3():
    return koch_prefractal(3)


@pytest.fixture(scope="session")
def koch4():
    return koch_prefractal(4)


@pytest.fixture(scope="session")
def line():
    return line_boundary(10.0)


@pytest.fixture(scope="session")
def halfplane():
    return halfplane_domain()
