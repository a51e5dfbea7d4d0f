import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dentalmesh.synth import ArchSpec, generate


@pytest.fixture(scope="session")
def small_arch():
    """One synthetic arch at the coarsest legal resolution."""
    return generate(ArchSpec(target_cells=4500, seed=3))


@pytest.fixture(scope="session")
def bump_fixture():
    from helpers import bump_scene

    return bump_scene(n=12, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
