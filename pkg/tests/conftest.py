import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from manip_recal.kinematics import wam7  # noqa: E402


@pytest.fixture(scope="session")
def wam():
    return wam7()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
