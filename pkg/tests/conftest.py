import sys
from pathlib import Path

import numpy as np
import pytest

from sphax import backend

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=[name for name, ok in sorted(backend.available().items())
                        if ok])
def kernels(request):
    """Run a test once per importable kernel backend."""
    previous = backend.active().NAME
    yield backend.use(request.param)
    backend.use(previous)


@pytest.fixture
def compiled_only():
    if not backend.available().get("compiled"):
        pytest.skip("compiled kernel backend not built")
    previous = backend.active().NAME
    yield backend.use("compiled")
    backend.use(previous)
