import os

# numba fixes its thread pool size at import; ask for more threads than this
# machine may have so worker-count invariance is exercised everywhere.
os.environ.setdefault("NUMBA_NUM_THREADS", "4")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from srukit import get_workers, set_workers  # noqa: E402
from srukit.init_calib import init_layer  # noqa: E402
from srukit.layer import SruLayerConfig  # noqa: E402
from srukit.tensor_core import SeededRng  # noqa: E402


@pytest.fixture(autouse=True)
def _restore_workers():
    before = get_workers()
    yield
    set_workers(before)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_layer(seed=0, **kw):
    """Config, parameter list and a matching random input for quick tests."""
    L = kw.pop("L", 5)
    B = kw.pop("B", 3)
    kw.setdefault("d_in", 4)
    kw.setdefault("d_out", 4)
    cfg = SruLayerConfig(**kw)
    p = init_layer(cfg, SeededRng(seed))
    plist = [p] if cfg.dirs == 1 else list(p)
    g = np.random.default_rng(seed + 1000)
    x = g.standard_normal((L, B, cfg.d_in))
    return cfg, plist, x
