import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tinylm.tokenizer import load_tokenizer


@pytest.fixture(scope="session")
def tok():
    return load_tokenizer()


@pytest.fixture(scope="session")
def fixtures_dir():
    return Path(__file__).parent.parent / "fixtures"


def make_tiny_weights(cfg, seed=0, dtype=np.float64, scale=1.0):
    """Random weights (not the shipped init) for numeric checks; f64 keeps
    finite-difference noise negligible."""
    from tinylm.model import tensor_shapes

    rng = np.random.default_rng(seed)
    w = {}
    for name, shape in tensor_shapes(cfg).items():
        if name.endswith(".g"):
            w[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith(".b") and len(shape) == 1:
            w[name] = 0.1 * rng.standard_normal(shape)
        else:
            w[name] = scale * 0.08 * rng.standard_normal(shape)
        w[name] = w[name].astype(dtype)
    return w
