import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clipfusion.backends import create_backends


@pytest.fixture(scope="session")
def mock_backends():
    return create_backends("mock", "mock")


@pytest.fixture()
def rng():
    return np.random.default_rng(20260810)


def textured_image(generator: np.random.Generator, size: int = 256) -> np.ndarray:
    """A mildly textured normal image in [0, 1]."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    base = 0.5 + 0.12 * np.sin(2 * np.pi * (xx + 0.6 * yy) / 24.0)
    img = np.stack([base, base * 0.98, base * 1.02], axis=-1)
    img += generator.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def inject_square(image: np.ndarray, y0: int = 96, x0: int = 120, side: int = 28,
                  offset: float = 0.35) -> np.ndarray:
    out = image.copy()
    out[y0 : y0 + side, x0 : x0 + side] = np.clip(
        out[y0 : y0 + side, x0 : x0 + side] + offset, 0.0, 1.0
    )
    return out
