from __future__ import annotations

import numpy as np
import pytest

from sgcauchy.gridcore import Grid


@pytest.fixture
def grid512() -> Grid:
    return Grid.uniform(16.0, 512)


@pytest.fixture
def grid256() -> Grid:
    return Grid.uniform(20.0, 256)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))
