from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from vasq.volume import LabelMask

settings.register_profile("vasq", max_examples=40, deadline=None)
settings.load_profile("vasq")


def random_labels(rng, shape=(32, 32, 32), p=(0.6, 0.2, 0.2)) -> np.ndarray:
    return rng.choice(np.arange(3, dtype=np.uint8), size=shape, p=p)


def ball(shape, center, radius, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    idx = np.indices(shape).reshape(3, -1).T * np.asarray(spacing)
    d = np.linalg.norm(idx - np.asarray(center) * np.asarray(spacing), axis=1)
    return (d <= radius).reshape(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def label_pair(rng):
    a = LabelMask(random_labels(rng))
    b = LabelMask(random_labels(rng))
    return a, b
