import numpy as np
import pytest

from lesionforge.rng import make_rng
from lesionforge.volume import Mask, Volume


@pytest.fixture
def rng():
    return make_rng(20240817)


def random_volume(rng, shape=(8, 8, 8), spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(rng.random(shape), spacing)


def random_mask(rng, shape=(8, 8, 8), density=0.3,
                spacing=(1.0, 1.0, 1.0)) -> Mask:
    return Mask((rng.random(shape) < density).astype(np.uint8), spacing)
