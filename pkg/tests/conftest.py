import numpy as np
import pytest
from hypothesis import settings

from ddacdn.detector import DetectorGeometry

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_geom():
    # smallest geometry that still exercises all three scales
    return DetectorGeometry(input_size=32, widths=(3, 4, 5), stem_width=2, num_classes=2)
