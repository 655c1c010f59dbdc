import numpy as np
import pytest

from usar import Mask


@pytest.fixture
def make_mask():
    def _make(rows, pixel_spacing=1.0):
        return Mask(labels=np.asarray(rows, dtype=np.uint8),
                    pixel_spacing=pixel_spacing)
    return _make
