import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from direg3d.geometry import BoundingBox, FisheyeCamera  # noqa: E402

from helpers import make_camera  # noqa: E402


@pytest.fixture
def camera() -> FisheyeCamera:
    return make_camera()


@pytest.fixture
def zero_distortion_camera() -> FisheyeCamera:
    return make_camera(k=(0.0, 0.0, 0.0, 0.0), fx=200.0, fy=200.0, cx=320.0, cy=320.0,
                       width=640, height=640)


@pytest.fixture
def box() -> BoundingBox:
    return BoundingBox(200.0, 150.0, 330.0, 260.0)
