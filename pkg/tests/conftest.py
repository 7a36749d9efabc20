import numpy as np
import pytest

from ppfpose.geom import CameraIntrinsics, RigidPose
from ppfpose.synth import make_box_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return CameraIntrinsics(280.0, 280.0, 159.5, 119.5, 320, 240)


def random_pose(rng, trans_scale=0.5):
    return RigidPose.random(rng, trans_scale)


def d2_symmetries():
    """180-degree rotations about x, y, z: the symmetry group of a generic box."""
    return [RigidPose.from_axis_angle(axis, np.pi)
            for axis in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]


@pytest.fixture
def box_model():
    return make_box_model(1, (0.12, 0.09, 0.045), 0.004, symmetries=d2_symmetries())
