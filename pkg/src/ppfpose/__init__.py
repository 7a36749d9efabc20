"""ppfpose: 6DoF pose estimation by point-pair-feature voting inside instance masks."""

from .geom import CameraIntrinsics, RigidPose

__all__ = ["CameraIntrinsics", "RigidPose"]
__version__ = "0.1.0"
