"""Rigid-body math: unit-quaternion poses, rotation averaging, camera intrinsics.

Rotations are stored as unit quaternions in (w, x, y, z) order. A quaternion q
and its negation -q denote the same rotation; every comparison here is
invariant to that sign flip. All translations and point coordinates are in
meters, camera frame unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_UNIT_TOL = 1e-9


def quat_multiply(a, b):
    """Hamilton product a*b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * (axis / n)
    return q


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R):
    """Quaternion from a 3x3 rotation matrix (largest-pivot branch for stability)."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return q / np.linalg.norm(q)


def quat_from_matrix_batch(R):
    """Vectorized quat_from_matrix over (N, 3, 3); same branch selection."""
    R = np.asarray(R, dtype=np.float64)
    n = R.shape[0]
    q = np.empty((n, 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    c0 = tr > 0
    c1 = ~c0 & (R[:, 0, 0] >= R[:, 1, 1]) & (R[:, 0, 0] >= R[:, 2, 2])
    c2 = ~c0 & ~c1 & (R[:, 1, 1] >= R[:, 2, 2])
    c3 = ~(c0 | c1 | c2)
    for mask, kind in ((c0, 0), (c1, 1), (c2, 2), (c3, 3)):
        if not np.any(mask):
            continue
        r = R[mask]
        if kind == 0:
            s = np.sqrt(tr[mask] + 1.0) * 2.0
            q[mask, 0] = 0.25 * s
            q[mask, 1] = (r[:, 2, 1] - r[:, 1, 2]) / s
            q[mask, 2] = (r[:, 0, 2] - r[:, 2, 0]) / s
            q[mask, 3] = (r[:, 1, 0] - r[:, 0, 1]) / s
        elif kind == 1:
            s = np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2]) * 2.0
            q[mask, 0] = (r[:, 2, 1] - r[:, 1, 2]) / s
            q[mask, 1] = 0.25 * s
            q[mask, 2] = (r[:, 0, 1] + r[:, 1, 0]) / s
            q[mask, 3] = (r[:, 0, 2] + r[:, 2, 0]) / s
        elif kind == 2:
            s = np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2]) * 2.0
            q[mask, 0] = (r[:, 0, 2] - r[:, 2, 0]) / s
            q[mask, 1] = (r[:, 0, 1] + r[:, 1, 0]) / s
            q[mask, 2] = 0.25 * s
            q[mask, 3] = (r[:, 1, 2] + r[:, 2, 1]) / s
        else:
            s = np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1]) * 2.0
            q[mask, 0] = (r[:, 1, 0] - r[:, 0, 1]) / s
            q[mask, 1] = (r[:, 0, 2] + r[:, 2, 0]) / s
            q[mask, 2] = (r[:, 1, 2] + r[:, 2, 1]) / s
            q[mask, 3] = 0.25 * s
    return q / np.linalg.norm(q, axis=1)[:, None]


def random_rotation(rng):
    """Uniform random unit quaternion (Gaussian 4-vector, normalized)."""
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class RigidPose:
    """SE(3) transform: x -> R(q) @ x + t."""

    q: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4).copy()
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose components must be finite")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("zero quaternion")
        q /= n
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity():
        return RigidPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_unit(q, t):
        """Trusted fast path: q must already be a unit float64 quaternion.

        Skips validation; only for internal bulk construction from batched
        math that normalizes on its own.
        """
        p = object.__new__(RigidPose)
        object.__setattr__(p, "q", q)
        object.__setattr__(p, "t", t)
        return p

    @staticmethod
    def from_rt(R, t):
        return RigidPose(quat_from_matrix(R), np.asarray(t, dtype=np.float64))

    @staticmethod
    def from_axis_angle(axis, angle, t=(0.0, 0.0, 0.0)):
        return RigidPose(quat_from_axis_angle(axis, angle), np.asarray(t, dtype=np.float64))

    @staticmethod
    def random(rng, trans_scale=1.0):
        return RigidPose(random_rotation(rng), rng.uniform(-trans_scale, trans_scale, 3))

    def rotation_matrix(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = quat_to_matrix(self.q)
        M[:3, 3] = self.t
        return M

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self after other: result(x) = self(other(x))."""
        q = quat_multiply(self.q, other.q)
        t = quat_to_matrix(self.q) @ other.t + self.t
        return RigidPose(q, t)

    def invert(self) -> "RigidPose":
        qi = quat_conjugate(self.q)
        Ri = quat_to_matrix(qi)
        return RigidPose(qi, -(Ri @ self.t))

    def apply(self, x):
        """Transform one point (3,) or a stack of points (N, 3)."""
        x = np.asarray(x, dtype=np.float64)
        R = quat_to_matrix(self.q)
        if x.ndim == 1:
            return R @ x + self.t
        return x @ R.T + self.t

    def apply_rotation(self, v):
        """Rotate direction vector(s) without translating."""
        v = np.asarray(v, dtype=np.float64)
        R = quat_to_matrix(self.q)
        if v.ndim == 1:
            return R @ v
        return v @ R.T


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    return a.compose(b)


def invert(p: RigidPose) -> RigidPose:
    return p.invert()


def transform_point(p: RigidPose, x):
    return p.apply(x)


def rotation_angle_between(a: RigidPose, b: RigidPose) -> float:
    """Geodesic angle in [0, pi] between the two rotations, sign-flip invariant.

    Uses the relative quaternion and atan2, which stays well conditioned near
    zero angle where acos of the dot product loses precision.
    """
    qr = quat_multiply(quat_conjugate(a.q), b.q)
    return 2.0 * np.arctan2(np.linalg.norm(qr[1:]), abs(qr[0]))


def quat_angle(q) -> float:
    """Rotation angle in [0, pi] encoded by a unit quaternion."""
    return 2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0]))


def average_rotations(quats, weights=None):
    """Weighted chordal mean rotation.

    Computed as the largest eigenvector of the weighted quaternion
    outer-product sum, which is insensitive to per-input sign flips; the
    result's sign is aligned to the first input. Used for pose-cluster
    averaging, where inputs are tightly grouped.
    """
    Q = np.asarray(quats, dtype=np.float64)
    if Q.size == 0:
        raise ValueError("cannot average an empty rotation list")
    Q = np.atleast_2d(Q)
    if weights is None:
        w = np.ones(Q.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape[0] != Q.shape[0]:
            raise ValueError("weights length mismatch")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be nonnegative and not all zero")
    M = (Q * w[:, None]).T @ Q
    _, vecs = np.linalg.eigh(M)
    m = vecs[:, -1]
    if m @ Q[0] < 0:
        m = -m
    return m / np.linalg.norm(m)


def poses_close(a: RigidPose, b: RigidPose, rot_tol=1e-6, trans_tol=1e-9) -> bool:
    """Pose equality at fixed tolerances; test helper, not a metric."""
    return (rotation_angle_between(a, b) <= rot_tol
            and np.linalg.norm(a.t - b.t) <= trans_tol)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: u = fx*x/z + cx, v = fy*y/z + cy, pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @staticmethod
    def from_K(K, width, height):
        K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        return CameraIntrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2], int(width), int(height))

    def project(self, points):
        """Project (N, 3) camera-frame points to (N, 2) pixel coordinates.

        Raises for points at or behind the camera plane (z <= 0).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        z = pts[:, 2]
        if np.any(z <= 0):
            raise ValueError("cannot project points with z <= 0")
        uv = np.empty((pts.shape[0], 2))
        uv[:, 0] = self.fx * pts[:, 0] / z + self.cx
        uv[:, 1] = self.fy * pts[:, 1] / z + self.cy
        return uv
