"""Offline object description for pair-feature voting.

A point pair (p1, n1), (p2, n2) is summarized by four rigid-invariant
numbers: the pair distance and the three angles between the normals and the
connecting direction. Quantizing these gives a hash key; the model table maps
each key to every model pair that produced it, together with the in-plane
angle alpha that pins down the remaining rotational degree of freedom around
the reference normal.

The canonical frame of a reference point moves it to the origin and rotates
its normal onto +x. alpha of a paired point is the rotation about x that
brings it into the half-plane {z = 0, y >= 0} of that frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom import RigidPose, quat_from_axis_angle
from .rgbd import ObjectModel, PointCloud, voxel_downsample

DEFAULT_TAU_D = 0.05      # sampling step as a fraction of the object diameter
DEFAULT_N_ANGLE = 30      # angle bins over [0, pi], i.e. 6 degree resolution

_MAGIC = b"PPFM"
_VERSION = 1


def compute_ppf(p1, n1, p2, n2):
    """Pair feature (d, a1, a2, a3): distance, angles (n1,d), (n2,d), (n1,n2)."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    d = p2 - p1
    dist = np.linalg.norm(d)
    if dist < 1e-12:
        raise ValueError("coincident points have no pair feature")
    du = d / dist
    a1 = np.arccos(np.clip(np.dot(n1, du), -1.0, 1.0))
    a2 = np.arccos(np.clip(np.dot(n2, du), -1.0, 1.0))
    a3 = np.arccos(np.clip(np.dot(n1, n2), -1.0, 1.0))
    return np.array([dist, a1, a2, a3])


def compute_ppf_batch(p_ref, n_ref, pts, nrm):
    """Pair features of one reference point against (M, 3) points/normals.

    Returns (features (M, 4), distances (M,)); callers must have excluded
    coincident points already.
    """
    d = pts - p_ref
    dist = np.linalg.norm(d, axis=1)
    du = d / dist[:, None]
    a1 = np.arccos(np.clip(du @ n_ref, -1.0, 1.0))
    a2 = np.arccos(np.clip(np.sum(du * nrm, axis=1), -1.0, 1.0))
    a3 = np.arccos(np.clip(nrm @ n_ref, -1.0, 1.0))
    return np.stack([dist, a1, a2, a3], axis=1), dist


def quantize_ppf(feature, dist_step, angle_step, n_angle):
    """Pack the four feature bins into one integer key.

    Distance bins by floor(d / dist_step); angle bins by floor(a / angle_step)
    with the value pi clamped into the top bin. Layout (LSB first): three
    8-bit angle bins, then a 16-bit distance bin.
    """
    f = np.atleast_2d(np.asarray(feature, dtype=np.float64))
    bd = np.minimum(np.floor(f[:, 0] / dist_step).astype(np.int64), 0xFFFF)
    ba = np.minimum(np.floor(f[:, 1:] / angle_step).astype(np.int64), n_angle - 1)
    keys = (((bd << 8 | ba[:, 0]) << 8 | ba[:, 1]) << 8) | ba[:, 2]
    if np.asarray(feature).ndim == 1:
        return int(keys[0])
    return keys


def canonical_rotation(normal):
    """Rotation taking `normal` onto +x (about normal x xhat; pi about y if opposed)."""
    n = np.asarray(normal, dtype=np.float64)
    c = n[0]
    axis = np.array([0.0, n[2], -n[1]])   # n x xhat
    s = np.linalg.norm(axis)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        return np.diag([-1.0, 1.0, -1.0])  # pi about y
    axis /= s
    angle = np.arctan2(s, c)
    q = quat_from_axis_angle(axis, angle)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def canonical_pose(point, normal) -> RigidPose:
    """Full canonical transform: point -> origin, normal -> +x."""
    R = canonical_rotation(normal)
    p = np.asarray(point, dtype=np.float64)
    return RigidPose.from_rt(R, -(R @ p))


def local_alpha(p_ref, n_ref, p_other) -> float:
    """In-plane angle of p_other in the canonical frame of (p_ref, n_ref).

    Rx(alpha) applied to the canonical-frame point lands it in the half-plane
    {z = 0, y >= 0}. Points on the normal axis get alpha = 0.
    """
    R = canonical_rotation(n_ref)
    q = R @ (np.asarray(p_other, dtype=np.float64) - np.asarray(p_ref, dtype=np.float64))
    return float(np.arctan2(-q[2], q[1]))


def local_alpha_batch(p_ref, n_ref, pts):
    R = canonical_rotation(n_ref)
    q = (pts - p_ref) @ R.T
    return np.arctan2(-q[:, 2], q[:, 1])


def wrap_angle(a):
    """Wrap to (-pi, pi] (vectorized)."""
    out = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


@dataclass
class PPFModel:
    """Hashed pair-feature description of one object.

    The table is stored flat: `keys` is sorted and `offsets[i]:offsets[i+1]`
    slices `entry_ref`/`entry_alpha` for keys[i]. entry_ref indexes into the
    subsampled `cloud`; entry_alpha is the model-side in-plane angle in
    radians, kept continuous so that only one quantization happens at
    matching time.
    """

    object_id: int
    dist_step: float          # voxel / distance quantization step, meters
    angle_step: float         # angle quantization step, radians
    n_angle: int
    cloud: PointCloud         # subsampled, oriented, optional colors
    diameter: float           # meters
    keys: np.ndarray          # (K,) int64 sorted
    offsets: np.ndarray       # (K+1,) int64
    entry_ref: np.ndarray     # (E,) int64 in memory, uint32 in the file
    entry_alpha: np.ndarray   # (E,) float64 in memory, float32 in the file
    _canon_rotations: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_points(self):
        return len(self.cloud)

    @property
    def n_entries(self):
        return int(self.entry_ref.shape[0])

    def lookup(self, query_keys):
        """Table slices for each query key: (starts, lengths), zero-length on miss."""
        pos = np.searchsorted(self.keys, query_keys)
        pos_c = np.minimum(pos, self.keys.shape[0] - 1)
        hit = self.keys[pos_c] == query_keys
        starts = np.where(hit, self.offsets[pos_c], 0)
        lengths = np.where(hit, self.offsets[pos_c + 1] - self.offsets[pos_c], 0)
        return starts, lengths

    def canonical_frames(self):
        """Cached canonical transforms of every sampled model point.

        Returns (R (N, 3, 3), t (N, 3)) with R n_i = +x and R p_i + t = 0.
        """
        if self._canon_rotations is None:
            rots = np.stack([canonical_rotation(n) for n in self.cloud.normals])
            trans = -np.einsum("nab,nb->na", rots, self.cloud.points)
            self._canon_rotations = (rots, trans)
        return self._canon_rotations


def build_model(model: ObjectModel, tau_d=DEFAULT_TAU_D, n_angle=DEFAULT_N_ANGLE) -> PPFModel:
    """Subsample the object cloud and hash every ordered point pair.

    The sampling step is tau_d * diameter; both pair directions are stored so
    scene-side lookups need no symmetry handling. Entry count is exactly
    N*(N-1) for N sampled points.
    """
    if model.cloud.normals is None:
        raise ValueError("object model needs normals to build a pair-feature table")
    if not (0.0 < tau_d <= 0.5):
        raise ValueError("tau_d must be in (0, 0.5]")
    if not (4 <= n_angle <= 256):
        raise ValueError("n_angle must be in [4, 256]")
    dist_step = tau_d * model.diameter
    angle_step = np.pi / n_angle
    sampled = voxel_downsample(model.cloud, dist_step)
    n = len(sampled)
    if n < 2:
        raise ValueError("fewer than 2 sampled points; model too small for its diameter")

    pts = sampled.points
    nrm = sampled.normals
    all_keys = np.empty(n * (n - 1), dtype=np.int64)
    all_ref = np.empty(n * (n - 1), dtype=np.uint32)
    all_alpha = np.empty(n * (n - 1), dtype=np.float32)
    pos = 0
    for i in range(n):
        others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
        feats, _ = compute_ppf_batch(pts[i], nrm[i], pts[others], nrm[others])
        keys = quantize_ppf(feats, dist_step, angle_step, n_angle)
        alphas = local_alpha_batch(pts[i], nrm[i], pts[others])
        m = others.shape[0]
        all_keys[pos:pos + m] = keys
        all_ref[pos:pos + m] = i
        all_alpha[pos:pos + m] = alphas
        pos += m

    order = np.argsort(all_keys, kind="stable")
    sorted_keys = all_keys[order]
    uniq, starts = np.unique(sorted_keys, return_index=True)
    offsets = np.concatenate([starts, [sorted_keys.shape[0]]]).astype(np.int64)
    return PPFModel(
        object_id=model.object_id,
        dist_step=float(dist_step),
        angle_step=float(angle_step),
        n_angle=int(n_angle),
        cloud=sampled,
        diameter=float(model.diameter),
        keys=uniq,
        offsets=offsets,
        entry_ref=all_ref[order].astype(np.int64),
        entry_alpha=all_alpha[order].astype(np.float64),
    )


# ---------------------------------------------------------------------------
# Model file container
# ---------------------------------------------------------------------------
#
# Little-endian layout:
#   magic "PPFM" | uint32 version | int32 object_id | float64 dist_step |
#   float64 angle_step | int32 n_angle | int32 N | float64 diameter |
#   uint8 has_colors | int64 K | int64 E |
#   points  N*3 float64 | normals N*3 float64 | [colors N*3 uint8] |
#   keys    K   int64   | offsets (K+1) int64 |
#   entry_ref E uint32  | entry_alpha E float32

_HEADER = struct.Struct("<4sIiddiidBqq")


def save_model(path, model: PPFModel):
    with open(path, "wb") as f:
        has_colors = model.cloud.colors is not None
        f.write(_HEADER.pack(_MAGIC, _VERSION, model.object_id, model.dist_step,
                             model.angle_step, model.n_angle, model.n_points,
                             model.diameter, int(has_colors),
                             model.keys.shape[0], model.n_entries))
        f.write(model.cloud.points.astype("<f8").tobytes())
        f.write(model.cloud.normals.astype("<f8").tobytes())
        if has_colors:
            f.write(model.cloud.colors.astype("u1").tobytes())
        f.write(model.keys.astype("<i8").tobytes())
        f.write(model.offsets.astype("<i8").tobytes())
        f.write(model.entry_ref.astype("<u4").tobytes())
        f.write(model.entry_alpha.astype("<f4").tobytes())


def load_model(path) -> PPFModel:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError(f"{path}: truncated model file")
        (magic, version, object_id, dist_step, angle_step, n_angle, n,
         diameter, has_colors, n_keys, n_entries) = _HEADER.unpack(header)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a pair-feature model file")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported model file version {version}")

        def read_array(dtype, count, shape=None):
            dt = np.dtype(dtype)
            buf = f.read(dt.itemsize * count)
            if len(buf) < dt.itemsize * count:
                raise ValueError(f"{path}: truncated model file")
            arr = np.frombuffer(buf, dtype=dt, count=count).copy()
            return arr.reshape(shape) if shape else arr

        points = read_array("<f8", n * 3, (n, 3))
        normals = read_array("<f8", n * 3, (n, 3))
        colors = read_array("u1", n * 3, (n, 3)) if has_colors else None
        keys = read_array("<i8", n_keys)
        offsets = read_array("<i8", n_keys + 1)
        entry_ref = read_array("<u4", n_entries).astype(np.int64)
        entry_alpha = read_array("<f4", n_entries).astype(np.float64)
    return PPFModel(object_id, dist_step, angle_step, n_angle,
                    PointCloud(points, normals, colors), diameter,
                    keys, offsets, entry_ref, entry_alpha)
