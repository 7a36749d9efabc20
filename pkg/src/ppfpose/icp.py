"""Point-to-plane ICP against an oriented scene cloud.

The update is solved in model coordinates (right-composition), which makes
the whole refinement exactly equivariant under a rigid transform of scene and
initialization. Steps are only accepted when the gated point-to-plane RMS
does not increase, with up to five halvings of the twist; the recorded RMS
history is therefore non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import RigidPose, quat_from_axis_angle
from .rgbd import PointCloud

MAX_STEP_HALVINGS = 5


@dataclass
class IcpParams:
    max_iters: int = 30
    corr_dist_start: float = 0.15    # fraction of diameter
    corr_dist_end: float = 0.05      # fraction of diameter
    converge_rot: float = np.deg2rad(0.1)
    converge_trans: float = 1e-4     # fraction of diameter

    def __post_init__(self):
        if not (self.corr_dist_start >= self.corr_dist_end > 0):
            raise ValueError("need corr_dist_start >= corr_dist_end > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class IcpResult:
    pose: RigidPose
    rms_residual: float
    iterations: int
    converged: bool
    rms_history: list = field(default_factory=list)


def _twist_pose(omega, trans) -> RigidPose:
    angle = np.linalg.norm(omega)
    if angle < 1e-16:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    else:
        q = quat_from_axis_angle(omega / angle, angle)
    return RigidPose(q, trans)


def refine_icp(init: RigidPose, model_points, scene: PointCloud,
               diameter: float, params: IcpParams | None = None) -> IcpResult:
    """Refine `init` so the model points fit the scene cloud.

    Correspondences are nearest scene neighbors within a distance gate that
    anneals linearly from corr_dist_start to corr_dist_end (times diameter)
    over the iterations. Raises if the initialization produces no
    correspondences at all.
    """
    if params is None:
        params = IcpParams()
    if scene.normals is None:
        raise ValueError("scene cloud needs normals for point-to-plane ICP")
    if len(scene) == 0:
        raise ValueError("empty scene cloud")
    mp = np.asarray(model_points, dtype=np.float64)
    tree = cKDTree(scene.points)
    if params.max_iters > 1:
        gates = np.linspace(params.corr_dist_start, params.corr_dist_end,
                            params.max_iters) * diameter
    else:
        gates = np.array([params.corr_dist_start * diameter])

    def gated_residuals(pose, gate):
        tp = pose.apply(mp)
        dist, idx = tree.query(tp, distance_upper_bound=gate)
        ok = np.isfinite(dist)
        if not np.any(ok):
            return None
        q = scene.points[idx[ok]]
        n = scene.normals[idx[ok]]
        res = np.sum((tp[ok] - q) * n, axis=1)
        return ok, q, n, res

    pose = init
    first = gated_residuals(pose, gates[0])
    if first is None:
        raise ValueError("no correspondences at the initial pose; bad initialization")
    ok, q, n, res = first
    last_rms = float(np.sqrt(np.mean(res ** 2)))
    history = [last_rms]

    converged = False
    iterations = 0
    for k in range(params.max_iters):
        gate = gates[k]
        cur = gated_residuals(pose, gate)
        if cur is None:
            break
        ok, q, n, res = cur
        if ok.sum() < 6:
            break
        # Linearized point-to-plane solve for a model-frame twist (w, t):
        # residual_i + w . (p_i x m_i) + t . m_i = 0, with m_i the scene
        # normal pulled back into model coordinates.
        R = pose.rotation_matrix()
        m = n @ R
        p = mp[ok]
        J = np.concatenate([np.cross(p, m), m], axis=1)
        A = J.T @ J
        b = -(J.T @ res)
        try:
            x = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            x = np.linalg.lstsq(A, b, rcond=None)[0]
        omega, trans = x[:3], x[3:]

        accepted = False
        for h in range(MAX_STEP_HALVINGS + 1):
            f = 0.5 ** h
            candidate = pose.compose(_twist_pose(f * omega, f * trans))
            cand = gated_residuals(candidate, gate)
            if cand is None:
                continue
            rms_c = float(np.sqrt(np.mean(cand[3] ** 2)))
            if rms_c <= last_rms:
                pose = candidate
                last_rms = rms_c
                history.append(rms_c)
                accepted = True
                break
        iterations = k + 1
        if not accepted:
            break
        step_rot = f * np.linalg.norm(omega)
        step_trans = f * np.linalg.norm(trans)
        if step_rot < params.converge_rot and step_trans < params.converge_trans * diameter:
            converged = True
            break

    return IcpResult(pose, last_rms, iterations, converged, history)
