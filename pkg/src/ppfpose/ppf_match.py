"""Online stage: vote for poses inside one instance, cluster and score them.

Every stride-th scene point acts as a reference. Pair features against all
scene points within the object diameter are hashed into the model table;
each table entry votes for (model reference point, in-plane angle). Peaks of
the per-reference accumulator become pose hypotheses, which are then greedily
clustered and vote-weighted averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import RigidPose, average_rotations, quat_from_matrix_batch
from .ppf_model import (
    PPFModel,
    canonical_rotation,
    compute_ppf_batch,
    local_alpha_batch,
    quantize_ppf,
)
from .rgbd import PointCloud

# In-plane angle accumulator resolution over (-pi, pi].
N_ALPHA_BINS = 30

SCORE_NORMAL_MAX_ANGLE = np.deg2rad(30.0)

try:
    from numba import njit

    @njit(cache=True)
    def _scatter_votes(starts, lengths, alpha_s, entry_ref, entry_alpha,
                       acc, alpha_scale, n_alpha):
        for i in range(starts.shape[0]):
            # (alpha_m - alpha_s + 3pi) is positive, so int() floors; the
            # modulus folds the circular seam at pi.
            shift = (3.0 * np.pi - alpha_s[i]) * alpha_scale
            s0 = starts[i]
            for j in range(lengths[i]):
                e = s0 + j
                b = int(entry_alpha[e] * alpha_scale + shift) % n_alpha
                acc[entry_ref[e] * n_alpha + b] += 1

    _HAVE_NUMBA = True
except ImportError:   # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


def _scatter_votes_numpy(starts, lengths, alpha_s, entry_ref, entry_alpha,
                         acc, alpha_scale, n_alpha):
    total = int(lengths.sum())
    if total == 0:
        return
    cum = np.cumsum(lengths)
    take = np.arange(total) + np.repeat(starts - (cum - lengths), lengths)
    shift = np.repeat((3.0 * np.pi - alpha_s) * alpha_scale, lengths)
    bins = np.floor(entry_alpha[take] * alpha_scale + shift).astype(np.int64) % n_alpha
    acc += np.bincount(entry_ref[take] * n_alpha + bins, minlength=acc.shape[0]
                       ).astype(acc.dtype)


@dataclass
class MatchParams:
    ref_sampling_stride: int = 5
    peak_rel_threshold: float = 0.85
    cluster_trans_thresh: float = 0.1      # fraction of object diameter
    cluster_rot_thresh: float = np.deg2rad(12.0)
    top_k_clusters: int = 5
    mask_dilation: float = 0.05            # fraction of detection bbox diagonal
    # Bound on near-tied peaks kept per reference point. Ordinary scenes
    # produce a handful; the bound only bites on degenerate accumulators
    # (large planes matching flat model faces), whose tied peaks are a
    # redundant slide-along-the-plane family.
    max_peaks_per_ref: int = 64

    def __post_init__(self):
        if self.ref_sampling_stride < 1:
            raise ValueError("ref_sampling_stride must be >= 1")
        if not (0.0 < self.peak_rel_threshold <= 1.0):
            raise ValueError("peak_rel_threshold must be in (0, 1]")
        if min(self.cluster_trans_thresh, self.cluster_rot_thresh,
               self.top_k_clusters, self.mask_dilation,
               self.max_peaks_per_ref) <= 0:
            raise ValueError("match parameters must be positive")


@dataclass
class PoseHypothesis:
    pose: RigidPose
    votes: int
    ref_point: int        # index of the scene reference point


@dataclass
class PoseCluster:
    pose: RigidPose
    total_votes: int
    members: int
    fit: float = 0.0


def vote_instance(scene: PointCloud, model: PPFModel, params: MatchParams):
    """Pose hypotheses from pair-feature voting over one instance cloud.

    `scene` must already be downsampled at the model's sampling step and carry
    normals; its points should come only from the (dilated) instance mask.
    """
    if len(scene) == 0:
        raise ValueError("empty instance cloud (empty or invalid mask)")
    if scene.normals is None:
        raise ValueError("instance cloud has no normals")

    pts = scene.points
    nrm = scene.normals
    tree = cKDTree(pts)
    ref_indices = np.arange(0, len(scene), params.ref_sampling_stride)
    neighbor_lists = tree.query_ball_point(pts[ref_indices], model.diameter)

    n_model = model.n_points
    alpha_scale = N_ALPHA_BINS / (2.0 * np.pi)
    model_R, model_t = model.canonical_frames()
    scatter = _scatter_votes if _HAVE_NUMBA else _scatter_votes_numpy
    acc = np.zeros(n_model * N_ALPHA_BINS, dtype=np.int32)
    hypotheses = []
    for r, neighbors in zip(ref_indices, neighbor_lists):
        nb = np.asarray(neighbors, dtype=np.int64)
        nb = nb[nb != r]
        if nb.shape[0] == 0:
            continue
        d = np.linalg.norm(pts[nb] - pts[r], axis=1)
        nb = nb[d > 1e-12]
        if nb.shape[0] == 0:
            continue

        feats, _ = compute_ppf_batch(pts[r], nrm[r], pts[nb], nrm[nb])
        keys = quantize_ppf(feats, model.dist_step, model.angle_step, model.n_angle)
        alpha_s = local_alpha_batch(pts[r], nrm[r], pts[nb])

        starts, lengths = model.lookup(keys)
        if int(lengths.sum()) == 0:
            continue
        acc[:] = 0
        scatter(starts, lengths, alpha_s, model.entry_ref, model.entry_alpha,
                acc, alpha_scale, N_ALPHA_BINS)
        vmax = int(acc.max())
        if vmax == 0:
            continue
        cells = np.nonzero(acc >= params.peak_rel_threshold * vmax)[0]
        if cells.shape[0] > params.max_peaks_per_ref:
            order = np.lexsort((cells, -acc[cells]))[:params.max_peaks_per_ref]
            cells = cells[order]

        # Batched pose assembly: pose = inv(T_scene) o Rx(alpha) o T_model.
        m_r = cells // N_ALPHA_BINS
        alpha_c = -np.pi + (cells % N_ALPHA_BINS + 0.5) * (2.0 * np.pi / N_ALPHA_BINS)
        n_pk = cells.shape[0]
        ca, sa = np.cos(alpha_c), np.sin(alpha_c)
        rot_x = np.zeros((n_pk, 3, 3))
        rot_x[:, 0, 0] = 1.0
        rot_x[:, 1, 1] = ca
        rot_x[:, 1, 2] = -sa
        rot_x[:, 2, 1] = sa
        rot_x[:, 2, 2] = ca
        scene_R_inv = canonical_rotation(nrm[r]).T
        xm = np.einsum("nab,nbc->nac", rot_x, model_R[m_r])
        R_peak = np.einsum("ab,nbc->nac", scene_R_inv, xm)
        t_peak = (np.einsum("nab,nb->na", rot_x, model_t[m_r])
                  @ scene_R_inv.T) + pts[r]
        q_peak = quat_from_matrix_batch(R_peak)
        votes = acc[cells]
        for i in range(n_pk):
            hypotheses.append(PoseHypothesis(
                RigidPose.from_unit(q_peak[i], t_peak[i]), int(votes[i]), int(r)))
    return hypotheses


def cluster_poses(hypotheses, diameter: float, params: MatchParams):
    """Greedy clustering of hypotheses, strongest votes first.

    A hypothesis joins the first cluster whose seed pose is within the
    translation and rotation thresholds, else it seeds a new cluster. The
    cluster pose is the vote-weighted average of its members. Ordering is
    fully deterministic: hypotheses are ranked by votes, then reference point
    index, then lexicographic translation.
    """
    if not hypotheses:
        return []
    quats = np.stack([h.pose.q for h in hypotheses])
    trans = np.stack([h.pose.t for h in hypotheses])
    votes = np.array([h.votes for h in hypotheses], dtype=np.int64)
    refs = np.array([h.ref_point for h in hypotheses], dtype=np.int64)
    order = np.lexsort((trans[:, 2], trans[:, 1], trans[:, 0], refs, -votes))
    quats, trans, votes = quats[order], trans[order], votes[order]

    trans_thresh = params.cluster_trans_thresh * diameter
    # angle(q1, q2) <= theta  <=>  |q1 . q2| >= cos(theta / 2)
    cos_half = np.cos(0.5 * params.cluster_rot_thresh)

    # Hash hypotheses on a translation grid at the cluster radius so each
    # seed only scans its 27 neighboring cells; everything within the
    # translation threshold is guaranteed to live there.
    n = quats.shape[0]
    cell = np.floor(trans / trans_thresh).astype(np.int64)
    buckets = {}
    for idx in range(n):
        buckets.setdefault((cell[idx, 0], cell[idx, 1], cell[idx, 2]),
                           []).append(idx)
    buckets = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}

    # Seeds are taken in rank order; assigning each seed's whole batch at
    # once equals scanning clusters first-match per hypothesis, because
    # earlier seeds claim their members first.
    assigned = np.zeros(n, dtype=bool)
    clusters = []
    for s in range(n):
        if assigned[s]:
            continue
        cx, cy, cz = cell[s]
        cand = [buckets[key]
                for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
                if (key := (cx + dx, cy + dy, cz + dz)) in buckets]
        cand = np.concatenate(cand)
        cand = cand[~assigned[cand]]
        near = np.linalg.norm(trans[cand] - trans[s], axis=1) <= trans_thresh
        near &= np.abs(quats[cand] @ quats[s]) >= cos_half
        members = np.sort(cand[near])
        assigned[members] = True
        w = votes[members].astype(np.float64)
        q = average_rotations(quats[members], w)
        t = (trans[members] * w[:, None]).sum(axis=0) / w.sum()
        clusters.append(PoseCluster(RigidPose(q, t), int(w.sum()),
                                    int(members.shape[0])))
    clusters.sort(key=lambda c: -c.total_votes)
    return clusters[:params.top_k_clusters]


def fitting_score(pose: RigidPose, model: PPFModel, scene: PointCloud,
                  scene_tree: cKDTree | None = None) -> float:
    """Fraction of model sample points explained by the scene under `pose`.

    A model point counts when a scene point lies within twice the sampling
    step of its transformed position and, when normals are available on both
    sides, the normals agree within 30 degrees.
    """
    if len(scene) == 0:
        return 0.0
    tree = scene_tree if scene_tree is not None else cKDTree(scene.points)
    tp = pose.apply(model.cloud.points)
    dist, idx = tree.query(tp, distance_upper_bound=2.0 * model.dist_step)
    ok = np.isfinite(dist)
    if scene.normals is not None and model.cloud.normals is not None and np.any(ok):
        tn = model.cloud.normals @ pose.rotation_matrix().T
        cos_lim = np.cos(SCORE_NORMAL_MAX_ANGLE)
        agree = np.zeros_like(ok)
        agree[ok] = np.sum(tn[ok] * scene.normals[idx[ok]], axis=1) >= cos_lim
        ok = ok & agree
    return float(ok.sum()) / model.n_points
