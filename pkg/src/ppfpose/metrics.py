"""Pose-error and detection metrics, method selection, results CSV I/O.

Pose errors are symmetry-aware worst-case distances: MSSD in 3D over the
model vertices, MSPD in pixels after projection. Recall is averaged over a
fixed sweep of thresholds for both metrics. Detection quality is mean
average precision over mask IoU at a fixed threshold.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom import CameraIntrinsics, RigidPose
from .rgbd import BinaryMask, ObjectModel, load_mask

MSSD_THRESHOLDS_REL = np.arange(1, 11) * 0.05        # fractions of diameter
MSPD_THRESHOLDS_PX = np.arange(1, 11) * 5.0          # pixels at 640px width
MSPD_REF_WIDTH = 640.0
DEFAULT_VISIB_THRESHOLD = 0.1


def mssd(est: RigidPose, gt: RigidPose, model: ObjectModel) -> float:
    """Maximum symmetry-aware surface distance in meters.

    :param est: Estimated pose (model -> camera).
    :param gt: Ground-truth pose.
    :param model: Object model supplying vertices and symmetry transforms.
    :return: min over symmetries S of max over vertices x of
        ||est(x) - gt(S(x))||.
    """
    pts = model.cloud.points
    if pts.shape[0] == 0:
        raise ValueError("model has no vertices")
    pts_est = est.apply(pts)
    best = np.inf
    for sym in model.symmetries:
        pts_gt = gt.compose(sym).apply(pts)
        err = np.linalg.norm(pts_est - pts_gt, axis=1).max()
        best = min(best, float(err))
    return best


def mspd(est: RigidPose, gt: RigidPose, model: ObjectModel,
         K: CameraIntrinsics, image_width: int) -> float:
    """Maximum symmetry-aware projection distance in pixels.

    Distances are rescaled by 640 / image_width so thresholds are comparable
    across sensors. Raises if any vertex lands behind the camera.
    """
    pts = model.cloud.points
    if pts.shape[0] == 0:
        raise ValueError("model has no vertices")
    r = MSPD_REF_WIDTH / float(image_width)
    proj_est = K.project(est.apply(pts))
    best = np.inf
    for sym in model.symmetries:
        proj_gt = K.project(gt.compose(sym).apply(pts))
        err = np.linalg.norm(proj_est - proj_gt, axis=1).max()
        best = min(best, float(err))
    return r * best


@dataclass
class PoseErrorReport:
    """Recall sweep over the MSSD/MSPD thresholds and their mean."""

    mssd_recalls: np.ndarray       # (10,)
    mspd_recalls: np.ndarray       # (10,)
    ar: float
    n_instances: int
    per_object_ar: dict = field(default_factory=dict)


def average_recall(errors, per_object=None) -> PoseErrorReport:
    """Average recall over the fixed MSSD/MSPD threshold sweeps.

    :param errors: Per-GT-instance tuples (mssd_m, mspd_px, diameter_m);
        unmatched instances carry infinite errors.
    :param per_object: Optional parallel list of object ids for a per-object
        breakdown.
    :return: PoseErrorReport; AR is the mean of all 20 per-threshold recalls.
    """
    errs = list(errors)
    n = len(errs)
    if n == 0:
        return PoseErrorReport(np.zeros(10), np.zeros(10), 0.0, 0)

    def recalls(indices):
        e_mssd = np.array([errs[i][0] for i in indices])
        e_mspd = np.array([errs[i][1] for i in indices])
        diam = np.array([errs[i][2] for i in indices])
        r_mssd = np.array([np.mean(e_mssd < th * diam) for th in MSSD_THRESHOLDS_REL])
        r_mspd = np.array([np.mean(e_mspd < th) for th in MSPD_THRESHOLDS_PX])
        return r_mssd, r_mspd

    r_mssd, r_mspd = recalls(range(n))
    ar = float(np.concatenate([r_mssd, r_mspd]).mean())
    per_object_ar = {}
    if per_object is not None:
        for obj in sorted(set(per_object)):
            idx = [i for i, o in enumerate(per_object) if o == obj]
            a, b = recalls(idx)
            per_object_ar[obj] = float(np.concatenate([a, b]).mean())
    return PoseErrorReport(r_mssd, r_mspd, ar, n, per_object_ar)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    if a.bits.shape != b.bits.shape:
        raise ValueError("mask size mismatch")
    inter = np.count_nonzero(a.bits & b.bits)
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# Detections
# ---------------------------------------------------------------------------

@dataclass
class InstanceDetection:
    """One detected (or ground-truth) instance: class, confidence, mask."""

    scene_id: int
    im_id: int
    obj_id: int
    score: float
    mask_path: Optional[str] = None
    bbox: Optional[tuple] = None           # (x, y, w, h)
    mask: Optional[BinaryMask] = None

    def load_mask(self) -> BinaryMask:
        if self.mask is None:
            if self.mask_path is None:
                raise ValueError("detection has neither mask nor mask_path")
            self.mask = load_mask(self.mask_path)
        return self.mask


def load_detections(path):
    """Read a detections JSON array; mask paths are resolved relative to it."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        raw = json.load(f)
    out = []
    for e in raw:
        mask_path = e.get("mask_path")
        if mask_path is not None and not os.path.isabs(mask_path):
            mask_path = os.path.join(base, mask_path)
        out.append(InstanceDetection(
            int(e["scene_id"]), int(e["im_id"]), int(e["obj_id"]),
            float(e["score"]), mask_path,
            tuple(e["bbox"]) if "bbox" in e else None))
    return out


def save_detections(path, detections):
    rows = []
    for d in detections:
        row = {"scene_id": d.scene_id, "im_id": d.im_id, "obj_id": d.obj_id,
               "score": d.score}
        if d.mask_path is not None:
            row["mask_path"] = d.mask_path
        if d.bbox is not None:
            row["bbox"] = list(d.bbox)
        rows.append(row)
    with open(path, "w") as f:
        json.dump(rows, f, indent=1)


def map_at_iou(preds, gts, iou_thresh=0.5, class_agnostic=False):
    """Mean average precision of mask detections at one IoU threshold.

    Per class, predictions are taken in descending score order (ties keep
    input order) and greedily matched to the not-yet-matched ground truth
    with the highest IoU >= iou_thresh in the same image. AP is the area
    under the interpolated precision envelope (all-point interpolation);
    mAP averages classes that have at least one ground-truth instance.

    :param preds: list of InstanceDetection with loadable masks.
    :param gts: ground-truth InstanceDetection list; scores are ignored.
    :param class_agnostic: collapse all classes into one before evaluating.
    :return: (ap_per_class dict, mAP float).
    """
    def cls(d):
        return 0 if class_agnostic else d.obj_id

    classes = sorted({cls(g) for g in gts})
    ap_per_class = {}
    for c in classes:
        gt_c = [g for g in gts if cls(g) == c]
        pred_c = [p for p in preds if cls(p) == c]
        order = sorted(range(len(pred_c)), key=lambda i: -pred_c[i].score)
        matched = [False] * len(gt_c)
        tp = np.zeros(len(order))
        fp = np.zeros(len(order))
        for rank, i in enumerate(order):
            p = pred_c[i]
            best_iou = 0.0
            best_j = -1
            for j, g in enumerate(gt_c):
                if matched[j] or g.scene_id != p.scene_id or g.im_id != p.im_id:
                    continue
                iou = mask_iou(p.load_mask(), g.load_mask())
                if iou >= iou_thresh and iou > best_iou:
                    best_iou = iou
                    best_j = j
            if best_j >= 0:
                matched[best_j] = True
                tp[rank] = 1
            else:
                fp[rank] = 1
        npos = len(gt_c)
        if len(order) == 0:
            ap_per_class[c] = 0.0
            continue
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(fp)
        recall = tp_cum / npos
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        mrec = np.concatenate([[0.0], recall, [recall[-1]]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        for i in range(mpre.size - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        ap = float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))
        ap_per_class[c] = ap
    if not ap_per_class:
        return {}, 0.0
    return ap_per_class, float(np.mean(list(ap_per_class.values())))


@dataclass
class CandidateModel:
    """A named detector candidate with its predictions on a validation split."""

    name: str
    predictions: list

    def __post_init__(self):
        if not self.name:
            raise ValueError("candidate needs a nonempty name")


def select_best(candidates, gts, iou_thresh=0.5, class_agnostic=False):
    """Pick the candidate with the highest mAP; ties keep input order.

    :return: (winner name, {name: mAP}).
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    scores = {}
    best_name = None
    best_map = -1.0
    for cand in candidates:
        _, m = map_at_iou(cand.predictions, gts, iou_thresh, class_agnostic)
        scores[cand.name] = m
        if m > best_map:
            best_map = m
            best_name = cand.name
    return best_name, scores


# ---------------------------------------------------------------------------
# Results CSV
# ---------------------------------------------------------------------------

BOP_CSV_HEADER = "scene_id,im_id,obj_id,score,R,t,time"


@dataclass
class PoseResultRow:
    """One estimate in results-CSV terms: R row-major, t in millimeters."""

    scene_id: int
    im_id: int
    obj_id: int
    score: float
    R: np.ndarray               # (3, 3)
    t_mm: np.ndarray            # (3,)
    time_s: float

    @staticmethod
    def from_pose(scene_id, im_id, obj_id, score, pose: RigidPose, time_s):
        return PoseResultRow(scene_id, im_id, obj_id, score,
                             pose.rotation_matrix(), pose.t * 1e3, time_s)

    def pose(self) -> RigidPose:
        return RigidPose.from_rt(self.R, self.t_mm * 1e-3)


def _fmt(v: float) -> str:
    if not np.isfinite(v):
        raise ValueError(f"non-finite value in results row: {v}")
    return np.format_float_positional(float(v), unique=True, trim="-")


def write_bop_csv(path, rows):
    """Write estimates in the results-CSV layout.

    One line per estimate: scene_id,im_id,obj_id,score,R,t,time with R and t
    space-separated inside their columns and shortest round-trip decimal
    formatting. Raises on non-finite values.
    """
    lines = [BOP_CSV_HEADER]
    for r in rows:
        R = np.asarray(r.R, dtype=np.float64).reshape(9)
        t = np.asarray(r.t_mm, dtype=np.float64).reshape(3)
        lines.append(",".join([
            str(int(r.scene_id)), str(int(r.im_id)), str(int(r.obj_id)),
            _fmt(r.score),
            " ".join(_fmt(v) for v in R),
            " ".join(_fmt(v) for v in t),
            _fmt(r.time_s),
        ]))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_bop_csv(path):
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != BOP_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ValueError(f"{path}: malformed row {line!r}")
            rows.append(PoseResultRow(
                int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]),
                np.array([float(v) for v in parts[4].split()]).reshape(3, 3),
                np.array([float(v) for v in parts[5].split()]),
                float(parts[6])))
    return rows


# ---------------------------------------------------------------------------
# Pose evaluation driver
# ---------------------------------------------------------------------------

def match_estimates_to_gt(estimates, gt_poses, model: ObjectModel):
    """Greedy assignment of estimates to GT instances of one object class.

    Estimates are taken by descending score; each grabs the unmatched GT with
    the smallest MSSD. Returns per-GT (mssd, mspd_estimate_index) as
    (errors list, matched estimate index or None per GT).
    """
    order = sorted(range(len(estimates)), key=lambda i: -estimates[i][1])
    taken = [False] * len(gt_poses)
    assignment = [None] * len(gt_poses)
    for i in order:
        est_pose = estimates[i][0]
        best_j = None
        best_err = np.inf
        for j, gt in enumerate(gt_poses):
            if taken[j]:
                continue
            err = mssd(est_pose, gt, model)
            if err < best_err:
                best_err = err
                best_j = j
        if best_j is not None:
            taken[best_j] = True
            assignment[best_j] = i
    return assignment


def evaluate_pose_rows(rows, scene_gt, scene_cameras, models,
                       visib=None, visib_threshold=DEFAULT_VISIB_THRESHOLD):
    """Match result rows against GT poses and compute the recall report.

    :param rows: list of PoseResultRow.
    :param scene_gt: {im_id: [(obj_id, RigidPose), ...]}.
    :param scene_cameras: {im_id: CameraIntrinsics}.
    :param models: {obj_id: ObjectModel}.
    :param visib: optional {im_id: [visib_fract, ...]} parallel to scene_gt;
        GT instances below visib_threshold are excluded from the denominator.
    :return: PoseErrorReport.
    """
    by_image = {}
    for r in rows:
        by_image.setdefault((r.im_id, r.obj_id), []).append((r.pose(), r.score))

    errors = []
    objects = []
    for im_id, gt_list in scene_gt.items():
        K = scene_cameras[im_id]
        for obj_id in sorted({obj for obj, _ in gt_list}):
            gt_indices = [k for k, (obj, _) in enumerate(gt_list) if obj == obj_id]
            if visib is not None:
                gt_indices = [k for k in gt_indices
                              if visib[im_id][k] >= visib_threshold]
            if not gt_indices:
                continue
            gt_poses = [gt_list[k][1] for k in gt_indices]
            model = models[obj_id]
            ests = by_image.get((im_id, obj_id), [])
            assignment = match_estimates_to_gt(ests, gt_poses, model)
            for j, gt_pose in enumerate(gt_poses):
                if assignment[j] is None:
                    errors.append((np.inf, np.inf, model.diameter))
                else:
                    est_pose = ests[assignment[j]][0]
                    e_mssd = mssd(est_pose, gt_pose, model)
                    try:
                        e_mspd = mspd(est_pose, gt_pose, model, K, K.width)
                    except ValueError:
                        e_mspd = np.inf
                    errors.append((e_mssd, e_mspd, model.diameter))
                objects.append(obj_id)
    return average_recall(errors, objects)
