"""Detection pipeline: instance masks in, pose estimates out.

Per detection: dilate the mask, unproject the depth inside it, estimate
normals, downsample at the model's sampling step, vote, cluster, optionally
refine each top cluster with ICP, pick the cluster with the best fitting
score and optionally disambiguate symmetric poses against the RGB image.

A no-segmentation baseline is also provided: it votes over the whole scene
and reports the top cluster by votes, which is how matching behaves without
a mask to narrow the search space.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import CameraIntrinsics, RigidPose
from .icp import IcpParams, refine_icp
from .metrics import PoseResultRow, load_detections, write_bop_csv
from .ppf_match import MatchParams, cluster_poses, fitting_score, vote_instance
from .ppf_model import PPFModel, load_model
from .rgbd import (
    BinaryMask,
    ObjectModel,
    PointCloud,
    dilate_mask,
    estimate_normals,
    load_models_info,
    load_scene,
    unproject_depth,
    voxel_downsample,
)
from .symsel import select_symmetry

log = logging.getLogger("ppfpose")

MODEL_FILE_PATTERN = "obj_{:06d}.ppfm"


@dataclass
class PipelineConfig:
    match: MatchParams = field(default_factory=MatchParams)
    icp: IcpParams = field(default_factory=IcpParams)
    refine: bool = True
    sym_select: bool = True
    threads: int = 1
    fixed_time: bool = False
    full_scene: bool = False


def load_ppf_models(models_dir, obj_ids):
    """Load built model files for the given ids; also picks up symmetry
    metadata from a models_info.json sitting next to them when present."""
    models = {}
    for obj_id in sorted(set(obj_ids)):
        path = os.path.join(models_dir, MODEL_FILE_PATTERN.format(obj_id))
        if not os.path.exists(path):
            raise FileNotFoundError(f"no built model for object id {obj_id} ({path})")
        models[obj_id] = load_model(path)
    symmetries = {obj_id: [RigidPose.identity()] for obj_id in models}
    info_path = os.path.join(models_dir, "models_info.json")
    if os.path.exists(info_path):
        info = load_models_info(models_dir)
        for obj_id in models:
            if obj_id in info:
                symmetries[obj_id] += info[obj_id]["symmetries_discrete"]
    return models, symmetries


def prepare_instance_cloud(depth, K, mask: BinaryMask, model: PPFModel,
                           dilation_px: float):
    """Masked, oriented, downsampled cloud for one instance; None when empty."""
    region = dilate_mask(mask, dilation_px)
    cloud = unproject_depth(depth, K, region)
    if len(cloud) == 0:
        return None
    cloud = estimate_normals(depth, K, cloud)
    if len(cloud) == 0:
        return None
    cloud = voxel_downsample(cloud, model.dist_step)
    if len(cloud) < 2:
        return None
    return cloud


def prepare_scene_cloud(depth, K, model: PPFModel):
    cloud = unproject_depth(depth, K)
    if len(cloud) == 0:
        return None
    cloud = estimate_normals(depth, K, cloud)
    cloud = voxel_downsample(cloud, model.dist_step)
    return cloud if len(cloud) >= 2 else None


@dataclass
class InstanceEstimate:
    pose: RigidPose
    score: float
    votes: int


def estimate_instance_pose(cloud: PointCloud, model: PPFModel,
                           config: PipelineConfig):
    """Vote, cluster, refine and score; best cluster by fitting score."""
    hypotheses = vote_instance(cloud, model, config.match)
    if not hypotheses:
        return None
    clusters = cluster_poses(hypotheses, model.diameter, config.match)
    tree = cKDTree(cloud.points)
    for cluster in clusters:
        pose = cluster.pose
        if config.refine:
            try:
                pose = refine_icp(pose, model.cloud.points, cloud,
                                  model.diameter, config.icp).pose
            except ValueError:
                pass   # unrefinable cluster keeps its voted pose
        cluster.pose = pose
        cluster.fit = fitting_score(pose, model, cloud, tree)
    best = max(clusters, key=lambda c: (c.fit, c.total_votes))
    return InstanceEstimate(best.pose, best.fit, best.total_votes)


def baseline_vote_estimate(cloud: PointCloud, model: PPFModel,
                           match: MatchParams, icp: IcpParams | None = None):
    """No-segmentation baseline: top cluster by votes over the given cloud."""
    hypotheses = vote_instance(cloud, model, match)
    if not hypotheses:
        return None
    clusters = cluster_poses(hypotheses, model.diameter, match)
    best = clusters[0]
    pose = best.pose
    if icp is not None:
        try:
            pose = refine_icp(pose, model.cloud.points, cloud,
                              model.diameter, icp).pose
        except ValueError:
            pass
    return InstanceEstimate(pose, fitting_score(pose, model, cloud), best.total_votes)


def _mask_dilation_px(detection, config) -> float:
    if detection.bbox is None:
        return 0.0
    _, _, w, h = detection.bbox
    return config.match.mask_dilation * float(np.hypot(w, h))


def run_detect(scene_dir, detections_path, models_dir, out_path,
               config: PipelineConfig | None = None):
    """Run the pipeline over a detections file and write the results CSV.

    Detections whose masked cloud comes up empty are skipped with a warning.
    The time column carries per-image wall seconds (identical across the
    image's rows), or -1 with config.fixed_time for byte-stable output.
    """
    if config is None:
        config = PipelineConfig()
    detections = load_detections(detections_path)
    rows = []
    if not detections:
        write_bop_csv(out_path, rows)
        return rows
    models, symmetries = load_ppf_models(models_dir, [d.obj_id for d in detections])

    image_order = []
    for d in detections:
        if d.im_id not in image_order:
            image_order.append(d.im_id)

    for im_id in image_order:
        t0 = time.perf_counter()
        depth, rgb, K = load_scene(scene_dir, im_id)
        image_dets = [d for d in detections if d.im_id == im_id]

        def process(det):
            model = models[det.obj_id]
            if config.full_scene:
                cloud = prepare_scene_cloud(depth, K, model)
                if cloud is None:
                    return None
                return baseline_vote_estimate(cloud, model, config.match,
                                              config.icp if config.refine else None)
            cloud = prepare_instance_cloud(depth, K, det.load_mask(), model,
                                           _mask_dilation_px(det, config))
            if cloud is None:
                log.warning("empty masked cloud for obj %d in image %d; skipped",
                            det.obj_id, det.im_id)
                return None
            est = estimate_instance_pose(cloud, model, config)
            if est is None:
                log.warning("no pose hypotheses for obj %d in image %d; skipped",
                            det.obj_id, det.im_id)
                return None
            if config.sym_select and rgb is not None and len(symmetries[det.obj_id]) > 1:
                sym_model = ObjectModel(det.obj_id, model.cloud, model.diameter,
                                        list(symmetries[det.obj_id]))
                est.pose = select_symmetry(rgb, sym_model, est.pose, K,
                                           point_spacing=model.dist_step)
            return est

        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                results = list(pool.map(process, image_dets))
        else:
            results = [process(d) for d in image_dets]
        elapsed = time.perf_counter() - t0
        time_col = -1.0 if config.fixed_time else elapsed
        for det, est in zip(image_dets, results):
            if est is None:
                continue
            rows.append(PoseResultRow.from_pose(det.scene_id, det.im_id,
                                                det.obj_id, est.score,
                                                est.pose, time_col))
    write_bop_csv(out_path, rows)
    return rows
