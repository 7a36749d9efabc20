"""Command-line front end.

Subcommands wrap one pipeline or tooling operation each:

  build-model      build pair-feature model files from PLY object models
  detect           run the pose pipeline over a detections file
  eval-pose        score a results CSV against scene ground truth (prints AR)
  eval-map         mask-detection mAP at an IoU threshold
  select-detector  pick the candidate detections file with the best mAP
  synth-scenes     generate a synthetic BOP-layout scene with ground truth
  compose-train    build a cut-paste training set from crops and backgrounds

Exit code 0 on success; any error prints a one-line diagnostic and exits 1.
Set PPF_LOG=DEBUG|INFO|WARNING for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import cv2
import numpy as np

from .geom import CameraIntrinsics
from .icp import IcpParams
from .metrics import (
    CandidateModel,
    evaluate_pose_rows,
    load_detections,
    map_at_iou,
    read_bop_csv,
    select_best,
)
from .pipeline import MODEL_FILE_PATTERN, PipelineConfig, run_detect
from .ppf_match import MatchParams
from .ppf_model import build_model, save_model
from .rgbd import ColorImage, load_object_model, load_scene, load_scene_gt, load_scene_gt_info
from .synth import (
    SceneSpec,
    build_training_set,
    generate_scene,
    make_box_model,
    make_cylinder_model,
    make_plane_model,
    make_sphere_model,
    write_bop_scene_sequence,
    write_models_dir,
)


def _cmd_build_model(args):
    import shutil

    os.makedirs(args.out, exist_ok=True)
    if args.obj_id:
        obj_ids = args.obj_id
    else:
        obj_ids = sorted(int(f[4:10]) for f in os.listdir(args.models)
                         if f.startswith("obj_") and f.endswith(".ply"))
    if not obj_ids:
        raise ValueError(f"no obj_*.ply files in {args.models}")
    for obj_id in obj_ids:
        model = load_object_model(args.models, obj_id)
        ppf = build_model(model, tau_d=args.tau_d, n_angle=args.n_angle)
        out_path = os.path.join(args.out, MODEL_FILE_PATTERN.format(obj_id))
        save_model(out_path, ppf)
        print(f"built {out_path}: {ppf.n_points} points, {ppf.n_entries} table entries")
    info_path = os.path.join(args.models, "models_info.json")
    if os.path.exists(info_path):
        shutil.copy(info_path, os.path.join(args.out, "models_info.json"))


def _cmd_detect(args):
    config = PipelineConfig(
        match=MatchParams(mask_dilation=args.mask_dilation),
        icp=IcpParams(),
        refine=not args.no_refine,
        sym_select=not args.no_sym,
        threads=args.threads,
        fixed_time=args.fixed_time,
        full_scene=args.full_scene,
    )
    if args.print_config:
        dump = {
            "match": vars(config.match), "icp": vars(config.icp),
            "refine": config.refine, "sym_select": config.sym_select,
            "threads": config.threads, "fixed_time": config.fixed_time,
            "full_scene": config.full_scene,
        }
        print(json.dumps(dump, indent=1, default=float))
    rows = run_detect(args.scene, args.detections, args.models, args.out, config)
    print(f"wrote {len(rows)} estimates to {args.out}")


def _cmd_eval_pose(args):
    rows = read_bop_csv(args.results)
    scene_gt = load_scene_gt(args.scene)
    visib = load_scene_gt_info(args.scene)
    cameras = {}
    for im_id in scene_gt:
        _, _, K = load_scene(args.scene, im_id)
        cameras[im_id] = K
    obj_ids = sorted({obj for gts in scene_gt.values() for obj, _ in gts})
    models = {i: load_object_model(args.models, i) for i in obj_ids}
    report = evaluate_pose_rows(rows, scene_gt, cameras, models, visib,
                                args.visib_thresh)
    print(f"AR {report.ar:.4f}")
    for obj_id, ar in sorted(report.per_object_ar.items()):
        print(f"  obj {obj_id}: AR {ar:.4f}")


def _cmd_eval_map(args):
    preds = load_detections(args.preds)
    gts = load_detections(args.gt)
    per_class, m = map_at_iou(preds, gts, args.iou, args.class_agnostic)
    print(f"mAP {m:.4f}")
    for c, ap in sorted(per_class.items()):
        print(f"  class {c}: AP {ap:.4f}")


def _cmd_select_detector(args):
    candidates = []
    for spec in args.candidate:
        name, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--candidate must look like NAME=PATH, got {spec!r}")
        candidates.append(CandidateModel(name, load_detections(path)))
    gts = load_detections(args.gt)
    winner, scores = select_best(candidates, gts, args.iou, args.class_agnostic)
    for name, score in scores.items():
        print(f"  {name}: mAP {score:.4f}")
    print(winner)


_SHAPE_FACTORIES = {
    "box": lambda oid: make_box_model(oid, (0.12, 0.09, 0.045), 0.002),
    "cylinder": lambda oid: make_cylinder_model(oid, 0.035, 0.11, 0.002),
    "sphere": lambda oid: make_sphere_model(oid, 0.045, 0.002),
}


def _cmd_synth_scenes(args):
    shapes = args.shapes.split(",")
    bad = [s for s in shapes if s not in _SHAPE_FACTORIES]
    if bad:
        raise ValueError(f"unknown shapes {bad}; choose from {sorted(_SHAPE_FACTORIES)}")
    models = [_SHAPE_FACTORIES[s](i + 1) for i, s in enumerate(shapes)]
    K = CameraIntrinsics(args.focal, args.focal, args.width / 2 - 0.5,
                         args.height / 2 - 0.5, args.width, args.height)
    clutter = []
    if args.clutter_plane:
        plane = make_plane_model(100, 0.9, 0.7, 0.003)
        from .geom import RigidPose
        clutter.append((plane, RigidPose.identity().compose(
            RigidPose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, args.plane_z])))))
    scenes = {}
    rng = np.random.default_rng(args.seed)
    for im_id in range(args.n_images):
        n_obj = int(rng.integers(args.min_objects, args.max_objects + 1))
        spec = SceneSpec(models, n_obj, K, depth_noise=args.noise_mm * 1e-3,
                         seed=int(rng.integers(2 ** 31)),
                         z_range=(args.z_min, args.z_max), clutter=clutter)
        scenes[im_id] = generate_scene(spec)
    write_models_dir(os.path.join(args.out, "models"), models)
    scene_dir = write_bop_scene_sequence(os.path.join(args.out, "test"), scenes)
    print(f"wrote {args.n_images} images to {scene_dir}")


def _load_crops(crops_dir):
    crops = []
    for name in sorted(os.listdir(crops_dir)):
        if not name.lower().endswith(".png"):
            continue
        class_id = int(name.split("_")[0])
        img = cv2.imread(os.path.join(crops_dir, name), cv2.IMREAD_UNCHANGED)
        if img is None or img.ndim != 3 or img.shape[2] != 4:
            raise ValueError(f"crop {name} must be an RGBA PNG")
        rgba = cv2.cvtColor(img, cv2.COLOR_BGRA2RGBA)
        crops.append((rgba, class_id))
    if not crops:
        raise ValueError(f"no crop PNGs found in {crops_dir}; "
                         "files must be named <classid>_<anything>.png")
    return crops


def _load_backgrounds(backgrounds_dir):
    out = []
    for name in sorted(os.listdir(backgrounds_dir)):
        if not name.lower().endswith((".png", ".jpg", ".jpeg")):
            continue
        img = cv2.imread(os.path.join(backgrounds_dir, name), cv2.IMREAD_COLOR)
        if img is None:
            continue
        out.append(ColorImage(cv2.cvtColor(img, cv2.COLOR_BGR2RGB)))
    if not out:
        raise ValueError(f"no background images found in {backgrounds_dir}")
    return out


def _cmd_compose_train(args):
    crops = _load_crops(args.crops)
    backgrounds = _load_backgrounds(args.backgrounds)
    summary = build_training_set(crops, backgrounds, args.out,
                                 n_images=args.n_images,
                                 val_fraction=args.val_fraction,
                                 augment_fraction=args.augment_fraction,
                                 seed=args.seed)
    print(json.dumps(summary))


def build_parser():
    p = argparse.ArgumentParser(prog="ppfpose", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-model", help="build pair-feature model files")
    b.add_argument("--models", required=True, help="directory with obj_*.ply (+ models_info.json)")
    b.add_argument("--out", required=True)
    b.add_argument("--obj-id", type=int, action="append", default=[])
    b.add_argument("--tau-d", type=float, default=0.05)
    b.add_argument("--n-angle", type=int, default=30)
    b.set_defaults(func=_cmd_build_model)

    d = sub.add_parser("detect", help="estimate poses for a detections file")
    d.add_argument("--scene", required=True)
    d.add_argument("--detections", required=True)
    d.add_argument("--models", required=True, help="directory with built .ppfm files")
    d.add_argument("--out", required=True)
    d.add_argument("--no-refine", action="store_true")
    d.add_argument("--no-sym", action="store_true")
    d.add_argument("--threads", type=int, default=1)
    d.add_argument("--fixed-time", action="store_true",
                   help="write -1 in the time column (byte-stable output)")
    d.add_argument("--mask-dilation", type=float, default=0.05)
    d.add_argument("--full-scene", action="store_true",
                   help="ignore masks; vote over the whole scene (baseline)")
    d.add_argument("--print-config", action="store_true")
    d.set_defaults(func=_cmd_detect)

    e = sub.add_parser("eval-pose", help="average recall of a results CSV")
    e.add_argument("--results", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--models", required=True, help="directory with obj_*.ply")
    e.add_argument("--visib-thresh", type=float, default=0.1)
    e.set_defaults(func=_cmd_eval_pose)

    m = sub.add_parser("eval-map", help="mask-detection mAP")
    m.add_argument("--preds", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--iou", type=float, default=0.5)
    m.add_argument("--class-agnostic", action="store_true")
    m.set_defaults(func=_cmd_eval_map)

    s = sub.add_parser("select-detector", help="pick the best candidate by mAP")
    s.add_argument("--gt", required=True)
    s.add_argument("--candidate", action="append", required=True,
                   metavar="NAME=PATH")
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--class-agnostic", action="store_true")
    s.set_defaults(func=_cmd_select_detector)

    g = sub.add_parser("synth-scenes", help="generate a synthetic BOP-layout scene")
    g.add_argument("--out", required=True)
    g.add_argument("--n-images", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=3)
    g.add_argument("--noise-mm", type=float, default=2.0)
    g.add_argument("--width", type=int, default=640)
    g.add_argument("--height", type=int, default=480)
    g.add_argument("--focal", type=float, default=572.4)
    g.add_argument("--z-min", type=float, default=0.5)
    g.add_argument("--z-max", type=float, default=1.0)
    g.add_argument("--shapes", default="box,cylinder,sphere")
    g.add_argument("--clutter-plane", action="store_true")
    g.add_argument("--plane-z", type=float, default=1.25)
    g.set_defaults(func=_cmd_synth_scenes)

    c = sub.add_parser("compose-train", help="build a cut-paste training set")
    c.add_argument("--crops", required=True)
    c.add_argument("--backgrounds", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--n-images", type=int, default=10000)
    c.add_argument("--val-fraction", type=float, default=0.1)
    c.add_argument("--augment-fraction", type=float, default=0.7)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_compose_train)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("PPF_LOG", "WARNING").upper())
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
