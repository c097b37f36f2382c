"""Command-line surface.

Subcommands cover the offline stage (gen-scene, gen-views, gen-queries),
the online stage (localize), target geolocalization (track), and scoring
(evaluate). All randomness flows from explicit --seed flags; identical
invocations produce byte-identical outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluate, geom, pipeline, scene, tracking, viewgen
from .dataio import PipelineConfig
from .errors import AeroLocError, DataError
from .geom import Intrinsics, Pose
from .scene import Heightfield, SceneSpec
from .tracking import CameraRig, TargetObservation, TargetTrack
from .viewgen import ViewGridSpec

USAGE_ERROR, DATA_ERROR, PIPELINE_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code pinned to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_ERROR)


def _add_camera_args(p: argparse.ArgumentParser):
    p.add_argument("--fx", type=float, default=280.0)
    p.add_argument("--fy", type=float, default=280.0)
    p.add_argument("--cx", type=float, default=None, help="default: width/2")
    p.add_argument("--cy", type=float, default=None, help="default: height/2")
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)


def _camera(args) -> Intrinsics:
    cx = args.cx if args.cx is not None else args.width / 2.0
    cy = args.cy if args.cy is not None else args.height / 2.0
    return Intrinsics(fx=args.fx, fy=args.fy, cx=cx, cy=cy,
                      width=args.width, height=args.height)


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = PipelineConfig.load(args.config)
    if getattr(args, "no_prior", False):
        from dataclasses import replace
        cfg = replace(cfg, use_prior=False)
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace
        cfg = replace(cfg, ransac_seed=args.seed)
    return cfg


def _parse_levels(text: str):
    return dataio._parse_levels(text)


def cmd_gen_scene(args) -> int:
    spec = SceneSpec(extent=args.extent, amplitude=args.amplitude,
                     building_count=args.buildings,
                     footprint_range=(args.footprint_min, args.footprint_max),
                     height_range=(args.building_min, args.building_max),
                     seed=args.seed, cell=args.cell)
    hf = scene.generate_scene(spec)
    hf.save(args.out)
    print(f"scene: {hf.nx}x{hf.ny} nodes, cell {hf.cell:g} m, "
          f"heights [{hf.heights.min():.2f}, {hf.heights.max():.2f}] m -> {args.out}")
    return 0


def cmd_gen_views(args) -> int:
    hf = Heightfield.load(args.scene)
    bounds = hf.bounds if args.bounds is None else tuple(float(v) for v in args.bounds.split(","))
    spec = ViewGridSpec(levels=_parse_levels(args.levels),
                        pitches=tuple(float(v) for v in args.pitches.split(",")),
                        yaw_interval_deg=args.yaw_interval,
                        bounds=bounds,
                        altitude_mode="agl" if args.agl else "absolute")
    manifest = viewgen.render_database(hf, spec, _camera(args), args.out, jobs=args.jobs)
    print(f"rendered {len(manifest.records)} database views -> {args.out}")
    return 0


def cmd_gen_queries(args) -> int:
    hf = Heightfield.load(args.scene)
    records = dataio.generate_queries(
        hf, _camera(args), args.out, count=args.count, seed=args.seed,
        alt_range=(args.alt_min, args.alt_max),
        pitch_range=(args.pitch_min, args.pitch_max),
        prior_sigma_deg=args.prior_sigma)
    print(f"rendered {len(records)} queries -> {args.out}")
    return 0


def cmd_localize(args) -> int:
    dataset = dataio.load_manifest(args.dataset)
    cfg = _pipeline_config(args)
    results = pipeline.localize_dataset(dataset, cfg, jobs=args.jobs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = ["query,status,qw,qx,qy,qz,tx,ty,tz,n_corr,n_inliers,"
             "iterations,early_stop,gravity_deviation_deg"]
    n_ok = 0
    for res in results:
        if res.estimate is None:
            lines.append(f"{res.name},{res.failure or 'failed'},,,,,,,,"
                         f"{res.n_correspondences},,,,")
            continue
        n_ok += 1
        est = res.estimate
        q = geom.quat_from_rotation(est.pose.rotation)
        t = est.pose.translation
        dev = "" if est.gravity_deviation_deg is None else f"{est.gravity_deviation_deg:.6f}"
        lines.append(
            f"{res.name},ok,{q[0]:.9f},{q[1]:.9f},{q[2]:.9f},{q[3]:.9f},"
            f"{t[0]:.6f},{t[1]:.6f},{t[2]:.6f},{res.n_correspondences},"
            f"{len(est.inliers)},{est.iterations_run},"
            f"{int(est.early_stopped_by_gravity)},{dev}")
    (out_dir / "estimates.csv").write_text("\n".join(lines) + "\n")

    gt_present = [q for q in dataset.queries if q.gt_pose is not None]
    if gt_present:
        errors = []
        for q, res in zip(dataset.queries, results):
            if q.gt_pose is None or res.estimate is None:
                errors.append(None)
            else:
                errors.append(evaluate.pose_error(res.estimate.pose, q.gt_pose))
        pct = evaluate.benchmark(errors)
        lines = ["variant,threshold_m,threshold_deg,success_pct,n_queries,n_failed"]
        n_failed = sum(1 for e in errors if e is None)
        for (tt, tr), p in zip(evaluate.DEFAULT_THRESHOLDS, pct):
            lines.append(f"default,{tt:g},{tr:g},{p:.2f},{len(errors)},{n_failed}")
        (out_dir / "benchmark.csv").write_text("\n".join(lines) + "\n")
        print(f"localized {n_ok}/{len(results)} queries; "
              f"success {pct} at {evaluate.DEFAULT_THRESHOLDS}")
    else:
        print(f"localized {n_ok}/{len(results)} queries (no ground truth)")
    return 0


def cmd_track(args) -> int:
    hf = Heightfield.load(args.scene)
    rig = _load_rig(args.rig)
    obs_rows = tracking.load_observations(args.obs)
    poses = _load_timed_poses(args.poses)
    times, points = [], []
    for t, pixel in obs_rows:
        pose = _nearest_pose(poses, t, max_dt=0.5)
        if pose is None:
            continue
        obs = TargetObservation(timestamp=t, zoom_pixel=pixel, wide_pose=pose)
        try:
            hit = tracking.localize_target(obs, rig, hf)
        except tracking.RayMiss:
            continue
        times.append(t)
        points.append(hit)
    if not times:
        raise tracking.NoMatchedSamples("no observation produced a ground point")
    track = TargetTrack(np.array(times), np.stack(points))
    track.save_csv(args.out)
    print(f"traced {len(track)} / {len(obs_rows)} observations -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    if args.experiment:
        cfg = _load_experiment_config(args.experiment)
        report = evaluate.run_experiment(cfg)
        print(Path(report.summary_path).read_text().rstrip())
        return 0
    # Plain benchmark over a localized dataset.
    dataset = dataio.load_manifest(args.dataset)
    cfg = _pipeline_config(args)
    rep = evaluate.evaluate_variant("default", dataset, cfg,
                                    evaluate.DEFAULT_THRESHOLDS,
                                    oracle_stride=args.oracle_stride,
                                    compute_oracle=not args.no_oracle,
                                    jobs=args.jobs, out_dir=Path(args.out))
    buckets = " / ".join(f"{p:.2f}" for p in rep.success_pct)
    print(f"success {buckets} at {evaluate.DEFAULT_THRESHOLDS}; "
          f"{rep.n_failed}/{rep.n_queries} failed")
    if rep.recall_at_1 is not None:
        print(f"retrieval R@1 {rep.recall_at_1:.2f} "
              f"R@{cfg.retrieval_topk} {rep.recall_at_k:.2f} "
              f"P@{cfg.retrieval_topk} {rep.precision_at_k:.2f}")
    return 0


def _load_rig(path) -> CameraRig:
    items = dataio.parse_config(path)

    def cam(prefix):
        return Intrinsics(fx=float(items[f"{prefix}.fx"]), fy=float(items[f"{prefix}.fy"]),
                          cx=float(items[f"{prefix}.cx"]), cy=float(items[f"{prefix}.cy"]),
                          width=int(items[f"{prefix}.width"]), height=int(items[f"{prefix}.height"]))

    q = [float(v) for v in items["rig.q"].split(",")]
    t = [float(v) for v in items["rig.t"].split(",")]
    rel = Pose(geom.rotation_from_quat(q), t)
    return CameraRig(wide=cam("wide"), zoom=cam("zoom"), zoom_from_wide=rel)


def _load_timed_poses(path) -> list[tuple[float, Pose]]:
    out = []
    from .errors import ParseError
    p = Path(path)
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(p, lineno, "expected `timestamp qw qx qy qz tx ty tz`")
        vals = [float(v) for v in parts]
        out.append((vals[0], Pose(geom.rotation_from_quat(vals[1:5]), vals[5:8])))
    return out


def _nearest_pose(poses: list[tuple[float, Pose]], t: float, max_dt: float):
    if not poses:
        return None
    best = min(poses, key=lambda item: abs(item[0] - t))
    return best[1] if abs(best[0] - t) <= max_dt else None


def _load_experiment_config(path) -> evaluate.ExperimentConfig:
    items = dataio.parse_config(path)
    root = Path(path).parent
    variants = []
    order = []
    for key in items:
        if key.startswith("variant."):
            name = key.split(".")[1]
            if name not in order:
                order.append(name)
    for name in order:
        variants.append(evaluate.ExperimentVariant(
            name=name,
            levels=dataio._parse_levels(items[f"variant.{name}.levels"]),
            pitches=tuple(float(v) for v in items[f"variant.{name}.pitches"].split(",")),
            yaw_interval_deg=float(items.get(f"variant.{name}.yaw_interval_deg", "45"))))
    return evaluate.ExperimentConfig(
        scene_path=root / items["scene"],
        queries_path=root / items["queries"],
        out_dir=root / items.get("out", "experiment"),
        variants=variants,
        pipeline_cfg=PipelineConfig.from_items(items),
        oracle_stride=int(items.get("experiment.oracle_stride", "8")),
        compute_oracle=dataio._parse_bool(items.get("experiment.oracle", "true")),
        jobs=int(items.get("experiment.jobs", "1")))


def build_parser() -> _Parser:
    parser = _Parser(prog="aeroloc",
                     description="synthetic-view 6-DoF aerial localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a procedural heightfield scene")
    p.add_argument("--extent", type=float, default=300.0)
    p.add_argument("--amplitude", type=float, default=6.0)
    p.add_argument("--buildings", type=int, default=25)
    p.add_argument("--footprint-min", type=float, default=18.0)
    p.add_argument("--footprint-max", type=float, default=45.0)
    p.add_argument("--building-min", type=float, default=12.0)
    p.add_argument("--building-max", type=float, default=35.0)
    p.add_argument("--cell", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("gen-views", help="render the reference view database")
    p.add_argument("--scene", required=True)
    p.add_argument("--levels", default="100:50,150:75",
                   help="comma list of altitude:spacing pairs")
    p.add_argument("--pitches", default="0,45")
    p.add_argument("--yaw-interval", type=float, default=45.0)
    p.add_argument("--bounds", default=None, help="xmin,ymin,xmax,ymax (default: scene)")
    p.add_argument("--agl", action="store_true",
                   help="interpret level altitudes as height above terrain")
    p.add_argument("--jobs", type=int, default=1)
    _add_camera_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_views)

    p = sub.add_parser("gen-queries", help="render a random query set with GT + priors")
    p.add_argument("--scene", required=True)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alt-min", type=float, default=50.0)
    p.add_argument("--alt-max", type=float, default=200.0)
    p.add_argument("--pitch-min", type=float, default=15.0)
    p.add_argument("--pitch-max", type=float, default=70.0)
    p.add_argument("--prior-sigma", type=float, default=2.0)
    _add_camera_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_queries)

    p = sub.add_parser("localize", help="run the online pipeline over a dataset")
    p.add_argument("--dataset", required=True, help="dataset config file")
    p.add_argument("--config", default=None, help="pipeline config file")
    p.add_argument("--seed", type=int, default=None, help="override ransac.seed")
    p.add_argument("--no-prior", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("track", help="geolocate ground targets via ray tracing")
    p.add_argument("--scene", required=True)
    p.add_argument("--rig", required=True, help="rig config file")
    p.add_argument("--obs", required=True, help="observation file: timestamp px py")
    p.add_argument("--poses", required=True, help="wide poses: timestamp qw..tz")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", help="benchmark a dataset or run an ablation")
    p.add_argument("--dataset", default=None)
    p.add_argument("--experiment", default=None, help="experiment config file")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-prior", action="store_true")
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--oracle-stride", type=int, default=8)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="eval_out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command == "evaluate" and not (args.dataset or args.experiment):
        parser.print_usage(sys.stderr)
        sys.stderr.write("error: evaluate needs --dataset or --experiment\n")
        return USAGE_ERROR
    try:
        return args.func(args)
    except DataError as e:
        sys.stderr.write(f"data error: {e}\n")
        return DATA_ERROR
    except AeroLocError as e:
        sys.stderr.write(f"pipeline error: {e}\n")
        return PIPELINE_ERROR
    except FileNotFoundError as e:
        sys.stderr.write(f"data error: {e}\n")
        return DATA_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
