"""Command-line entry points: run, simulate, evaluate, export-map, localize."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, read_overrides
from .dataio import load_dataset, read_scan_csv, read_tum, scan_to_points, write_tum
from .evaluation import AssociationError, Trajectory, ape_rmse, associate, format_report, rpe_rmse
from .features import extract_scan_features
from .geometry import Pose2
from .loopdetect import DescriptorDatabase, LoopConfig, write_loops_csv
from .mapping import GridMap, MapConfig, export
from .pipeline import InitializationError, Pipeline

log = logging.getLogger("liwslam")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("LIWSLAM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def build_config(args, dataset_dir: Path | None = None) -> Config:
    cfg = Config()
    if dataset_dir is not None and (dataset_dir / "overrides.cfg").exists():
        cfg.apply(read_overrides(dataset_dir / "overrides.cfg"))
    if getattr(args, "config", None):
        cfg.apply(read_overrides(args.config))
    try:
        cfg.apply(getattr(args, "overrides", None) or [])
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from None
    if getattr(args, "no_loop", False):
        cfg.run.loop_closure = False
    if getattr(args, "no_wheel", False):
        cfg.run.wheel_factor = False
    if getattr(args, "no_ground", False):
        cfg.run.ground_factor = False
    if getattr(args, "range_clip", None) is not None:
        cfg.run.range_clip = args.range_clip
    return cfg


def _evaluate_pair(est_stamps, est_poses, gt_stamps, gt_poses, cfg: Config) -> dict:
    est = Trajectory.from_poses(est_stamps, est_poses)
    gt = Trajectory.from_poses(gt_stamps, gt_poses)
    pairs = associate(est, gt, cfg.eval.max_dt)
    out = ape_rmse(pairs, align=cfg.eval.align).as_dict("ape_")
    try:
        out.update(rpe_rmse(pairs, cfg.eval.rpe_delta).as_dict("rpe_"))
    except ValueError:
        pass
    return out


# ----------------------------------------------------------------- run

def cmd_run(args) -> int:
    data = Path(args.dataset)
    if not data.is_dir():
        raise UsageError(f"dataset directory not found: {data}")
    if args.calib is not None and not Path(args.calib).exists():
        raise UsageError(f"calibration file not found: {args.calib}")
    if args.calib is None and not (data / "calib.txt").exists():
        raise UsageError(f"no calib.txt in {data}; pass --calib")
    cfg = build_config(args, data)
    print("# configuration")
    print(cfg.dumps(), end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data, args.calib)
    t0 = time.perf_counter()
    pl = Pipeline(ds.calib, cfg)
    try:
        pl.run(ds)
    except InitializationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    wall = time.perf_counter() - t0

    s, p = pl.frontend_trajectory()
    write_tum(out / "frontend.tum", s, p)
    so, po = pl.optimized_trajectory()
    write_tum(out / "optimized.tum", so, po)
    write_loops_csv(out / "loops.csv", [e.constraint for e in pl.loops])
    with open(out / "loop_timing.csv", "w") as fh:
        fh.write("from_id,to_id,candidates,detect_ms,optimize_ms\n")
        for e in pl.loops:
            fh.write(f"{e.constraint.from_id},{e.constraint.to_id},{e.candidates},{e.detect_ms:.3f},"
                     f"{e.optimize_ms:.3f}\n")
    pl.keyframe_database().save(out / "keyframes.db")
    grid = pl.build_map()
    if grid.log_odds.size:
        export(grid, out / "map.pgm")

    stats = pl.summary()
    stats["wall_s"] = wall
    gt_path = Path(args.gt) if args.gt else data / "groundtruth.tum"
    if gt_path.exists():
        gs, gp = read_tum(gt_path)
        try:
            for tag, (ts, tp) in (("frontend_", (s, p)), ("optimized_", (so, po))):
                stats.update({tag + k: v for k, v in _evaluate_pair(ts, tp, gs, gp, cfg).items()})
        except AssociationError as e:
            log.warning("evaluation against %s failed: %s", gt_path, e)
    (out / "stats.txt").write_text(format_report(stats))
    print("# stats")
    print(format_report(stats), end="")
    return EXIT_OK


# ------------------------------------------------------------ simulate

def cmd_simulate(args) -> int:
    from .scenarios import SCENARIOS, make_scenario
    from .simgen import NoiseConfig, export_dataset

    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {', '.join(sorted(SCENARIOS))}")
    noise = NoiseConfig.zero(args.seed) if args.noise_free else None
    sim = make_scenario(args.scenario, seed=args.seed, noise=noise)
    out = export_dataset(sim, args.out)
    print(f"wrote {args.scenario} (seed {args.seed}) to {out}: {len(sim.dataset.scans)} scans")
    return EXIT_OK


# ------------------------------------------------------------ evaluate

def parse_gates(items) -> dict[str, float]:
    gates = {}
    for it in items or []:
        for part in it.split(","):
            k, sep, v = part.partition("=")
            if not sep:
                raise UsageError(f"gate {part!r} is not key=value")
            try:
                gates[k.strip()] = float(v)
            except ValueError:
                raise UsageError(f"gate {part!r} has a non-numeric threshold") from None
    return gates


GATE_KEYS = {"ape": "ape_trans_rmse", "ape_rot": "ape_rot_rmse", "ape_combined": "ape_combined",
             "rpe": "rpe_trans_rmse", "rpe_rot": "rpe_rot_rmse", "rpe_combined": "rpe_combined"}


def cmd_evaluate(args) -> int:
    cfg = build_config(args)
    if args.max_dt is not None:
        cfg.eval.max_dt = args.max_dt
    if args.delta is not None:
        cfg.eval.rpe_delta = args.delta
    if args.no_align:
        cfg.eval.align = False
    gates = parse_gates(args.gate)
    for k in gates:
        if k not in GATE_KEYS:
            raise UsageError(f"unknown gate {k!r}; choose from {', '.join(GATE_KEYS)}")
    es, ep = read_tum(args.est)
    gs, gp = read_tum(args.gt)
    try:
        report = _evaluate_pair(es, ep, gs, gp, cfg)
    except AssociationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    print(format_report(report), end="")
    if args.csv:
        keys = list(report)
        new = not Path(args.csv).exists()
        with open(args.csv, "a") as fh:
            if new:
                fh.write(",".join(["est"] + keys) + "\n")
            fh.write(",".join([str(args.est)] + [f"{report[k]:.9g}" for k in keys]) + "\n")
    failed = [k for k, thr in gates.items() if report[GATE_KEYS[k]] > thr]
    for k in failed:
        print(f"gate violated: {k}={report[GATE_KEYS[k]]:.6g} > {gates[k]:.6g}")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------- export-map

def cmd_export_map(args) -> int:
    src = Path(args.keyframes)
    if src.is_dir():
        src = src / "keyframes.db"
    if not src.exists():
        raise UsageError(f"keyframe database not found: {src}")
    cfg = build_config(args)
    if args.resolution is not None:
        cfg.map.resolution = args.resolution
    db = DescriptorDatabase.load(src, cfg.loop)
    if not len(db):
        raise UsageError("keyframe database is empty")
    grid = GridMap(cfg.map)
    for e in db.entries:
        grid.integrate_scan(e.points, e.pose)
    meta = export(grid, args.out, args.sigma)
    print(f"wrote {args.out} ({meta.width}x{meta.height}, resolution {meta.resolution})")
    return EXIT_OK


# ------------------------------------------------------------ localize

def cmd_localize(args) -> int:
    cfg = build_config(args)
    path = Path(args.keyframes)
    if path.is_dir():
        path = path / "keyframes.db"
    if not path.exists():
        raise UsageError(f"keyframe database not found: {path}")
    db = DescriptorDatabase.load(path, cfg.loop)
    if not len(db):
        raise UsageError("keyframe database is empty")
    scans = read_scan_csv(args.scan)
    if not scans:
        raise UsageError(f"no scans in {args.scan}")
    if not 0 <= args.index < len(scans):
        raise UsageError(f"scan index {args.index} out of range (file has {len(scans)})")
    scan = scans[args.index]
    t0 = time.perf_counter()
    result = localize(db, scan, cfg)
    ms = 1e3 * (time.perf_counter() - t0)
    if result is None:
        print(f"no match (time_ms={ms:.3f})")
        return EXIT_FAIL
    pose, lc = result
    x, y, yaw = pose.as_array()
    print(f"keyframe={lc.to_id} x={x:.6f} y={y:.6f} yaw={yaw:.6f} matches={lc.match_count} "
          f"icp_rms={lc.post_icp_rms:.6f} time_ms={ms:.3f}")
    return EXIT_OK


def localize(db: DescriptorDatabase, scan, cfg: Config | None = None):
    """Map-frame LiDAR pose of ``scan`` from the best database match, or None."""
    cfg = cfg or Config()
    sp = scan_to_points(scan)
    full = scan.angle_increment * len(scan.ranges) >= 2 * np.pi - 1e-6
    feats = extract_scan_features(sp.points, sp.beam_indices, cfg.features, scan.stamp, closed=full)
    entry = db.make_entry(db.next_id, Pose2(), feats.corners, sp.points, scan.stamp, feats.lines)
    lc = db.detect(entry, exclude_recent=False)
    if lc is None:
        return None
    return db.get(lc.to_id).pose @ lc.relative_pose, lc


# -------------------------------------------------------------- parser

def _add_toggles(p) -> None:
    p.add_argument("--no-loop", action="store_true", help="disable loop closure")
    p.add_argument("--no-wheel", action="store_true", help="disable the wheel odometry factor")
    p.add_argument("--no-ground", action="store_true", help="disable the ground constraint factor")
    p.add_argument("--range-clip", type=float, default=None, metavar="M", help="drop ranges beyond M meters")


def _add_overrides(p) -> None:
    p.add_argument("--config", help="file of key=value overrides")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, e.g. loop.icp_gate=0.05")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liwslam", description="2D LiDAR / IMU / wheel SLAM")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="replay a dataset through the full pipeline")
    p.add_argument("dataset")
    p.add_argument("--calib", default=None)
    p.add_argument("--out", default="out")
    p.add_argument("--gt", default=None, help="ground-truth TUM file (default: dataset/groundtruth.tum)")
    _add_toggles(p)
    _add_overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-free", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="APE/RPE of an estimate against ground truth")
    p.add_argument("est")
    p.add_argument("gt")
    p.add_argument("--max-dt", type=float, default=None)
    p.add_argument("--delta", type=float, default=None, help="RPE arc-length interval (m)")
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--gate", action="append", help="fail when a metric exceeds it, e.g. ape=0.05")
    p.add_argument("--csv", default=None, help="append a CSV row with the report")
    _add_overrides(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-map", help="rebuild and export the occupancy map from a keyframe database")
    p.add_argument("keyframes")
    p.add_argument("--out", default="map.pgm")
    p.add_argument("--resolution", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None, help="smoothing sigma in cells")
    _add_overrides(p)
    p.set_defaults(func=cmd_export_map)

    p = sub.add_parser("localize", help="global localization of one scan against a keyframe database")
    p.add_argument("keyframes")
    p.add_argument("scan", help="scan CSV file")
    p.add_argument("--index", type=int, default=0, help="row of the scan file to use")
    _add_overrides(p)
    p.set_defaults(func=cmd_localize)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    try:
        args, extra = ap.parse_known_args(argv)
        # key=value overrides may also follow options
        stray = [x for x in extra if x.startswith("-") or "=" not in x or not hasattr(args, "overrides")]
        if stray:
            ap.error(f"unrecognized arguments: {' '.join(stray)}")
        if extra:
            args.overrides = list(args.overrides or []) + extra
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
