"""Scenario generation and pipeline runs shared across test modules.

Runs are cached per process so the end-to-end modules and the acceptance
suite pay for each simulation once.
"""
from __future__ import annotations

import functools
import math
import time

import numpy as np

from liwslam.config import Config
from liwslam.dataio import scan_to_points
from liwslam.evaluation import Trajectory, ape_rmse, associate
from liwslam.geometry import Pose2
from liwslam.mapping import GridMap
from liwslam.pipeline import Pipeline
from liwslam.scenarios import make_scenario
from liwslam.simgen import NoiseConfig, ScanParams, lidar_pose2, raycast_scan, square_room


@functools.lru_cache(maxsize=None)
def scenario(name: str, seed: int = 0, noise_free: bool = False):
    return make_scenario(name, seed=seed, noise=NoiseConfig.zero(seed) if noise_free else None)


@functools.lru_cache(maxsize=None)
def run(name: str, seed: int = 0, noise_free: bool = False, **overrides):
    """(sim, pipeline, wall seconds) for one scenario replay."""
    sim = scenario(name, seed, noise_free)
    cfg = Config().apply(list(sim.overrides.items()))
    cfg.apply([(k.replace("__", "."), v) for k, v in overrides.items()])
    t0 = time.perf_counter()
    pl = Pipeline(sim.calib, cfg).run(sim.dataset)
    return sim, pl, time.perf_counter() - t0


def gt_trajectory(sim) -> Trajectory:
    return Trajectory.from_poses(sim.gt_stamps, sim.gt_poses)


def ape(sim, stamps_poses, align: bool = True) -> float:
    est = Trajectory.from_poses(*stamps_poses)
    return ape_rmse(associate(est, gt_trajectory(sim)), align=align).trans_rmse


def gt_lidar(sim, t: float):
    return lidar_pose2(sim.traj.pose(t), sim.calib)


def loop_errors(sim, pl) -> list[tuple[float, float]]:
    """(translation m, rotation rad) error of every accepted loop constraint."""
    stamps = pl.graph.stamps
    out = []
    for ev in pl.loops:
        c = ev.constraint
        true = gt_lidar(sim, stamps[c.to_id]).inverse() @ gt_lidar(sim, stamps[c.from_id])
        e = c.relative_pose
        out.append((float(np.linalg.norm(e.xy - true.xy)), abs(math.remainder(e.yaw - true.yaw, 2 * math.pi))))
    return out


def room_grid(size: float = 4.0, n: int = 5, seed: int = 0, cfg=None):
    """Noise-free square-room grid built from an n x n lattice of scan poses."""
    world = square_room(size)
    grid = GridMap(cfg)
    rng = np.random.default_rng(seed)
    span = 0.3 * size
    for x in np.linspace(-span, span, n):
        for y in np.linspace(-span, span, n):
            pose = Pose2(float(rng.uniform(-math.pi, math.pi)), (x, y))
            scan, _ = raycast_scan(world, pose, ScanParams(n_beams=1080))
            grid.integrate_scan(scan_to_points(scan).points, pose)
    return grid
