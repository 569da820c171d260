"""Synthetic worlds, trajectories and sensor streams.

Trajectories are chains of constant-twist segments.  With the ``pulse``
profile each segment's path parameter accelerates through triangular
pulses that return to zero acceleration at every scan period boundary.
Acceleration is then piecewise linear with knots on the IMU grid, so the
midpoint preintegration between scan stamps reproduces ground truth up
to rounding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import (Calibration, Dataset, ImuStream, LaserScan, WheelStream, fmt_stamp, quantize_stamp,
                     save_dataset, write_tum)
from .geometry import Pose2, Pose3, compose, exp_so3, log_so3, rot2, skew, wrap_angle
from .preintegration import State

IMU_TICK = 0.005


# ----------------------------------------------------------------- worlds

@dataclass
class World:
    walls: np.ndarray
    wall_ids: np.ndarray
    name: str = "world"

    def __post_init__(self):
        self.walls = np.asarray(self.walls, dtype=float).reshape(-1, 4)
        self.wall_ids = np.asarray(self.wall_ids, dtype=int).reshape(-1)
        lengths = np.linalg.norm(self.walls[:, 2:] - self.walls[:, :2], axis=1)
        if np.any(lengths <= 1e-9):
            raise ValueError("degenerate wall segment")

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.walls.reshape(-1, 2)
        return pts.min(axis=0), pts.max(axis=0)

    def contains(self, xy) -> bool:
        lo, hi = self.bounds
        xy = np.asarray(xy, dtype=float)
        return bool(np.all(xy > lo) and np.all(xy < hi))


class WorldBuilder:
    def __init__(self, name: str):
        self.name = name
        self.segs: list[tuple[float, float, float, float]] = []
        self.ids: list[int] = []

    def segment(self, a, b) -> "WorldBuilder":
        self.segs.append((a[0], a[1], b[0], b[1]))
        self.ids.append(len(self.ids))
        return self

    def polyline(self, pts, closed: bool = False) -> "WorldBuilder":
        pts = [tuple(map(float, p)) for p in pts]
        for a, b in zip(pts[:-1], pts[1:]):
            self.segment(a, b)
        if closed:
            self.segment(pts[-1], pts[0])
        return self

    def box(self, cx, cy, w, h, yaw: float = 0.0) -> "WorldBuilder":
        R = rot2(yaw)
        c = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]]) @ R.T + [cx, cy]
        return self.polyline(c, closed=True)

    def ngon(self, cx, cy, r, n) -> "WorldBuilder":
        ang = np.arange(n) * 2 * math.pi / n
        return self.polyline(np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang)]), closed=True)

    def build(self) -> World:
        return World(np.array(self.segs), np.array(self.ids), self.name)


def square_room(size: float = 4.0, name: str = "square_room") -> World:
    h = size / 2
    return WorldBuilder(name).polyline([(-h, -h), (h, -h), (h, h), (-h, h)], closed=True).build()


# --------------------------------------------------------------- ray cast

@dataclass
class ScanParams:
    n_beams: int = 360
    angle_min: float = -math.pi
    range_min: float = 0.1
    range_max: float = 30.0

    @property
    def angle_increment(self) -> float:
        return 2 * math.pi / self.n_beams

    @property
    def angle_max(self) -> float:
        return self.angle_min + (self.n_beams - 1) * self.angle_increment


def cast_rays(world: World, origin, angles) -> tuple[np.ndarray, np.ndarray]:
    """Nearest wall distance and wall id per ray (inf / -1 on a miss)."""
    o = np.asarray(origin, dtype=float)
    d = np.column_stack([np.cos(angles), np.sin(angles)])
    A = world.walls[:, :2]
    e = world.walls[:, 2:] - A
    ao = A - o
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ao[None, :, 0] * e[None, :, 1] - ao[None, :, 1] * e[None, :, 0]) / denom
        u = (ao[None, :, 0] * d[:, None, 1] - ao[None, :, 1] * d[:, None, 0]) / denom
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= -1e-12) & (u <= 1 + 1e-12)
    t = np.where(ok, t, np.inf)
    k = np.argmin(t, axis=1)
    r = t[np.arange(len(k)), k]
    ids = np.where(np.isfinite(r), world.wall_ids[k], -1)
    return r, ids


def raycast_scan(world: World, pose: Pose2, params: ScanParams | None = None, range_clip: float | None = None,
                 noise_sigma: float = 0.0, rng: np.random.Generator | None = None,
                 stamp: float = 0.0) -> tuple[LaserScan, np.ndarray]:
    """Simulated scan from a planar LiDAR pose; returns the scan and per-beam wall ids."""
    params = params or ScanParams()
    if not world.contains(pose.xy):
        raise ValueError(f"pose {pose.xy} outside world bounds")
    angles = params.angle_min + np.arange(params.n_beams) * params.angle_increment
    r, ids = cast_rays(world, pose.xy, angles + pose.yaw)
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        r = r + rng.normal(scale=noise_sigma, size=r.shape)
    limit = params.range_max if range_clip is None else min(range_clip, params.range_max)
    bad = ~np.isfinite(r) | (r > limit) | (r < params.range_min)
    r = np.where(bad, np.nan, r)
    ids = np.where(bad, -1, ids)
    rmax = params.range_max if range_clip is None else min(range_clip, params.range_max)
    scan = LaserScan(stamp, params.angle_min, params.angle_max, params.angle_increment, params.range_min,
                     rmax, r)
    return scan, ids


# ------------------------------------------------------------ trajectory

def se2_exp(xi) -> tuple[np.ndarray, float]:
    vx, vy, w = xi
    if abs(w) < 1e-12:
        return np.array([vx, vy]), w
    s, c = math.sin(w), math.cos(w)
    V = np.array([[s, -(1 - c)], [1 - c, s]]) / w
    return V @ np.array([vx, vy]), w


def se2_log(p: Pose2) -> np.ndarray:
    w = p.yaw
    if abs(w) < 1e-12:
        return np.array([p.xy[0], p.xy[1], w])
    s, c = math.sin(w), math.cos(w)
    V = np.array([[s, -(1 - c)], [1 - c, s]]) / w
    v = np.linalg.solve(V, p.xy)
    return np.array([v[0], v[1], w])


class Profile:
    """Path parameter s(t) on [0, T] with s(0)=0, s(T)=1."""

    duration: float

    def eval(self, t: float) -> tuple[float, float, float, float]:
        """(s, s_dot, s_ddot, s_dddot)."""
        raise NotImplementedError


class ConstantProfile(Profile):
    def __init__(self, duration: float):
        self.duration = duration

    def eval(self, t):
        return t / self.duration, 1.0 / self.duration, 0.0, 0.0


class HoldProfile(Profile):
    def __init__(self, duration: float):
        self.duration = duration

    def eval(self, t):
        return 0.0, 0.0, 0.0, 0.0


class PulseProfile(Profile):
    """Triangular acceleration pulses, one per period, zero at period edges."""

    def __init__(self, n_accel: int, n_cruise: int, period: float):
        self.period = P = period
        self.n_accel = n_accel
        n = 2 * n_accel + n_cruise
        self.duration = n * P
        vmax = 1.0 / (P * (n_accel + n_cruise))
        dv = vmax / n_accel
        self.dv = np.array([dv] * n_accel + [0.0] * n_cruise + [-dv] * n_accel)
        self.v0 = np.concatenate([[0.0], np.cumsum(self.dv)[:-1]])
        self.s0 = np.concatenate([[0.0], np.cumsum(P * (self.v0 + 0.5 * self.dv))[:-1]])

    def eval(self, t):
        P = self.period
        n = len(self.dv)
        j = min(max(int(math.floor(t / P)), 0), n - 1)
        u = min(max(t - j * P, 0.0), P)
        dv, v0, s0 = self.dv[j], self.v0[j], self.s0[j]
        k = dv / (P * P)
        if u <= 0.5 * P:
            return (s0 + v0 * u + (2.0 / 3.0) * k * u ** 3, v0 + 2.0 * k * u * u, 4.0 * k * u, 4.0 * k)
        w = P - u
        return (s0 + v0 * u + dv * (u - 0.5 * P) + (2.0 / 3.0) * k * w ** 3,
                v0 + dv - 2.0 * k * w * w, 4.0 * k * w, -4.0 * k)


@dataclass
class Segment:
    t0: float
    start: Pose2
    xi: np.ndarray
    profile: Profile

    @property
    def t1(self) -> float:
        return self.t0 + self.profile.duration


@dataclass
class ChassisKinematics:
    pose: Pose2
    vel_world: np.ndarray
    acc_world: np.ndarray
    omega: float
    omega_dot: float


class Trajectory:
    """Piecewise constant-twist chassis motion in the plane."""

    def __init__(self, segments: Sequence[Segment]):
        self.segments = list(segments)
        for a, b in zip(self.segments[:-1], self.segments[1:]):
            if not b.t0 > a.t0:
                raise ValueError("segment times must increase")
        self._t0s = np.array([s.t0 for s in self.segments])

    @property
    def t_start(self) -> float:
        return self.segments[0].t0

    @property
    def t_end(self) -> float:
        return self.segments[-1].t1

    def _segment(self, t: float) -> Segment:
        i = int(np.searchsorted(self._t0s, t, side="right")) - 1
        return self.segments[min(max(i, 0), len(self.segments) - 1)]

    def kinematics(self, t: float) -> ChassisKinematics:
        seg = self._segment(t)
        tau = min(max(t - seg.t0, 0.0), seg.profile.duration)
        s, sd, sdd, _ = seg.profile.eval(tau)
        xy, yaw = se2_exp(seg.xi * s)
        pose = seg.start.compose(Pose2(yaw, xy))
        R = pose.R
        vb = seg.xi[:2] * sd
        w = seg.xi[2] * sd
        ab = seg.xi[:2] * sdd + w * np.array([-vb[1], vb[0]])
        return ChassisKinematics(pose, R @ vb, R @ ab, w, seg.xi[2] * sdd)

    def pose(self, t: float) -> Pose2:
        return self.kinematics(t).pose


@dataclass
class Motion:
    kind: str  # "fwd", "turn", "wait", "arc", "cruise"
    amount: float = 0.0
    duration: float = 0.0
    radius: float = 0.0


def build_trajectory(start: Pose2, motions: Sequence[Motion], speed: float = 0.7, turn_rate: float = 0.8,
                     period: float = 0.1, n_accel: int = 5, t0: float = 0.0) -> Trajectory:
    """Stop-and-go chain; every segment spans a whole number of periods."""
    segs = []
    pose, t = start, t0
    for m in motions:
        if m.kind == "wait":
            n = max(1, int(round(m.duration / period)))
            prof = HoldProfile(n * period)
            xi = np.zeros(3)
        elif m.kind in ("fwd", "turn"):
            mag = abs(m.amount)
            rate = speed if m.kind == "fwd" else turn_rate
            na = n_accel
            nc = max(0, int(math.ceil(mag / (rate * period))) - na)
            prof = PulseProfile(na, nc, period)
            xi = np.array([m.amount, 0.0, 0.0]) if m.kind == "fwd" else np.array([0.0, 0.0, m.amount])
        elif m.kind in ("arc", "cruise"):
            # constant body twist for the whole segment; velocity jumps at the
            # ends, so these are meant for kinematics checks, not scenarios
            n = max(1, int(round(m.duration / period)))
            prof = ConstantProfile(n * period)
            if m.kind == "arc":
                xi = np.array([m.amount * m.radius, 0.0, m.amount])
            else:
                xi = np.array([m.amount, 0.0, 0.0])
        else:
            raise ValueError(f"unknown motion {m.kind!r}")
        seg = Segment(t, pose, xi, prof)
        segs.append(seg)
        xy, yaw = se2_exp(xi)
        pose = pose.compose(Pose2(yaw, xy))
        t = round((t + prof.duration) / IMU_TICK) * IMU_TICK
    return Trajectory(segs)


# ---------------------------------------------------------------- sensors

@dataclass
class NoiseConfig:
    range_sigma: float = 0.01
    accel_density: float = 2e-3
    gyro_density: float = 2e-4
    accel_bias: tuple = (0.02, -0.015, 0.01)
    gyro_bias: tuple = (0.001, -0.0008, 0.0015)
    slip: float = 0.01
    yaw_per_m: float = 0.004
    yaw_per_rad: float = 0.01
    seed: int = 0

    @classmethod
    def zero(cls, seed: int = 0) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0, 0.0, 0.0, seed)

    def rngs(self) -> dict:
        names = ["scan", "imu", "wheel"]
        seqs = np.random.SeedSequence(self.seed).spawn(len(names))
        return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


@dataclass
class Rates:
    scan_hz: float = 10.0
    imu_hz: float = 200.0
    wheel_hz: float = 50.0


def _ticks(t0: float, t1: float, hz: float) -> np.ndarray:
    step = int(round(1.0 / (hz * IMU_TICK)))
    k0 = int(math.ceil(t0 / IMU_TICK - 1e-9))
    k0 = ((k0 + step - 1) // step) * step
    k1 = int(math.floor(t1 / IMU_TICK + 1e-9))
    ks = np.arange(k0, k1 + 1, step)
    return np.array([quantize_stamp(k * IMU_TICK) for k in ks])


def imu_pose(kin: ChassisKinematics, calib: Calibration):
    """IMU body position, rotation, velocity and acceleration in the world."""
    T_ob = calib.T_base_imu
    R_o = kin.pose.to_pose3().R
    r = R_o @ T_ob.translation
    w = np.array([0.0, 0.0, kin.omega])
    wd = np.array([0.0, 0.0, kin.omega_dot])
    p = np.array([kin.pose.xy[0], kin.pose.xy[1], 0.0]) + r
    v = np.append(kin.vel_world, 0.0) + np.cross(w, r)
    a = np.append(kin.acc_world, 0.0) + np.cross(wd, r) + np.cross(w, np.cross(w, r))
    return p, R_o @ T_ob.R, v, a


def gravity_vector(calib: Calibration) -> np.ndarray:
    return np.array([0.0, 0.0, -calib.gravity_magnitude])


def generate_imu(traj: Trajectory, calib: Calibration, noise: NoiseConfig | None = None,
                 rates: Rates | None = None, rng: np.random.Generator | None = None) -> ImuStream:
    """Accelerometer = R^T (a - g) + bias + noise; gyro = body rate + bias + noise."""
    noise = noise or NoiseConfig.zero()
    rates = rates or Rates()
    rng = rng if rng is not None else noise.rngs()["imu"]
    stamps = _ticks(traj.t_start, traj.t_end, rates.imu_hz)
    g = gravity_vector(calib)
    R_ob = calib.T_base_imu.R
    acc = np.empty((len(stamps), 3))
    gyr = np.empty((len(stamps), 3))
    for i, t in enumerate(stamps):
        kin = traj.kinematics(t)
        _, R, _, a = imu_pose(kin, calib)
        acc[i] = R.T @ (a - g)
        gyr[i] = R_ob.T @ np.array([0.0, 0.0, kin.omega])
    acc += np.asarray(noise.accel_bias)
    gyr += np.asarray(noise.gyro_bias)
    dt = 1.0 / rates.imu_hz
    if noise.accel_density > 0:
        acc += rng.normal(scale=noise.accel_density / math.sqrt(dt), size=acc.shape)
    if noise.gyro_density > 0:
        gyr += rng.normal(scale=noise.gyro_density / math.sqrt(dt), size=gyr.shape)
    return ImuStream(stamps, acc, gyr)


def generate_wheel(traj: Trajectory, noise: NoiseConfig | None = None, rates: Rates | None = None,
                   rng: np.random.Generator | None = None) -> WheelStream:
    """Cumulative odometry with multiplicative slip on distance and yaw noise."""
    noise = noise or NoiseConfig.zero()
    rates = rates or Rates()
    rng = rng if rng is not None else noise.rngs()["wheel"]
    stamps = _ticks(traj.t_start, traj.t_end, rates.wheel_hz)
    gt = [traj.pose(t) for t in stamps]
    est = gt[0]
    xyz = np.zeros((len(stamps), 3))
    rv = np.zeros((len(stamps), 3))
    for i in range(len(stamps)):
        if i > 0:
            inc = gt[i - 1].inverse().compose(gt[i])
            d = float(np.linalg.norm(inc.xy))
            dyaw = inc.yaw
            if d > 0 or dyaw != 0:
                scale = 1.0 + noise.slip * rng.standard_normal() if noise.slip > 0 else 1.0
                sig = noise.yaw_per_m * d + noise.yaw_per_rad * abs(dyaw)
                eta = sig * rng.standard_normal() if sig > 0 else 0.0
                inc = Pose2(dyaw + eta, inc.xy * scale)
                est = est.compose(inc)
        xyz[i] = [est.xy[0], est.xy[1], 0.0]
        rv[i] = [0.0, 0.0, est.yaw]
    return WheelStream(stamps, xyz, rv)


def lidar_pose2(chassis: Pose2, calib: Calibration) -> Pose2:
    return compose(chassis.to_pose3(), calib.T_base_lidar).to_pose2()


@dataclass
class SimOutput:
    world: World
    traj: Trajectory
    calib: Calibration
    dataset: Dataset
    wall_ids: list
    gt_stamps: np.ndarray
    gt_poses: list
    range_clip: float | None = None
    overrides: dict = field(default_factory=dict)

    def imu_state(self, t: float) -> State:
        kin = self.traj.kinematics(t)
        p, R, v, _ = imu_pose(kin, self.calib)
        return State(p, log_so3(R), v, stamp=t)


def simulate(world: World, traj: Trajectory, calib: Calibration, noise: NoiseConfig | None = None,
             rates: Rates | None = None, scan_params: ScanParams | None = None,
             range_clip: float | None = None) -> SimOutput:
    noise = noise or NoiseConfig()
    rates = rates or Rates()
    rngs = noise.rngs()
    imu = generate_imu(traj, calib, noise, rates, rngs["imu"])
    wheel = generate_wheel(traj, noise, rates, rngs["wheel"])
    stamps = _ticks(traj.t_start, traj.t_end, rates.scan_hz)
    scans, ids, gt = [], [], []
    for t in stamps:
        chassis = traj.pose(t)
        scan, wid = raycast_scan(world, lidar_pose2(chassis, calib), scan_params, range_clip,
                                 noise.range_sigma, rngs["scan"], stamp=t)
        scans.append(scan)
        ids.append(wid)
        gt.append(chassis.to_pose3())
    ds = Dataset(scans, imu, wheel, calib)
    return SimOutput(world, traj, calib, ds, ids, stamps, gt, range_clip)


def export_dataset(sim: SimOutput, out_dir) -> Path:
    out = Path(out_dir)
    save_dataset(out, sim.dataset)
    write_tum(out / "groundtruth.tum", sim.gt_stamps, sim.gt_poses)
    with open(out / "scan_walls.csv", "w") as fh:
        fh.write("stamp,wall_ids\n")
        for t, w in zip(sim.gt_stamps, sim.wall_ids):
            fh.write(f"{fmt_stamp(t)},{';'.join(str(int(x)) for x in w)}\n")
    with open(out / "world.csv", "w") as fh:
        fh.write("wall_id,x0,y0,x1,y1\n")
        for i, w in zip(sim.world.wall_ids, sim.world.walls):
            fh.write(f"{int(i)}," + ",".join(repr(float(x)) for x in w) + "\n")
    if sim.overrides:
        (out / "overrides.cfg").write_text("".join(f"{k}={v}\n" for k, v in sorted(sim.overrides.items())))
    return out


def read_world(path) -> World:
    rows = Path(path).read_text().splitlines()[1:]
    data = np.array([[float(x) for x in r.split(",")] for r in rows if r.strip()])
    return World(data[:, 1:5], data[:, 0].astype(int), Path(path).parent.name)
