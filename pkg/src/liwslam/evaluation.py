"""Trajectory error metrics (absolute and relative pose error)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Pose2, Pose3, wrap_angle


class AssociationError(ValueError):
    pass


@dataclass
class Trajectory:
    stamps: np.ndarray
    xy: np.ndarray
    yaw: np.ndarray

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.yaw = np.asarray(self.yaw, dtype=float).reshape(-1)
        if not (len(self.stamps) == len(self.xy) == len(self.yaw)):
            raise ValueError("trajectory arrays differ in length")
        if len(self.stamps) > 1 and np.any(np.diff(self.stamps) <= 0):
            raise ValueError("trajectory stamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.stamps)

    @classmethod
    def from_poses(cls, stamps, poses: Sequence) -> "Trajectory":
        p2 = [p.to_pose2() if isinstance(p, Pose3) else p for p in poses]
        return cls(stamps, [p.xy for p in p2] if p2 else np.zeros((0, 2)), [p.yaw for p in p2])

    def pose(self, i: int) -> Pose2:
        return Pose2(float(self.yaw[i]), self.xy[i])

    def transformed(self, T: Pose2) -> "Trajectory":
        return Trajectory(self.stamps, T.apply(self.xy), self.yaw + T.yaw)

    def subset(self, idx) -> "Trajectory":
        return Trajectory(self.stamps[idx], self.xy[idx], self.yaw[idx])


@dataclass
class Pairs:
    est: Trajectory
    gt: Trajectory

    def __len__(self) -> int:
        return len(self.est)


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> Pairs:
    """Nearest-stamp pairing; each ground-truth sample is used at most once."""
    if len(est) == 0 or len(gt) == 0:
        raise AssociationError("empty trajectory")
    j = np.searchsorted(gt.stamps, est.stamps)
    j0 = np.clip(j - 1, 0, len(gt) - 1)
    j1 = np.clip(j, 0, len(gt) - 1)
    d0 = np.abs(gt.stamps[j0] - est.stamps)
    d1 = np.abs(gt.stamps[j1] - est.stamps)
    best = np.where(d1 < d0, j1, j0)
    dt = np.minimum(d0, d1)
    ok = dt <= max_dt
    ei = np.flatnonzero(ok)
    gi = best[ok]
    # drop duplicate gt matches, keeping the closest
    order = np.lexsort((dt[ok], gi))
    gi_sorted = gi[order]
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = gi_sorted[1:] != gi_sorted[:-1]
    sel = np.sort(order[keep])
    ei, gi = ei[sel], gi[sel]
    if len(ei) == 0:
        raise AssociationError("no samples paired within max_dt")
    return Pairs(est.subset(ei), gt.subset(gi))


def umeyama_2d(src: np.ndarray, dst: np.ndarray) -> Pose2:
    """Rigid T minimising sum |T(src) - dst|^2 (no scale)."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - ms, dst - md
    C = B.T @ A
    U, _, Vt = np.linalg.svd(C)
    S = np.diag([1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ S @ Vt
    yaw = math.atan2(R[1, 0], R[0, 0])
    return Pose2(yaw, md - R @ ms)


@dataclass
class ErrorStats:
    count: int
    rmse: float
    mean: float
    median: float
    max: float
    min: float
    sse: float
    std: float

    @classmethod
    def of(cls, e: np.ndarray) -> "ErrorStats":
        e = np.asarray(e, dtype=float)
        if e.size == 0:
            return cls(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        sse = float(e @ e)
        return cls(int(e.size), math.sqrt(sse / e.size), float(e.mean()), float(np.median(e)),
                   float(e.max()), float(e.min()), sse, float(e.std()))


@dataclass
class ErrorReport:
    trans_rmse: float
    rot_rmse: float
    combined: float
    stats: ErrorStats
    trans: ErrorStats
    rot: ErrorStats
    alignment: Pose2 | None = None

    def as_dict(self, prefix: str = "") -> dict:
        out = {f"{prefix}trans_rmse": self.trans_rmse, f"{prefix}rot_rmse": self.rot_rmse,
               f"{prefix}combined": self.combined, f"{prefix}count": self.stats.count}
        for k in ("max", "mean", "median", "min", "rmse", "sse", "std"):
            out[f"{prefix}{k}"] = getattr(self.stats, k)
        return out


def _report(te: np.ndarray, re: np.ndarray, alignment=None) -> ErrorReport:
    comb = np.sqrt(te ** 2 + re ** 2)
    ts, rs, cs = ErrorStats.of(te), ErrorStats.of(re), ErrorStats.of(comb)
    return ErrorReport(ts.rmse, rs.rmse, cs.rmse, cs, ts, rs, alignment)


def ape_rmse(pairs: Pairs, align: bool = True) -> ErrorReport:
    if len(pairs) < 2:
        raise AssociationError("APE needs at least two pairs")
    est = pairs.est
    T = None
    if align:
        T = umeyama_2d(est.xy, pairs.gt.xy)
        est = est.transformed(T)
    te = np.linalg.norm(est.xy - pairs.gt.xy, axis=1)
    re = np.abs(wrap_angle(est.yaw - pairs.gt.yaw))
    return _report(te, re, T)


def _relative(traj: Trajectory, i: np.ndarray, j: np.ndarray):
    c, s = np.cos(traj.yaw[i]), np.sin(traj.yaw[i])
    d = traj.xy[j] - traj.xy[i]
    dx = c * d[:, 0] + s * d[:, 1]
    dy = -s * d[:, 0] + c * d[:, 1]
    return np.stack([dx, dy], axis=1), traj.yaw[j] - traj.yaw[i]


def rpe_pairs(gt: Trajectory, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j) where j is the first sample at least ``delta`` of arc length past i."""
    seg = np.linalg.norm(np.diff(gt.xy, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] < delta:
        raise ValueError("trajectory shorter than the RPE interval")
    j = np.searchsorted(s, s + delta - 1e-12, side="left")
    i = np.arange(len(s))
    ok = j < len(s)
    return i[ok], j[ok]


def rpe_rmse(pairs: Pairs, delta: float = 0.1) -> ErrorReport:
    i, j = rpe_pairs(pairs.gt, delta)
    te_xy, te_yaw = _relative(pairs.est, i, j)
    tg_xy, tg_yaw = _relative(pairs.gt, i, j)
    # discrepancy of the relative motions, expressed in the ground-truth relative frame
    dyaw = wrap_angle(te_yaw - tg_yaw)
    c, s = np.cos(tg_yaw), np.sin(tg_yaw)
    d = te_xy - tg_xy
    ex = c * d[:, 0] + s * d[:, 1]
    ey = -s * d[:, 0] + c * d[:, 1]
    te = np.hypot(ex, ey)
    return _report(te, np.abs(dyaw))


def format_report(values: dict) -> str:
    return "".join(f"{k}={v:.9f}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in values.items())
