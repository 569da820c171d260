"""Planar pose graph over keyframes with odometry and loop edges."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose2, wrap_angle
from .loopdetect import LoopConstraint
from .solver import Problem, ResidualBlock, SingularSystemError, SolveOptions, solve

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    pass


@dataclass
class BackendConfig:
    odom_sigma_xy: float = 0.02
    odom_sigma_xy_per_m: float = 0.01
    odom_sigma_yaw_deg: float = 0.5
    odom_sigma_yaw_per_rad: float = 0.01
    loop_sigma_floor: float = 0.005
    loop_sigma_yaw_deg: float = 0.5
    max_iters: int = 50


@dataclass
class Edge:
    i: int
    j: int
    z: Pose2
    sqrt_info: np.ndarray
    kind: str = "odom"


def edge_error(xi: np.ndarray, xj: np.ndarray, z: Pose2):
    """boxminus(z, inverse(X_i) X_j) as (dx, dy, dyaw) in the frame of z, with Jacobians."""
    ci, si = math.cos(xi[2]), math.sin(xi[2])
    RiT = np.array([[ci, si], [-si, ci]])
    dRiT = np.array([[-si, ci], [-ci, -si]])
    cz, sz = math.cos(z.yaw), math.sin(z.yaw)
    RzT = np.array([[cz, sz], [-sz, cz]])
    dt = xj[:2] - xi[:2]
    t = RiT @ dt
    e = np.empty(3)
    e[:2] = RzT @ (t - z.xy)
    e[2] = wrap_angle(float(xj[2] - xi[2] - z.yaw))
    Ji = np.zeros((3, 3))
    Jj = np.zeros((3, 3))
    Ji[:2, :2] = -RzT @ RiT
    Ji[:2, 2] = RzT @ dRiT @ dt
    Ji[2, 2] = -1.0
    Jj[:2, :2] = RzT @ RiT
    Jj[2, 2] = 1.0
    return e, Ji, Jj


@dataclass
class OptimizeResult:
    initial_cost: float
    final_cost: float
    correction: Pose2
    iters: int = 0


class PoseGraph:
    def __init__(self, cfg: BackendConfig | None = None):
        self.cfg = cfg or BackendConfig()
        self.nodes: dict[int, Pose2] = {}
        self.raw: dict[int, Pose2] = {}
        self.stamps: dict[int, float] = {}
        self.odom_edges: list[Edge] = []
        self.loop_edges: list[Edge] = []
        self.loops: list[LoopConstraint] = []
        self.last_correction = Pose2()

    @property
    def last_id(self) -> int | None:
        return next(reversed(self.nodes)) if self.nodes else None

    @property
    def first_id(self) -> int | None:
        return next(iter(self.nodes)) if self.nodes else None

    def odom_sqrt_info(self, z: Pose2) -> np.ndarray:
        c = self.cfg
        s_xy = c.odom_sigma_xy + c.odom_sigma_xy_per_m * float(np.linalg.norm(z.xy))
        s_yaw = math.radians(c.odom_sigma_yaw_deg) + c.odom_sigma_yaw_per_rad * abs(z.yaw)
        return np.diag([1 / s_xy, 1 / s_xy, 1 / s_yaw])

    def loop_sqrt_info(self, lc: LoopConstraint) -> np.ndarray:
        s_xy = max(lc.post_icp_rms, self.cfg.loop_sigma_floor)
        s_yaw = math.radians(self.cfg.loop_sigma_yaw_deg)
        return np.diag([1 / s_xy, 1 / s_xy, 1 / s_yaw])

    def add_keyframe(self, kf_id: int, pose: Pose2, stamp: float = 0.0) -> None:
        """Insert a node at the front-end pose; chains an odometry edge to the previous node."""
        last = self.last_id
        if last is not None and kf_id != last + 1:
            raise ProtocolError(f"keyframe id {kf_id} does not follow {last}")
        if last is None:
            self.nodes[kf_id] = pose
        else:
            z = self.raw[last].inverse() @ pose
            self.odom_edges.append(Edge(last, kf_id, z, self.odom_sqrt_info(z)))
            # keep earlier corrections: new node hangs off the corrected predecessor
            self.nodes[kf_id] = self.nodes[last] @ z
        self.raw[kf_id] = pose
        self.stamps[kf_id] = stamp

    def add_loop(self, lc: LoopConstraint) -> None:
        if lc.from_id not in self.nodes or lc.to_id not in self.nodes:
            raise ProtocolError("loop edge references an unknown keyframe")
        # edge from the old keyframe (to_id) to the new one (from_id)
        self.loop_edges.append(Edge(lc.to_id, lc.from_id, lc.relative_pose, self.loop_sqrt_info(lc), "loop"))
        self.loops.append(lc)

    def cost(self, nodes: dict[int, Pose2] | None = None) -> float:
        nodes = nodes or self.nodes
        total = 0.0
        for e in self.odom_edges + self.loop_edges:
            r, _, _ = edge_error(nodes[e.i].as_array(), nodes[e.j].as_array(), e.z)
            w = e.sqrt_info @ r
            total += 0.5 * float(w @ w)
        return total

    def optimize(self) -> OptimizeResult | None:
        """Solve the graph with the first node fixed; no-op without loop edges."""
        if not self.loop_edges:
            return None
        before_last = self.nodes[self.last_id]
        prob = Problem()
        first = self.first_id
        for k, p in self.nodes.items():
            prob.add_slot(f"x{k}", p.as_array(), fixed=(k == first))
        for e in self.odom_edges + self.loop_edges:
            def fn(xi, xj, z=e.z):
                r, Ji, Jj = edge_error(xi, xj, z)
                return r, [Ji, Jj]
            prob.add_block(ResidualBlock([f"x{e.i}", f"x{e.j}"], fn, weight=e.sqrt_info, name=e.kind))
        try:
            res = solve(prob, SolveOptions(max_iters=self.cfg.max_iters))
        except (SingularSystemError, ValueError) as ex:
            log.error("pose graph optimization failed: %s", ex)
            raise
        for k in self.nodes:
            if k == first:
                continue
            x = prob.value(f"x{k}")
            self.nodes[k] = Pose2(float(x[2]), x[:2])
        corr = self.nodes[self.last_id] @ before_last.inverse()
        self.last_correction = corr
        return OptimizeResult(res.initial_cost, res.final_cost, corr, res.iters)

    def broadcast_correction(self, before: Pose2 | None = None) -> Pose2:
        """Offset mapping the front-end's latest pose onto the optimized graph tail."""
        last = self.last_id
        if last is None:
            return Pose2()
        return self.nodes[last] @ self.raw[last].inverse() if before is None else self.nodes[last] @ before.inverse()

    def correction_for(self, kf_id: int) -> Pose2:
        return self.nodes[kf_id] @ self.raw[kf_id].inverse()
