"""Front-end odometry: initialization gate, sliding-window tracking,
dual reference frames and keyframe emission."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dataio import Calibration, Frame, ImuStream, scan_to_points
from .factors import (LineMatch, MatchConfig, WheelDelta, chassis_pose, lidar_pose, make_ground_block_fn,
                      make_line_block_fn, make_prior_block_fn, make_wheel_block_fn, match_lines, wheel_delta)
from .features import Corner, FeatureConfig, LineSegment, extract_scan_features
from .geometry import Pose2, Pose3, between, compose, exp_so3, inverse, log_so3
from .preintegration import (ImuBias, NoiseParams, Preintegration, State, gravity_from_accel, integrate,
                             make_imu_block_fn)
from .solver import ROTVEC, HuberLoss, Problem, ResidualBlock, SingularSystemError, SolveOptions, solve

log = logging.getLogger(__name__)


@dataclass
class FrontendConfig:
    window: int = 5
    k_init: int = 10
    m_init: int = 15
    n_ref: int = 20
    stationary_d: float = 0.005
    min_matches: int = 3
    kf_dist: float = 0.2
    kf_angle_deg: float = 10.0
    kf_dt: float = 2.0
    ref_angle_res_deg: float = 5.0
    ref_offset_res: float = 0.2
    ref_along_res: float = 1.0
    ref_capacity: int = 4000
    prior_sigma_v: float = 0.02
    prior_sigma_ba: float = 0.01
    prior_sigma_bg: float = 1e-3
    line_huber: float = 2.0
    max_iters: int = 8
    tol_cost: float = 1e-4
    # the bias-walk rows make the window stiff; Marquardt damping at the
    # usual 1e-4 stalls along weakly observed directions
    lm_lambda: float = 1e-8
    rematch: bool = True
    rematch_dist: float = 0.02
    rematch_angle_deg: float = 0.5
    kf_point_stride: int = 1
    wheel_factor: bool = True
    ground_factor: bool = True


# ------------------------------------------------------------------ bundles

@dataclass
class FrameBundle:
    scan_stamp: float
    lines: list
    corners: list
    imu_segment: ImuStream | None
    wheel_increment: WheelDelta | None
    wheel_relative: Pose3 | None = None
    wheel_pose: Pose3 | None = None
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        seg = self.imu_segment
        if seg is not None and len(seg) and not math.isclose(float(seg.stamps[-1]), self.scan_stamp,
                                                             abs_tol=1e-9):
            raise ValueError("IMU segment must end at the scan stamp")

    @property
    def stationary_measure(self) -> float:
        return math.inf if self.wheel_increment is None else self.wheel_increment.d


def make_bundle(frame: Frame, prev_wheel: Pose3 | None, feature_cfg: FeatureConfig | None = None) -> FrameBundle:
    sp = scan_to_points(frame.scan)
    full = frame.scan.angle_increment * len(frame.scan.ranges) >= 2 * math.pi - 1e-6
    feats = extract_scan_features(sp.points, sp.beam_indices, feature_cfg, frame.stamp, closed=full)
    inc = rel = None
    if prev_wheel is not None:
        rel = between(prev_wheel, frame.wheel_pose)
        inc = wheel_delta(prev_wheel, frame.wheel_pose)
    return FrameBundle(frame.stamp, feats.lines, feats.corners, frame.imu, inc, rel, frame.wheel_pose, sp.points)


def bundles_from_frames(frames, feature_cfg: FeatureConfig | None = None):
    prev = None
    for fr in frames:
        # a dropped frame breaks the IMU chain; dataio then yields imu=None
        if fr.imu is None:
            prev = None
        yield make_bundle(fr, prev, feature_cfg)
        prev = fr.wheel_pose


# --------------------------------------------------------- reference frames

class ReferenceFrame:
    """Lines accumulated in the LiDAR frame of an anchor state.

    Each line occupies one cell keyed by (orientation bin, offset bin,
    along-line bin of its midpoint); a new line only fills empty cells.
    """

    def __init__(self, anchor: State, calib: Calibration, capacity: int, cfg: FrontendConfig):
        self.anchor = anchor.copy()
        self.anchor_lidar = lidar_pose(anchor, calib)
        self.calib = calib
        self.capacity = capacity
        self.cfg = cfg
        self.cells: dict[tuple, LineSegment] = {}
        self.accumulation_count = 0

    @property
    def lines(self) -> list[LineSegment]:
        return list(self.cells.values())

    def cell_of(self, line: LineSegment) -> tuple:
        ang = line.angle
        d = np.array([math.cos(ang), math.sin(ang)])
        n = np.array([-d[1], d[0]])
        mid = line.midpoint
        return (int(ang // math.radians(self.cfg.ref_angle_res_deg)),
                int(math.floor(float(n @ mid) / self.cfg.ref_offset_res)),
                int(math.floor(float(d @ mid) / self.cfg.ref_along_res)))

    def add(self, lines, state: State) -> int:
        T = between(self.anchor_lidar, lidar_pose(state, self.calib))
        R2, t2 = T.R[:2, :2], T.translation[:2]
        added = 0
        for line in lines:
            if len(self.cells) >= self.capacity:
                break
            mapped = line.transformed(R2, t2)
            key = self.cell_of(mapped)
            if key not in self.cells:
                self.cells[key] = mapped
                added += 1
        self.accumulation_count += 1
        return added


class ReferenceManager:
    """Current and backup reference frames with the half-capacity handover."""

    def __init__(self, calib: Calibration, cfg: FrontendConfig):
        self.calib = calib
        self.cfg = cfg
        self.n_ref = cfg.n_ref
        self.current: ReferenceFrame | None = None
        self.backup: ReferenceFrame | None = None
        self.promotions = 0

    def _new(self, state: State) -> ReferenceFrame:
        return ReferenceFrame(state, self.calib, self.cfg.ref_capacity, self.cfg)

    def update(self, lines, state: State) -> None:
        if self.current is None:
            self.current = self._new(state)
        before = self.current.accumulation_count
        self.current.add(lines, state)
        if before >= self.n_ref / 2:
            if self.backup is None:
                self.backup = self._new(state)
            self.backup.add(lines, state)
        if self.current.accumulation_count >= self.n_ref:
            self.current = self.backup if self.backup is not None else self._new(state)
            self.backup = None
            self.promotions += 1


# ------------------------------------------------------------------ keyframes

@dataclass
class Keyframe:
    id: int
    stamp: float
    state: State
    corners: list
    scan_points: np.ndarray
    pose2: Pose2 = field(default_factory=Pose2)
    lines: list = field(default_factory=list)


def lidar_pose2(state: State, calib: Calibration) -> Pose2:
    return lidar_pose(state, calib).to_pose2()


class KeyframePolicy:
    """Emit on translation >= dist, rotation >= angle or elapsed >= dt."""

    def __init__(self, dist: float = 0.2, angle_deg: float = 10.0, dt: float = 2.0):
        self.dist, self.angle, self.dt = dist, math.radians(angle_deg), dt
        self.last: tuple[float, Pose3] | None = None

    def check(self, stamp: float, pose: Pose3) -> bool:
        if self.last is None:
            self.last = (stamp, pose)
            return True
        t0, p0 = self.last
        rel = between(p0, pose)
        if (np.linalg.norm(rel.translation) >= self.dist or np.linalg.norm(rel.rotation) >= self.angle - 1e-12
                or stamp - t0 >= self.dt - 1e-9):
            self.last = (stamp, pose)
            return True
        return False


# ------------------------------------------------------------------ tracker

@dataclass
class WindowEntry:
    bundle: FrameBundle
    state: State
    matches: list = field(default_factory=list)
    anchor: State | None = None
    pre: Preintegration | None = None      # from the previous window entry to this one
    degraded: bool = False


@dataclass
class TrackResult:
    stamp: float
    state: State
    n_lines: int
    n_matches: int
    degraded: bool = False


def _slots(i: int) -> list[str]:
    return [f"p{i}", f"th{i}", f"v{i}", f"ba{i}", f"bg{i}"]


class Frontend:
    def __init__(self, calib: Calibration, cfg: FrontendConfig | None = None,
                 match_cfg: MatchConfig | None = None):
        self.calib = calib
        self.cfg = cfg or FrontendConfig()
        self.match_cfg = match_cfg or MatchConfig()
        self.noise = NoiseParams.from_calib(calib.imu_noise)
        self.gravity = np.array([0.0, 0.0, -calib.gravity_magnitude])
        self.gravity_measured: np.ndarray | None = None
        self.buffer: list[FrameBundle] = []
        self.window: deque[WindowEntry] = deque()
        self.refs = ReferenceManager(calib, self.cfg)
        self.kf_policy = KeyframePolicy(self.cfg.kf_dist, self.cfg.kf_angle_deg, self.cfg.kf_dt)
        self.initialized = False
        self.init_attempts = 0
        self.next_kf_id = 0
        self.T_base_imu = calib.T_base_imu

    # ------------------------------------------------------------ helpers

    def _imu_from_chassis(self, chassis: Pose3) -> Pose3:
        return compose(chassis, self.T_base_imu)

    def _preintegrate(self, seg: ImuStream | None, bias: ImuBias) -> Preintegration | None:
        if seg is None or len(seg) < 2:
            return None
        return integrate(seg, bias, self.noise)

    def _propagate(self, s: State, pre: Preintegration) -> State:
        dt = pre.dt_total
        R = s.R
        p = s.p + s.v * dt + 0.5 * self.gravity * dt * dt + R @ pre.alpha
        v = s.v + self.gravity * dt + R @ pre.beta
        return State(p, log_so3(R @ pre.gamma, check=False), v, s.bias)

    def _predict(self, prev: State, bundle: FrameBundle, pre: Preintegration | None) -> State:
        imu_pred = self._propagate(prev, pre) if pre is not None else None
        if self.cfg.wheel_factor and bundle.wheel_relative is not None:
            chassis = compose(chassis_pose(prev, self.calib), bundle.wheel_relative)
            T = self._imu_from_chassis(chassis)
            v = imu_pred.v if imu_pred is not None else prev.v
            out = State(T.translation, T.rotation, v, prev.bias)
        elif imu_pred is not None:
            out = imu_pred
        else:
            out = prev.copy()
        out.stamp = bundle.scan_stamp
        return out

    def _match(self, bundle: FrameBundle, state: State, anchor: State, ref_lines) -> list[LineMatch]:
        T = between(lidar_pose(anchor, self.calib), lidar_pose(state, self.calib))
        return match_lines(bundle.lines, ref_lines, T, self.match_cfg)

    def _wheel_ok(self, bundle: FrameBundle) -> bool:
        return self.cfg.wheel_factor and bundle.wheel_increment is not None

    def _prior_sqrt_info(self) -> np.ndarray:
        c = self.cfg
        sig = [1.0] * 6 + [c.prior_sigma_v] * 3 + [c.prior_sigma_ba] * 3 + [c.prior_sigma_bg] * 3
        return np.diag(1.0 / np.asarray(sig))

    def _build(self, entries: list[WindowEntry], fix_first_pose: bool, prior_blocks=(2, 3, 4)) -> Problem:
        prob = Problem()
        for i, e in enumerate(entries):
            s = e.state
            fixed = fix_first_pose and i == 0
            prob.add_slot(f"p{i}", s.p, fixed=fixed)
            prob.add_slot(f"th{i}", s.theta, ROTVEC, fixed=fixed)
            prob.add_slot(f"v{i}", s.v)
            prob.add_slot(f"ba{i}", s.bias.accel)
            prob.add_slot(f"bg{i}", s.bias.gyro)
        first = entries[0].state
        if prior_blocks:
            names = [_slots(0)[b] for b in prior_blocks]
            prob.add_block(ResidualBlock(names, make_prior_block_fn(first, self._prior_sqrt_info(), prior_blocks),
                                         name="prior"))
        loss = HuberLoss(self.cfg.line_huber)
        for i, e in enumerate(entries):
            if e.matches and not e.degraded:
                fn = make_line_block_fn(e.matches, e.anchor, self.calib)
                prob.add_block(ResidualBlock([f"p{i}", f"th{i}"], fn, loss=loss, loss_group=2, name=f"line{i}"))
            if self.cfg.ground_factor:
                prob.add_block(ResidualBlock([f"p{i}", f"th{i}"], make_ground_block_fn(self.calib),
                                             name=f"ground{i}"))
            if i == 0:
                continue
            if e.pre is not None:
                prob.add_block(ResidualBlock(_slots(i - 1) + _slots(i), make_imu_block_fn(e.pre, self.gravity),
                                             name=f"imu{i}"))
            else:
                # no inertial link: tie the biases so they stay observable
                prob.add_block(ResidualBlock([f"ba{i}", f"bg{i}", f"v{i}"], _bias_hold(entries[i - 1].state),
                                             name=f"hold{i}"))
            if self._wheel_ok(e.bundle):
                prob.add_block(ResidualBlock([f"p{i - 1}", f"th{i - 1}", f"p{i}", f"th{i}"],
                                             make_wheel_block_fn(e.bundle.wheel_increment, self.calib),
                                             name=f"wheel{i}"))
        return prob

    @staticmethod
    def _read(prob: Problem, entries: list[WindowEntry]) -> None:
        for i, e in enumerate(entries):
            v = prob.value
            e.state = State(v(f"p{i}"), v(f"th{i}"), v(f"v{i}"), ImuBias(v(f"ba{i}"), v(f"bg{i}")),
                            e.state.stamp)

    # ------------------------------------------------------ initialization

    def try_initialize(self, buffer: list[FrameBundle] | None = None) -> bool:
        """Run the initialization gate on the buffered frames.

        Returns True and populates the window on success; otherwise the
        buffer is cleared when the gate fails or the solve diverges.
        """
        buf = self.buffer if buffer is None else buffer
        cfg = self.cfg
        moving = [i for i, b in enumerate(buf) if i > 0 and b.stationary_measure >= cfg.stationary_d]
        if len(moving) < cfg.k_init:
            return False
        self.init_attempts += 1
        # chain wheel odometry (or identity) for the initial guess
        chassis = [Pose3.identity()]
        for b in buf[1:]:
            rel = b.wheel_relative if b.wheel_relative is not None else Pose3.identity()
            chassis.append(compose(chassis[-1], rel))
        stat = [0] + [i for i in range(1, moving[0]) if buf[i].imu_segment is not None]
        bias, gmeas = self._stationary_bias(buf[:moving[0]])
        self.gravity_measured = gmeas
        entries = []
        for i, b in enumerate(buf):
            T = self._imu_from_chassis(chassis[i])
            entries.append(WindowEntry(b, State(T.translation, T.rotation, np.zeros(3), bias, b.scan_stamp)))
        # velocity guess from the chassis chain
        for i in range(1, len(entries)):
            dt = buf[i].scan_stamp - buf[i - 1].scan_stamp
            if dt > 0 and i not in stat:
                entries[i].state.v = (entries[i].state.p - entries[i - 1].state.p) / dt
        anchor = entries[0].state
        ref_lines = buf[0].lines
        for i, e in enumerate(entries):
            e.anchor = anchor
            e.matches = self._match(e.bundle, e.state, anchor, ref_lines) if ref_lines else []
            e.pre = self._preintegrate(e.bundle.imu_segment, bias) if i > 0 else None
        if any(len(entries[i].matches) < cfg.m_init for i in moving):
            log.debug("init gate failed: matches %s", [len(entries[i].matches) for i in moving])
            buf.clear()
            return False
        prob = self._build(entries, fix_first_pose=True)
        try:
            res = solve(prob, SolveOptions(max_iters=30, lm_init_lambda=cfg.lm_lambda))
        except (SingularSystemError, ValueError) as e:
            log.debug("init solve failed: %s", e)
            buf.clear()
            return False
        if res.final_cost > res.initial_cost:
            buf.clear()
            return False
        self._read(prob, entries)
        # re-match against frame 0 with the refined poses
        for e in entries:
            e.matches = self._match(e.bundle, e.state, anchor, ref_lines)
        self.initialized = True
        self.window = deque(entries[-cfg.window:], maxlen=None)
        self.refs.update(buf[0].lines, entries[0].state)
        self._init_entries = entries
        buf.clear()
        return True

    def _stationary_bias(self, prefix: list[FrameBundle]):
        segs = [b.imu_segment for b in prefix[1:] if b.imu_segment is not None]
        if not segs:
            return ImuBias(), None
        acc = np.vstack([s.accel for s in segs]).mean(axis=0)
        gyr = np.vstack([s.gyro for s in segs]).mean(axis=0)
        R0 = self.T_base_imu.R
        # the world is level by construction, so the accelerometer mean gives
        # the accel bias directly; its direction is kept as a diagnostic
        expected = R0.T @ (-self.gravity)
        g_meas = R0 @ gravity_from_accel(acc, self.calib.gravity_magnitude)
        return ImuBias(acc - expected, gyr), g_meas

    # ------------------------------------------------------------- tracking

    def track_frame(self, bundle: FrameBundle) -> TrackResult:
        if not self.initialized:
            raise RuntimeError("track_frame called before initialization")
        cfg = self.cfg
        prev = self.window[-1].state
        pre = self._preintegrate(bundle.imu_segment, prev.bias)
        state = self._predict(prev, bundle, pre)
        ref = self.refs.current
        entry = WindowEntry(bundle, state, anchor=ref.anchor, pre=pre)
        ref_lines = ref.lines
        entry.matches = self._match(bundle, state, ref.anchor, ref_lines)
        entry.degraded = len(entry.matches) < cfg.min_matches and not self._wheel_ok(bundle)
        self.window.append(entry)
        while len(self.window) > cfg.window:
            self.window.popleft()
        entries = list(self.window)
        self._solve_window(entries)
        moved = between(lidar_pose(state, self.calib), lidar_pose(entry.state, self.calib))
        if (cfg.rematch and not entry.degraded
                and (np.linalg.norm(moved.translation) > cfg.rematch_dist
                     or np.linalg.norm(moved.rotation) > math.radians(cfg.rematch_angle_deg))):
            again = self._match(bundle, entry.state, ref.anchor, ref_lines)
            if _match_key(again) != _match_key(entry.matches):
                entry.matches = again
                self._solve_window(entries)
        return TrackResult(bundle.scan_stamp, entry.state.copy(), len(bundle.lines), len(entry.matches),
                           entry.degraded)

    def _solve_window(self, entries: list[WindowEntry]) -> None:
        prob = self._build(entries, fix_first_pose=True)
        try:
            solve(prob, SolveOptions(max_iters=self.cfg.max_iters, tol_cost=self.cfg.tol_cost,
                                     lm_init_lambda=self.cfg.lm_lambda))
        except SingularSystemError as e:
            log.warning("window solve failed at %.3f: %s", entries[-1].state.stamp, e)
            return
        self._read(prob, entries)

    def update_reference(self, bundle: FrameBundle, state: State) -> None:
        self.refs.update(bundle.lines, state)

    def emit_keyframe(self, bundle: FrameBundle, state: State) -> Keyframe | None:
        if not self.kf_policy.check(bundle.scan_stamp, chassis_pose(state, self.calib)):
            return None
        pts = bundle.points[::max(1, self.cfg.kf_point_stride)]
        kf = Keyframe(self.next_kf_id, bundle.scan_stamp, state.copy(), list(bundle.corners), pts.copy(),
                      lidar_pose2(state, self.calib), list(bundle.lines))
        self.next_kf_id += 1
        return kf

    # -------------------------------------------------------------- driver

    def process(self, bundle: FrameBundle):
        """Feed one frame; returns (track results, keyframes) produced by it."""
        if not self.initialized:
            if bundle.imu_segment is None and self.buffer:
                # IMU chain broken: restart accumulation from this frame
                self.buffer.clear()
            self.buffer.append(bundle)
            self._trim_buffer()
            if not self.try_initialize():
                return [], []
            entries = self._init_entries
            del self._init_entries
            results, kfs = [], []
            for i, e in enumerate(entries):
                results.append(TrackResult(e.bundle.scan_stamp, e.state.copy(), len(e.bundle.lines),
                                           len(e.matches)))
                if i > 0:
                    self.update_reference(e.bundle, e.state)
                kf = self.emit_keyframe(e.bundle, e.state)
                if kf is not None:
                    kfs.append(kf)
            return results, kfs
        res = self.track_frame(bundle)
        if not res.degraded:
            self.update_reference(bundle, res.state)
        kf = self.emit_keyframe(bundle, res.state)
        return [res], ([kf] if kf is not None else [])

    def _trim_buffer(self) -> None:
        # an idle robot must not grow the buffer without bound
        limit = 2 * self.cfg.k_init
        while len(self.buffer) > limit and all(b.stationary_measure < self.cfg.stationary_d
                                               for b in self.buffer[1:2]):
            self.buffer.pop(0)
            # the new first frame has no predecessor inside the buffer
            b = self.buffer[0]
            self.buffer[0] = FrameBundle(b.scan_stamp, b.lines, b.corners, None, None, None, b.wheel_pose, b.points)


def _match_key(matches) -> list:
    return [(id(m.ref_line), id(m.cur_line)) for m in matches]


def _bias_hold(prev: State):
    """Weak random-walk tie used when an IMU window is missing."""
    mean = np.concatenate([prev.bias.accel, prev.bias.gyro, prev.v])
    W = np.diag([1 / 0.01] * 3 + [1 / 1e-3] * 3 + [1 / 1.0] * 3)

    def fn(ba, bg, v):
        r = W @ (np.concatenate([ba, bg, v]) - mean)
        return r, [W[:, 0:3], W[:, 3:6], W[:, 6:9]]

    return fn
