"""Replay driver: tracker, loop detection, pose graph and map in one process."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backend import PoseGraph
from .config import Config
from .dataio import Dataset, iter_frames
from .factors import chassis_pose, lidar_pose
from .frontend import Frontend, Keyframe, make_bundle
from .geometry import Pose2, Pose3, compose
from .loopdetect import DescriptorDatabase, LoopConstraint
from .mapping import GridMap, build_map

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


@dataclass
class FrameRecord:
    stamp: float
    chassis: Pose3          # tracker output in its own odometry frame
    lidar2: Pose2
    live: Pose3             # after the latest broadcast correction
    kf_id: int              # most recent keyframe at or before this frame (-1 if none yet)
    n_lines: int
    n_matches: int
    degraded: bool


@dataclass
class LoopEvent:
    constraint: LoopConstraint
    detect_ms: float
    optimize_ms: float
    candidates: int
    correction: Pose2


@dataclass
class RunStats:
    frame_ms: list = field(default_factory=list)
    feature_ms: list = field(default_factory=list)
    detect_ms: list = field(default_factory=list)
    n_frames_in: int = 0

    def summary(self, records: list[FrameRecord], loops: list[LoopEvent], n_kf: int) -> dict:
        fm = np.asarray(self.frame_ms) if self.frame_ms else np.zeros(1)
        lines = np.array([r.n_lines for r in records]) if records else np.zeros(1)
        matched = np.array([r.n_matches for r in records]) if records else np.zeros(1)
        out = {
            "frames_in": self.n_frames_in,
            "frames_tracked": len(records),
            "keyframes": n_kf,
            "degraded_frames": int(sum(r.degraded for r in records)),
            "track_ms_mean": float(fm.mean()),
            "track_ms_median": float(np.median(fm)),
            "track_ms_p95": float(np.percentile(fm, 95)),
            "track_ms_max": float(fm.max()),
            "feature_ms_mean": float(np.mean(self.feature_ms)) if self.feature_ms else 0.0,
            "lines_extracted_mean": float(lines.mean()),
            "lines_matched_mean": float(matched.mean()),
            "loops": len(loops),
            "loop_detect_ms_mean": float(np.mean(self.detect_ms)) if self.detect_ms else 0.0,
            "loop_detect_ms_max": float(np.max(self.detect_ms)) if self.detect_ms else 0.0,
            "loop_optimize_ms_mean": float(np.mean([e.optimize_ms for e in loops])) if loops else 0.0,
        }
        return out


class Pipeline:
    def __init__(self, calib, cfg: Config | None = None):
        self.cfg = cfg or Config()
        c = self.cfg
        c.frontend.wheel_factor = c.frontend.wheel_factor and c.run.wheel_factor
        c.frontend.ground_factor = c.frontend.ground_factor and c.run.ground_factor
        self.calib = calib
        self.frontend = Frontend(calib, c.frontend, c.match)
        self.graph = PoseGraph(c.backend)
        self.db = DescriptorDatabase(c.loop)
        self.keyframes: list[Keyframe] = []
        self.records: list[FrameRecord] = []
        self.loops: list[LoopEvent] = []
        self.stats = RunStats()
        self.offset = Pose2()
        self._prev_wheel = None

    # --------------------------------------------------------------- frames

    def process_frame(self, frame) -> list[FrameRecord]:
        self.stats.n_frames_in += 1
        clip = self.cfg.run.range_clip
        if clip is not None and clip < frame.scan.range_max:
            frame = replace(frame, scan=replace(frame.scan, range_max=float(clip)))
        if frame.imu is None:
            self._prev_wheel = None
        t0 = time.perf_counter()
        bundle = make_bundle(frame, self._prev_wheel, self.cfg.features)
        t1 = time.perf_counter()
        self._prev_wheel = frame.wheel_pose
        results, kfs = self.frontend.process(bundle)
        t2 = time.perf_counter()
        self.stats.feature_ms.append(1e3 * (t1 - t0))
        if results:
            self.stats.frame_ms.append(1e3 * (t2 - t0))
        # keyframes of this call are all at or before its last result
        kf_by_stamp = {kf.stamp: kf for kf in kfs}
        out = []
        for r in results:
            kf = kf_by_stamp.get(r.stamp)
            if kf is not None:
                self.keyframes.append(kf)
                self._backend_step(kf)
            ch = chassis_pose(r.state, self.calib)
            rec = FrameRecord(r.stamp, ch, lidar_pose(r.state, self.calib).to_pose2(),
                              compose(self.offset.to_pose3(), ch),
                              self.keyframes[-1].id if self.keyframes else -1,
                              r.n_lines, r.n_matches, r.degraded)
            self.records.append(rec)
            out.append(rec)
        return out

    def _backend_step(self, kf: Keyframe) -> None:
        self.graph.add_keyframe(kf.id, kf.pose2, kf.stamp)
        if not self.cfg.run.loop_closure:
            return
        t0 = time.perf_counter()
        entry = self.db.make_entry(kf.id, kf.pose2, kf.corners, kf.scan_points[:, :2], kf.stamp, kf.lines)
        lc = self.db.detect(entry)
        self.db.add(entry)
        t1 = time.perf_counter()
        self.stats.detect_ms.append(1e3 * (t1 - t0))
        if lc is None:
            return
        self.graph.add_loop(lc)
        res = self.graph.optimize()
        t2 = time.perf_counter()
        self.offset = self.graph.correction_for(self.graph.last_id)
        log.info("loop %d -> %d rms=%.4f correction=(%.4f, %.4f, %.5f)", lc.from_id, lc.to_id, lc.post_icp_rms,
                 *self.offset.as_array())
        self.loops.append(LoopEvent(lc, 1e3 * (t1 - t0), 1e3 * (t2 - t1), self.db.last_timing.get("candidates", 0),
                                    res.correction if res else Pose2()))

    def run(self, ds: Dataset) -> "Pipeline":
        for fr in iter_frames(ds):
            self.process_frame(fr)
        if not self.frontend.initialized:
            raise InitializationError(
                f"initialization never succeeded over {self.stats.n_frames_in} frames "
                f"(need {self.cfg.frontend.k_init} moving frames with >= {self.cfg.frontend.m_init} line matches)")
        return self

    # -------------------------------------------------------------- outputs

    def frontend_trajectory(self) -> tuple[list[float], list[Pose3]]:
        return [r.stamp for r in self.records], [r.chassis for r in self.records]

    def optimized_trajectory(self) -> tuple[list[float], list[Pose3]]:
        """Frames carried by the final keyframe corrections, interpolated in time between keyframes."""
        ids = list(self.graph.nodes)
        if not ids or not self.graph.loop_edges:
            return self.frontend_trajectory()
        kst = np.array([self.graph.stamps[k] for k in ids])
        corr = np.array([self.graph.correction_for(k).as_array() for k in ids])
        corr[:, 2] = np.unwrap(corr[:, 2])
        poses = []
        for r in self.records:
            j = int(np.searchsorted(kst, r.stamp, side="right")) - 1
            if j < 0:
                c = corr[0]
            elif j >= len(ids) - 1:
                c = corr[-1]
            else:
                s = (r.stamp - kst[j]) / (kst[j + 1] - kst[j])
                c = (1 - s) * corr[j] + s * corr[j + 1]
            poses.append(compose(Pose2(float(c[2]), c[:2]).to_pose3(), r.chassis))
        return [r.stamp for r in self.records], poses

    def optimized_keyframe_poses(self) -> dict[int, Pose2]:
        return dict(self.graph.nodes)

    def build_map(self) -> GridMap:
        return build_map(self.keyframes, self.optimized_keyframe_poses(), self.cfg.map)

    def summary(self) -> dict:
        return self.stats.summary(self.records, self.loops, len(self.keyframes))

    def keyframe_database(self) -> DescriptorDatabase:
        """Database of all keyframes at their optimized poses, for later localization."""
        db = DescriptorDatabase(self.cfg.loop)
        nodes = self.graph.nodes
        for kf in self.keyframes:
            db.add(db.make_entry(kf.id, nodes.get(kf.id, kf.pose2), kf.corners, kf.scan_points[:, :2], kf.stamp,
                                 kf.lines))
        return db
