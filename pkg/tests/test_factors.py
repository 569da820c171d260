import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liwslam.dataio import Calibration, GroundSigma, scan_to_points, wheel_pose_at
from liwslam.factors import (LineMatch, MatchConfig, WheelDelta, chassis_pose, ground_residual,
                             ground_residual_raw, ground_tilt_vector_raw, lidar_pose, line_residual,
                             line_residual_raw, match_lines, prior_residual, prior_residual_raw,
                             state_boxminus, state_boxplus, wheel_delta, wheel_residual, wheel_residual_raw)
from liwslam.features import DegenerateGeometryError, LineSegment, extract_scan_features, fit_line
from liwslam.geometry import Pose3, between, exp_so3, rotz
from liwslam.preintegration import ImuBias, State
from liwslam.scenarios import default_calibration, two_rooms
from liwslam.simgen import NoiseConfig
from liwslam.solver import ROTVEC, VECTOR, ResidualBlock, check_jacobian


def seg(a, b):
    return fit_line(np.array([a, b], dtype=float))


def unit_calib():
    c = Calibration()
    c.line_sigma = 1.0
    return c


# ------------------------------------------------------------------ match

def square_lines():
    return [seg((2, -2), (2, 2)), seg((2, 2), (-2, 2)), seg((-2, 2), (-2, -2)), seg((-2, -2), (2, -2))]


def test_identical_frames_match_themselves():
    lines = square_lines()
    ms = match_lines(lines, lines, Pose3.identity())
    assert len(ms) == 4
    for m in ms:
        assert m.ref_line is m.cur_line and m.angle == pytest.approx(0.0, abs=1e-7)


def test_angle_threshold_semantics():
    lines = square_lines()
    R = Pose3((0, 0, math.radians(5)), (0, 0, 0))
    rotated = [LineSegment.transformed(l, R.R[:2, :2], np.zeros(2)) for l in lines]
    assert len(match_lines(rotated, lines, Pose3.identity(), MatchConfig(theta_match_deg=10))) == 4
    assert match_lines(rotated, lines, Pose3.identity(), MatchConfig(theta_match_deg=2)) == []


def test_overlap_and_distance_gates():
    ref = [seg((0, 0), (2, 0))]
    # colinear but disjoint along the line
    assert match_lines([seg((3, 0), (5, 0))], ref) == []
    # parallel 0.6 m away
    assert match_lines([seg((0, 0.6), (2, 0.6))], ref) == []
    # short piece inside a long wall still matches
    assert len(match_lines([seg((0.8, 0.05), (1.1, 0.05))], ref)) == 1


def test_smallest_angle_wins():
    ref = [seg((0, 0), (2, 0.2)), seg((0, 0.1), (2, 0.1))]
    ms = match_lines([seg((0, 0), (2, 0))], ref)
    assert len(ms) == 1 and ms[0].ref_line is ref[1]


def test_simulator_matches_same_wall():
    sim = two_rooms(noise=NoiseConfig(seed=1))
    calib = sim.calib
    frames = []
    for k in (30, 33):
        t = sim.gt_stamps[k]
        sp = scan_to_points(sim.dataset.scans[k])
        f = extract_scan_features(sp.points, sp.beam_indices, closed=True)
        frames.append((t, f.lines, sim.wall_ids[k]))
    T = between(lidar_pose(sim.imu_state(frames[0][0]), calib), lidar_pose(sim.imu_state(frames[1][0]), calib))
    ms = match_lines(frames[1][1], frames[0][1], T)
    assert len(ms) >= 10

    def wall_of(line, ids):
        # lines crossing the scan seam have first_beam > last_beam
        b = np.arange(line.first_beam, line.last_beam + 1 + (len(ids) if line.last_beam < line.first_beam else 0))
        b %= len(ids)
        vals, counts = np.unique(ids[b][ids[b] >= 0], return_counts=True)
        return vals[np.argmax(counts)]

    same = [wall_of(m.ref_line, frames[0][2]) == wall_of(m.cur_line, frames[1][2]) for m in ms]
    assert np.mean(same) >= 0.9


# --------------------------------------------------------------- line residual

def identity_states():
    return State(), State()


def test_parallel_offset_and_single_endpoint():
    c = unit_calib()
    c.T_imu_base = Pose3.identity()
    c.T_base_lidar = Pose3.identity()
    ref = seg((0, 0), (2, 0))
    r = line_residual(LineMatch(ref, seg((0, 0.1), (2, 0.1))), *identity_states(), c)
    assert np.allclose(np.abs(r), [0.1, 0.1], atol=1e-12)
    r = line_residual(LineMatch(ref, seg((0.5, 0.0), (1.5, 0.2))), *identity_states(), c)
    assert np.allclose(np.abs(r), [0.0, 0.2], atol=1e-12)


def test_endpoint_swap_permutes():
    rng = np.random.default_rng(0)
    c = default_calibration()
    ref = seg((0, 1), (3, 1.5))
    cur = seg((0.2, 1.3), (2.0, 0.9))
    swapped = seg((2.0, 0.9), (0.2, 1.3))
    sr = State(rng.normal(size=3), rng.normal(size=3) * 0.3)
    sc = State(rng.normal(size=3), rng.normal(size=3) * 0.3)
    a = line_residual(LineMatch(ref, cur), sr, sc, c)
    b = line_residual(LineMatch(ref, swapped), sr, sc, c)
    assert np.allclose(a, b[::-1], atol=1e-12)


def test_degenerate_reference_rejected():
    ref = LineSegment(np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0]), np.array([1.0, 0.0]), 2)
    with pytest.raises(DegenerateGeometryError):
        line_residual(LineMatch(ref, seg((0, 0), (1, 0))), *identity_states(), unit_calib())


def test_line_residual_zero_on_noise_free_simulation():
    sim = two_rooms(noise=NoiseConfig.zero())
    calib = sim.calib
    feats = {}
    for k in (40, 44, 120):
        sp = scan_to_points(sim.dataset.scans[k])
        feats[k] = extract_scan_features(sp.points, sp.beam_indices, closed=True).lines
    worst, n = 0.0, 0
    for a, b in ((40, 44), (40, 120)):
        sa, sb = sim.imu_state(sim.gt_stamps[a]), sim.imu_state(sim.gt_stamps[b])
        T = between(lidar_pose(sa, calib), lidar_pose(sb, calib))
        for m in match_lines(feats[b], feats[a], T):
            r = line_residual(m, sa, sb, calib, sigma=1.0)
            worst = max(worst, np.abs(r).max())
            n += 1
    assert n >= 10
    assert worst <= 1e-9


# ------------------------------------------------------------------- wheel

def test_wheel_delta_examples():
    w = wheel_delta(Pose3.identity(), Pose3.from_rt(rotz(math.pi / 2), (3, 4, 0)))
    assert w.d == pytest.approx(5.0) and w.theta_d == pytest.approx(math.atan2(4, 3))
    assert w.theta == pytest.approx(math.pi / 2) and not w.degenerate
    w = wheel_delta(Pose3.identity(), Pose3.identity())
    assert (w.d, w.theta_d, w.theta) == (0.0, 0.0, 0.0) and w.degenerate


def test_wheel_delta_matrix_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        # planar poses, where the increment is symmetric under reversal
        a = Pose3((0.0, 0.0, rng.uniform(-3, 3)), (*rng.normal(size=2), 0.0))
        b = Pose3((0.0, 0.0, rng.uniform(-3, 3)), (*rng.normal(size=2), 0.0))
        T = np.linalg.inv(a.matrix()) @ b.matrix()
        w = wheel_delta(a, b)
        assert w.d == pytest.approx(math.hypot(T[0, 3], T[1, 3]), abs=1e-12)
        assert w.theta_d == pytest.approx(math.atan2(T[1, 3], T[0, 3]), abs=1e-12)
        ang = math.acos(np.clip((np.trace(T[:3, :3]) - 1) / 2, -1, 1))
        assert w.theta == pytest.approx(ang, abs=1e-9)
        back = wheel_delta(b, a)
        assert back.d == pytest.approx(w.d, abs=1e-12) and back.theta == pytest.approx(w.theta, abs=1e-12)


def test_wheel_residual_first_row_and_wrap():
    c = Calibration()
    c.T_imu_base = Pose3.identity()
    si, sj = State(), State(p=[1.0, 0, 0])
    r, _ = wheel_residual_raw(si.p, si.theta, sj.p, sj.theta, WheelDelta(1.1, 0.0, 0.0), c.T_imu_base)
    assert r[0] == pytest.approx(0.1)
    # predicted heading of travel -3.1, measured 3.1
    sj = State(p=[math.cos(-3.1), math.sin(-3.1), 0.0])
    r, _ = wheel_residual_raw(si.p, si.theta, sj.p, sj.theta, WheelDelta(1.0, 3.1, 0.0), c.T_imu_base)
    assert abs(r[1]) == pytest.approx(2 * math.pi - 6.2, abs=1e-12)


def test_wheel_degenerate_direction_row_zeroed():
    c = Calibration()
    s = State()
    r = wheel_residual(s, s, WheelDelta(0.0, 0.0, 0.0, True), c)
    assert np.array_equal(r, np.zeros(3))


def test_wheel_residual_zero_on_simulated_increment():
    sim = two_rooms(noise=NoiseConfig.zero())
    calib = sim.calib
    worst = 0.0
    for a, b in zip(sim.gt_stamps[10:200:7], sim.gt_stamps[11:201:7]):
        meas = wheel_delta(wheel_pose_at(sim.dataset.wheel, a), wheel_pose_at(sim.dataset.wheel, b))
        r = wheel_residual(sim.imu_state(a), sim.imu_state(b), meas, calib)
        worst = max(worst, np.abs(r).max())
    assert worst <= 1e-8


# ------------------------------------------------------------------ ground

def level_calib():
    c = Calibration()
    c.T_imu_base = Pose3.identity()
    c.ground_sigma = GroundSigma(1.0, 1.0)
    return c


def test_ground_examples():
    c = level_calib()
    assert np.array_equal(ground_residual(State(), c), [0.0, 0.0])
    assert np.allclose(ground_residual(State(p=[0, 0, 0.05]), c), [0.05, 0.0], atol=1e-15)
    assert np.allclose(ground_residual(State(theta=[0.1, 0, 0]), c), [0.0, 0.1], atol=1e-6)


def test_ground_zero_on_simulated_states():
    sim = two_rooms(noise=NoiseConfig.zero())
    worst = max(np.abs(ground_residual(sim.imu_state(t), sim.calib)).max() for t in sim.gt_stamps[::11])
    assert worst <= 1e-8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6))
def test_tilt_vector_has_same_norm(v):
    T_bo = default_calibration().T_imu_base
    p, th = np.array(v[:3]), np.array(v[3:])
    a, _ = ground_residual_raw(p, th, T_bo, with_jac=False)
    b, _ = ground_tilt_vector_raw(p, th, T_bo, with_jac=False)
    assert a[0] == b[0]
    assert np.linalg.norm(b[1:]) == pytest.approx(a[1], abs=1e-12)


# ------------------------------------------------------------------- prior

def random_state(rng):
    return State(rng.normal(size=3), rng.normal(size=3) * 0.8, rng.normal(size=3),
                 ImuBias(rng.normal(size=3) * 0.1, rng.normal(size=3) * 0.01))


def test_prior_examples():
    rng = np.random.default_rng(3)
    s = random_state(rng)
    assert np.array_equal(prior_residual(s, s, np.eye(15)), np.zeros(15))
    t = s.copy()
    t.p = t.p + [0.1, 0, 0]
    assert prior_residual(t, s, np.eye(15))[0] == pytest.approx(0.1)


def test_prior_matches_tangent_difference():
    rng = np.random.default_rng(4)
    for _ in range(50):
        mean = random_state(rng)
        delta = rng.normal(size=15) * 0.2
        moved = state_boxplus(mean, delta)
        assert np.allclose(prior_residual(moved, mean, np.eye(15)), delta, atol=1e-9)
        assert np.allclose(state_boxminus(moved, mean), delta, atol=1e-9)


# --------------------------------------------------------------- jacobians

def test_chassis_and_lidar_pose_chain():
    c = default_calibration()
    s = State(p=[1, 2, 0.1], theta=[0.0, 0.0, 0.7])
    T_wo = chassis_pose(s, c)
    T_wl = lidar_pose(s, c)
    assert np.allclose((T_wo @ c.T_base_lidar).matrix(), T_wl.matrix(), atol=1e-12)
    assert np.allclose((Pose3(s.theta, s.p) @ c.T_imu_base).matrix(), T_wo.matrix(), atol=1e-12)


PAIR = [VECTOR, ROTVEC, VECTOR, ROTVEC]


def worst_over(rng, make_block, kinds, draw, n=100):
    return max(check_jacobian(make_block(), draw(rng), kinds) for _ in range(n))


def test_factor_jacobians_finite_difference():
    rng = np.random.default_rng(5)
    c = default_calibration()
    T_bl = c.T_imu_base @ c.T_base_lidar
    T_bo = c.T_imu_base
    pts = lambda r: [r.normal(size=3), r.normal(size=3) * 0.8, r.normal(size=3), r.normal(size=3) * 0.8]

    def line_block():
        nc = rng.normal(size=(3, 3))
        nc[:, :2] /= np.linalg.norm(nc[:, :2], axis=1)[:, None]
        e = rng.normal(size=(3, 2, 2)) * 3
        return ResidualBlock(list("abcd"), lambda *v: line_residual_raw(*v, nc, e, T_bl))

    def wheel_block():
        m = WheelDelta(*rng.uniform(0.0, 1.0, 3))
        return ResidualBlock(list("abcd"), lambda *v: wheel_residual_raw(*v, m, T_bo))

    def ground_block():
        return ResidualBlock(list("ab"), lambda *v: ground_residual_raw(*v, T_bo))

    def tilt_block():
        return ResidualBlock(list("ab"), lambda *v: ground_tilt_vector_raw(*v, T_bo))

    def prior_block():
        mean = random_state(rng)
        return ResidualBlock(list("abcde"), lambda *v: prior_residual_raw(*v, mean=mean))

    assert worst_over(rng, line_block, PAIR, pts) <= 1e-5
    assert worst_over(rng, wheel_block, PAIR, pts) <= 1e-5
    two = lambda r: [r.normal(size=3), r.normal(size=3) * 0.5]
    assert worst_over(rng, ground_block, [VECTOR, ROTVEC], two) <= 1e-5
    assert worst_over(rng, tilt_block, [VECTOR, ROTVEC], two) <= 1e-5
    five = lambda r: [r.normal(size=3), r.normal(size=3) * 0.8, r.normal(size=3), r.normal(size=3),
                      r.normal(size=3)]
    assert worst_over(rng, prior_block, [VECTOR, ROTVEC, VECTOR, VECTOR, VECTOR], five) <= 1e-5
