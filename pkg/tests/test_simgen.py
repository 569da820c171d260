import filecmp
import math

import numpy as np
import pytest

from liwslam.dataio import Calibration, load_dataset, scan_to_points
from liwslam.geometry import Pose2, Pose3
from liwslam.scenarios import SCENARIOS, make_scenario, square_loop_world, two_rooms_world
from liwslam.simgen import (Motion, NoiseConfig, Rates, ScanParams, WorldBuilder, build_trajectory, export_dataset,
                            generate_imu, generate_wheel, raycast_scan, read_world, simulate, square_room)


def point_segment_distance(p, walls):
    a, b = walls[:, :2], walls[:, 2:]
    e = b - a
    t = np.clip(((p - a) * e).sum(axis=1) / (e * e).sum(axis=1), 0.0, 1.0)
    return np.linalg.norm(a + t[:, None] * e - p, axis=1).min()


def test_center_of_square_room():
    scan, ids = raycast_scan(square_room(4.0), Pose2(0.0, (0.0, 0.0)), ScanParams(n_beams=4))
    # beams at -pi, -pi/2, 0, pi/2
    assert scan.ranges[2] == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(scan.ranges, 2.0)
    assert ids[2] >= 0


def test_range_clip_in_long_corridor():
    world = WorldBuilder("c").polyline([(0, -1), (40, -1), (40, 1), (0, 1)], closed=True).build()
    scan, ids = raycast_scan(world, Pose2(0.0, (5.0, 0.0)), range_clip=3.0)
    # side walls are 1 m away, so beams within asin(1/3) of the axis would travel past 3 m
    fwd = np.abs(scan.angles) < math.asin(1.0 / 3.0)
    assert np.all(np.isnan(scan.ranges[fwd])) and np.all(ids[fwd] == -1)
    assert np.nanmax(scan.ranges) <= 3.0
    assert scan.range_max == 3.0


def test_noisy_points_near_walls():
    world = square_loop_world()
    sigma = 0.01
    pose = Pose2(0.4, (-4.0, -5.2))
    scan, _ = raycast_scan(world, pose, ScanParams(n_beams=1080), noise_sigma=sigma,
                           rng=np.random.default_rng(1))
    pts = scan_to_points(scan).points @ pose.R.T + pose.xy
    d = np.array([point_segment_distance(p, world.walls) for p in pts])
    # Gaussian noise: about 0.3% of beams fall beyond 3 sigma
    assert np.mean(d <= 3 * sigma) >= 0.99
    assert d.max() <= 5 * sigma


def test_noise_free_points_lie_on_walls():
    world = two_rooms_world()
    pose = Pose2(-0.7, (3.0, 2.5))
    scan, ids = raycast_scan(world, pose)
    sp = scan_to_points(scan)
    pts = sp.points @ pose.R.T + pose.xy
    for p, wid in zip(pts, ids[sp.beam_indices]):
        w = world.walls[world.wall_ids == wid]
        assert point_segment_distance(p, w) < 1e-9


def test_pose_outside_world_rejected():
    with pytest.raises(ValueError):
        raycast_scan(square_room(4.0), Pose2(0.0, (5.0, 0.0)))


def test_stationary_imu_reads_minus_gravity():
    calib = Calibration(T_imu_base=Pose3((0.0, 0.0, 0.3), (0.1, 0.0, 0.0)))
    traj = build_trajectory(Pose2(0.5, (1.0, 2.0)), [Motion("wait", duration=2.0)])
    imu = generate_imu(traj, calib)
    R_bi = calib.T_base_imu.R
    assert np.allclose(imu.accel, R_bi.T @ [0, 0, 9.81], atol=1e-12)
    assert np.allclose(imu.gyro, 0.0, atol=1e-15)


def test_constant_speed_line():
    traj = build_trajectory(Pose2(0.3, (0.0, 0.0)), [Motion("cruise", amount=1.5, duration=2.0)])
    imu = generate_imu(traj, Calibration())
    assert np.allclose(imu.accel, [0, 0, 9.81], atol=1e-12)
    assert np.allclose(imu.gyro, 0.0, atol=1e-15)


def test_arc_centripetal_acceleration():
    v, w = 0.8, 0.5
    traj = build_trajectory(Pose2(0.0, (0.0, 0.0)), [Motion("arc", amount=w * 4.0, duration=4.0,
                                                             radius=v / w)])
    imu = generate_imu(traj, Calibration())
    inner = imu.accel[5:-5]
    # left turn: centripetal acceleration points along body +y
    assert np.allclose(inner[:, 1], v * w, atol=1e-12)
    assert np.allclose(inner[:, 0], 0.0, atol=1e-12)
    assert np.allclose(imu.gyro[5:-5, 2], w, atol=1e-12)


def test_zero_noise_wheel_matches_ground_truth():
    traj = build_trajectory(Pose2(0.2, (0.5, -0.5)), [Motion("fwd", 2.0), Motion("turn", 1.0),
                                                       Motion("fwd", 1.0)])
    wheel = generate_wheel(traj, NoiseConfig.zero())
    for t, xyz, rv in zip(wheel.stamps, wheel.xyz, wheel.rotvec):
        gt = traj.pose(t)
        assert np.abs(xyz[:2] - gt.xy).max() < 1e-12
        assert abs(math.remainder(rv[2] - gt.yaw, 2 * math.pi)) < 1e-12


def test_stationary_wheel_increment_is_exactly_zero():
    traj = build_trajectory(Pose2(0.0, (0.0, 0.0)), [Motion("fwd", 1.0), Motion("wait", duration=2.0)])
    wheel = generate_wheel(traj, NoiseConfig(seed=3))
    rest = wheel.stamps >= traj.segments[1].t0 + 1e-9
    assert rest.sum() > 50
    assert np.all(wheel.xyz[rest] == wheel.xyz[rest][0])
    assert np.all(wheel.rotvec[rest] == wheel.rotvec[rest][0])


def test_wheel_slip_monte_carlo():
    traj = build_trajectory(Pose2(0.0, (0.0, 0.0)), [Motion("fwd", 100.0)])
    rates = Rates(wheel_hz=10.0)
    cfg = dict(range_sigma=0.0, accel_density=0.0, gyro_density=0.0, accel_bias=(0, 0, 0),
               gyro_bias=(0, 0, 0), slip=0.01, yaw_per_m=0.0, yaw_per_rad=0.0)
    stamps = generate_wheel(traj, NoiseConfig.zero(), rates).stamps
    steps = np.diff([traj.pose(t).xy[0] for t in stamps])
    # per-step multiplicative slip: the along-track error is a sum of independent terms
    std_oracle = 0.01 * math.sqrt(float(np.sum(steps ** 2)))
    errs = []
    for seed in range(40):
        w = generate_wheel(traj, NoiseConfig(seed=seed, **cfg), rates)
        errs.append(w.xyz[-1, 0] - 100.0)
    errs = np.array(errs)
    assert abs(errs.mean()) < 3 * std_oracle / math.sqrt(len(errs))
    assert 0.7 < errs.std(ddof=1) / std_oracle < 1.3


def small_sim(seed):
    traj = build_trajectory(Pose2(0.0, (-1.0, 0.0)), [Motion("wait", duration=0.5), Motion("fwd", 1.0)])
    return simulate(square_room(5.0), traj, Calibration(), NoiseConfig(seed=seed))


def test_generation_is_seeded():
    a, b, c = small_sim(5), small_sim(5), small_sim(6)
    assert a.dataset.imu == b.dataset.imu and a.dataset.wheel == b.dataset.wheel
    assert all(np.array_equal(x.ranges, y.ranges, equal_nan=True) for x, y in zip(a.dataset.scans, b.dataset.scans))
    assert not a.dataset.imu == c.dataset.imu


def test_export_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        export_dataset(make_scenario("corridor_clip", seed=7), tmp_path / d)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert cmp.left_only == [] and cmp.right_only == [] and cmp.diff_files == []
    assert len(cmp.same_files) >= 7
    ds = load_dataset(tmp_path / "a")
    assert max(np.nanmax(s.ranges) for s in ds.scans) <= 3.0
    assert (tmp_path / "a" / "overrides.cfg").read_text() == "frontend.m_init=2\n"
    w = read_world(tmp_path / "a" / "world.csv")
    assert np.array_equal(w.walls, make_scenario("corridor_clip").world.walls)


def test_bundled_scenarios_present():
    assert set(SCENARIOS) == {"square_loop", "corridor_clip", "two_rooms"}
    with pytest.raises(ValueError):
        make_scenario("nope")
    sim = make_scenario("square_loop")
    xy = np.array([p.translation[:2] for p in sim.gt_poses])
    path = np.linalg.norm(np.diff(xy, axis=0), axis=1).sum()
    assert 40.0 <= path <= 48.0
    # the route returns to its start
    assert np.linalg.norm(xy - xy[0], axis=1)[len(xy) // 2:].min() < 0.05
