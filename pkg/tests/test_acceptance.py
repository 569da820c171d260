"""Acceptance criteria, one test each, at their stated tolerances.

Every test reports a PASS/FAIL line (collected again in the terminal
summary) before asserting, so a failing criterion still shows its numbers.
"""
import math
import time

import numpy as np
import pytest

from liwslam.cli import localize
from liwslam.config import Config
from liwslam.dataio import ImuStream, imu_window, iter_frames, scan_to_points, wheel_pose_at
from liwslam.evaluation import ErrorStats, Trajectory, ape_rmse, associate
from liwslam.factors import (WheelDelta, ground_residual, ground_residual_raw, ground_tilt_vector_raw, lidar_pose,
                             line_residual, line_residual_raw, match_lines, prior_residual_raw, wheel_delta,
                             wheel_residual, wheel_residual_raw)
from liwslam.features import extract_scan_features
from liwslam.frontend import Frontend, bundles_from_frames
from liwslam.geometry import Pose2, between, exp_so3, log_so3, rotz
from liwslam.loopdetect import DescriptorDatabase, LoopConfig, build_descriptors, match_frames, num_trials, \
    solve_relative_pose
from liwslam.mapping import GridMap, MapConfig, classify, smooth
from liwslam.preintegration import ImuBias, NoiseParams, State, imu_residual, imu_residual_raw, integrate
from liwslam.scenarios import default_calibration
from liwslam.simgen import gravity_vector
from liwslam.solver import ROTVEC, VECTOR, ResidualBlock, check_jacobian

import simcache


# ------------------------------------------------------------- 1. trials

def test_01_randomized_trial_bound(criterion):
    g = num_trials(0.95, 20, 10)
    reduction = 1 - g / 20
    ok = g == 5 and reduction == 0.75
    assert criterion(1, "randomized trial bound", ok, f"num_trials(0.95, 20, 10) = {g}, reduction {reduction:.0%}")


# ------------------------------------------------------ 2. match success

def synthetic_trial(rng, p, m, c, cfg: LoopConfig, extent=20.0):
    """One match attempt between corner sets sharing ``c`` of ``m`` corners under a random rigid motion."""
    common = rng.uniform(0, extent, (c, 2))
    T = Pose2(rng.uniform(-math.pi, math.pi), rng.uniform(-5, 5, 2))
    M = np.vstack([common, rng.uniform(0, extent, (m - c, 2))])
    N = np.vstack([T.apply(common), T.apply(rng.uniform(0, extent, (m - c, 2)))])
    perm = rng.permutation(m)
    N = N[perm]
    where = np.empty(m, int)
    where[perm] = np.arange(m)
    a_res = math.radians(cfg.a_res_deg)
    res = match_frames(build_descriptors(M, cfg.d_res, a_res), build_descriptors(N, cfg.d_res, a_res), p,
                       cfg.t_min, c / m, np.random.default_rng(int(rng.integers(1 << 31))), cfg.angle_tolerance,
                       cfg.verify_radius)
    if res is None:
        return False
    correct = sum(1 for i, j in res.pairs if i < c and where[i] == j)
    est, _ = solve_relative_pose(N[res.pairs[:, 1]], M[res.pairs[:, 0]])
    err = np.abs(est.apply(common) - T.apply(common)).max()
    # the anchor pair plus t_min partner pairs, and a transform that lands the shared corners
    return correct >= cfg.t_min + 1 and err < 0.1


def test_02_match_success_meets_the_bound(criterion):
    cfg = LoopConfig()
    t0 = time.perf_counter()
    rates = {}
    for p, m, c in ((0.9, 20, 10), (0.95, 30, 15)):
        rng = np.random.default_rng(0)
        rates[(p, m, c)] = np.mean([synthetic_trial(rng, p, m, c, cfg) for _ in range(200)])
    secs = time.perf_counter() - t0
    ok = all(r >= k[0] for k, r in rates.items()) and secs < 10
    detail = ", ".join(f"(p={p}, m={m}, c={c}) success {r:.3f}" for (p, m, c), r in rates.items())
    assert criterion(2, "match_frames success >= p", ok, f"{detail}; {secs:.1f} s")


# -------------------------------------------------------- 3. preintegration

def constant_stream(acc, gyr, T=1.0, hz=200):
    n = int(round(T * hz)) + 1
    return ImuStream(np.arange(n) / hz, np.tile(acc, (n, 1)), np.tile(gyr, (n, 1)))


def closed_form(a, w, T):
    """Body acceleration (a, 0, 0) with yaw rate w from rest."""
    alpha = a * np.array([(1 - math.cos(w * T)) / w ** 2, (w * T - math.sin(w * T)) / w ** 2, 0.0])
    return alpha, rotz(w * T)


def test_03_preintegration_oracle(criterion):
    t0 = time.perf_counter()
    a, w, T = 1.0, 1.0, 1.0
    alpha, R = closed_form(a, w, T)
    pos, rot = {}, {}
    for hz in (200, 400):
        pre = integrate(constant_stream([a, 0, 0], [0, 0, w], T, hz))
        pos[hz] = float(np.abs(pre.alpha - alpha).max())
        rot[hz] = float(np.abs(log_so3(pre.gamma.T @ R)).max())
    # a pure rotation window isolates the rotation integrator
    spin = integrate(constant_stream([0, 0, 0], [0.3, -0.2, math.pi / 2], T, 200))
    rot_spin = float(np.abs(log_so3(spin.gamma.T @ exp_so3(np.array([0.3, -0.2, math.pi / 2]) * T))).max())
    secs = time.perf_counter() - t0
    ok = pos[200] <= 1e-4 and max(rot[200], rot_spin) <= 1e-5 and pos[400] <= pos[200] / 2 and secs < 1
    detail = (f"200 Hz position {pos[200]:.2e} m, rotation {max(rot[200], rot_spin):.1e} rad; "
              f"400 Hz position {pos[400]:.2e} m (ratio {pos[200] / pos[400]:.2f}); {secs:.2f} s")
    assert criterion(3, "preintegration oracle", ok, detail)


# ------------------------------------------------------- 4. zero residual

def test_04_zero_residual_closure(criterion):
    t0 = time.perf_counter()
    sim = simcache.scenario("two_rooms", noise_free=True)
    calib = sim.calib
    worst = {}
    # line factor between scans of the same walls
    feats = {}
    for k in (40, 44, 120):
        sp = scan_to_points(sim.dataset.scans[k])
        feats[k] = extract_scan_features(sp.points, sp.beam_indices, closed=True).lines
    w, n = 0.0, 0
    for a, b in ((40, 44), (40, 120)):
        sa, sb = sim.imu_state(sim.gt_stamps[a]), sim.imu_state(sim.gt_stamps[b])
        for m in match_lines(feats[b], feats[a], between(lidar_pose(sa, calib), lidar_pose(sb, calib))):
            w = max(w, np.abs(line_residual(m, sa, sb, calib, sigma=1.0)).max())
            n += 1
    worst["line"] = w if n >= 10 else math.inf
    # the remaining factors are checked unwhitened: whitening scales by up to 1e5
    g = gravity_vector(calib)
    pairs = list(zip(sim.gt_stamps[5:300:3], sim.gt_stamps[6:301:3]))

    def imu_raw(a, b):
        sa, sb = sim.imu_state(a), sim.imu_state(b)
        z = np.zeros(3)
        pre = integrate(imu_window(sim.dataset.imu, a, b))
        return imu_residual_raw(sa.p, sa.theta, sa.v, z, z, sb.p, sb.theta, sb.v, z, z, pre=pre, g=g,
                                with_jac=False)[0]

    def wheel_raw(a, b):
        sa, sb = sim.imu_state(a), sim.imu_state(b)
        m = wheel_delta(wheel_pose_at(sim.dataset.wheel, a), wheel_pose_at(sim.dataset.wheel, b))
        r = wheel_residual_raw(sa.p, sa.theta, sb.p, sb.theta, m, calib.T_imu_base, with_jac=False)[0]
        if m.degenerate:
            r[1] = 0.0      # no direction of travel when standing still
        return r

    worst["imu"] = max(np.abs(imu_raw(a, b)).max() for a, b in pairs)
    worst["wheel"] = max(np.abs(wheel_raw(a, b)).max() for a, b in pairs)
    worst["ground"] = max(np.abs(ground_residual_raw(*(lambda s: (s.p, s.theta))(sim.imu_state(t)),
                                                     calib.T_imu_base, with_jac=False)[0]).max()
                          for t in sim.gt_stamps[::5])
    secs = time.perf_counter() - t0
    ok = all(v <= 1e-8 for v in worst.values()) and secs < 5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {secs:.1f} s (including simulation)"
    assert criterion(4, "zero-residual closure", ok, detail)


# ----------------------------------------------------------- 5. jacobians

def test_05_jacobian_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    c = default_calibration()
    T_bl = c.T_imu_base @ c.T_base_lidar
    T_bo = c.T_imu_base
    pair = [VECTOR, ROTVEC, VECTOR, ROTVEC]
    draw_pair = lambda: [rng.normal(size=3), rng.normal(size=3) * 0.8, rng.normal(size=3), rng.normal(size=3) * 0.8]
    draw_one = lambda: [rng.normal(size=3), rng.normal(size=3) * 0.5]

    def line_block():
        nc = rng.normal(size=(3, 3))
        nc[:, :2] /= np.linalg.norm(nc[:, :2], axis=1)[:, None]
        e = rng.normal(size=(3, 2, 2)) * 3
        return ResidualBlock(list("abcd"), lambda *v: line_residual_raw(*v, nc, e, T_bl))

    def wheel_block():
        m = WheelDelta(*rng.uniform(0.0, 1.0, 3))
        return ResidualBlock(list("abcd"), lambda *v: wheel_residual_raw(*v, m, T_bo))

    def imu_block():
        n = 21
        s = ImuStream(np.arange(n) * 0.005, rng.normal(size=(n, 3)) + [0, 0, 9.81], rng.normal(size=(n, 3)) * 0.5)
        pre = integrate(s, ImuBias(rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01))
        return ResidualBlock([str(i) for i in range(10)],
                             lambda *v: imu_residual_raw(*v, pre=pre, g=np.array([0, 0, -9.81])))

    def draw_imu():
        v = [rng.normal(size=3) for _ in range(10)]
        for i in (1, 6):
            v[i] = rng.normal(size=3) * 0.8
        for i in (3, 8):
            v[i] = rng.normal(size=3) * 0.1
        for i in (4, 9):
            v[i] = rng.normal(size=3) * 0.01
        return v

    def prior_block():
        mean = State(rng.normal(size=3), rng.normal(size=3) * 0.8, rng.normal(size=3),
                     ImuBias(rng.normal(size=3) * 0.1, rng.normal(size=3) * 0.01))
        return ResidualBlock(list("abcde"), lambda *v: prior_residual_raw(*v, mean=mean))

    suites = {
        "line": (line_block, pair, draw_pair),
        "imu": (imu_block, [VECTOR, ROTVEC, VECTOR, VECTOR, VECTOR] * 2, draw_imu),
        "wheel": (wheel_block, pair, draw_pair),
        "ground": (lambda: ResidualBlock(list("ab"), lambda *v: ground_residual_raw(*v, T_bo)),
                   [VECTOR, ROTVEC], draw_one),
        "ground_tilt": (lambda: ResidualBlock(list("ab"), lambda *v: ground_tilt_vector_raw(*v, T_bo)),
                        [VECTOR, ROTVEC], draw_one),
        "prior": (prior_block, [VECTOR, ROTVEC, VECTOR, VECTOR, VECTOR],
                  lambda: [rng.normal(size=3), rng.normal(size=3) * 0.8, rng.normal(size=3), rng.normal(size=3),
                           rng.normal(size=3)]),
    }
    worst = {name: max(check_jacobian(make(), draw(), kinds) for _ in range(100))
             for name, (make, kinds, draw) in suites.items()}
    secs = time.perf_counter() - t0
    ok = all(v <= 1e-5 for v in worst.values()) and secs < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" over 100 points each; {secs:.1f} s"
    assert criterion(5, "Jacobian finite differences", ok, detail)


# ------------------------------------------------------ 6. square loop

@pytest.mark.slow
def test_06_square_loop_end_to_end(criterion):
    sim, pl, secs = simcache.run("square_loop")
    front = simcache.ape(sim, pl.frontend_trajectory())
    opt = simcache.ape(sim, pl.optimized_trajectory())
    ok = opt <= 0.05 and opt <= front and secs < 120
    detail = (f"optimized APE {opt * 1e3:.3f} mm, frontend-only APE {front * 1e3:.3f} mm, "
              f"{len(pl.loops)} loops; {secs:.1f} s")
    assert criterion(6, "square_loop APE after loop closure", ok, detail)


# ----------------------------------------------------- 7. corridor wheel

@pytest.mark.slow
def test_07_corridor_wheel_factor_ordering(criterion):
    rows, total = [], 0.0
    for seed in range(5):
        sim, on, s_on = simcache.run("corridor_clip", seed)
        _, off, s_off = simcache.run("corridor_clip", seed, run__wheel_factor=False)
        total += s_on + s_off
        rows.append((seed, simcache.ape(sim, on.optimized_trajectory()), simcache.ape(sim, off.optimized_trajectory())))
    ok = all(a < b for _, a, b in rows) and total < 120
    detail = "; ".join(f"seed {s}: on {a:.4f} m < off {b:.4f} m" if a < b else f"seed {s}: on {a:.4f} m >= off {b:.4f} m"
                       for s, a, b in rows) + f"; {total:.1f} s"
    assert criterion(7, "corridor_clip wheel factor on < off", ok, detail)


# ------------------------------------------------------- 8. loop accuracy

@pytest.mark.slow
def test_08_two_rooms_loop_accuracy(criterion):
    sim, pl, secs = simcache.run("two_rooms")
    errs = simcache.loop_errors(sim, pl)
    t = max((e[0] for e in errs), default=math.inf)
    r = math.degrees(max((e[1] for e in errs), default=math.inf))
    ok = bool(errs) and t < 0.05 and r < 1.0 and secs < 60
    detail = f"{len(errs)} loops, worst translation {t * 1e3:.2f} mm, worst rotation {r:.3f} deg; {secs:.1f} s"
    assert criterion(8, "two_rooms loop relative pose", ok, detail)


# ---------------------------------------------------- 9. localization speed

def scan_entry(db, kid, scan, pose, cfg):
    sp = scan_to_points(scan)
    feats = extract_scan_features(sp.points, sp.beam_indices, cfg.features, scan.stamp, closed=True)
    return db.make_entry(kid, pose, feats.corners, sp.points, scan.stamp, feats.lines)


@pytest.mark.slow
def test_09_localization_speed(criterion):
    t_start = time.perf_counter()
    cfg = Config()
    sim = simcache.scenario("square_loop")
    scans = sim.dataset.scans
    stored = np.unique(np.rint(np.linspace(0, len(scans) - 1, 500)).astype(int))
    assert len(stored) == 500
    db = DescriptorDatabase(cfg.loop)
    for kid, i in enumerate(stored):
        db.add(scan_entry(db, kid, scans[i], simcache.gt_lidar(sim, scans[i].stamp), cfg))
    held_out = np.setdiff1d(np.arange(len(scans)), stored)
    queries = held_out[np.rint(np.linspace(0, len(held_out) - 1, 20)).astype(int)]
    times, errs, found = [], [], 0
    for i in queries:
        # best of three repeats, to time the work rather than scheduler noise
        best = math.inf
        for _ in range(3):
            t0 = time.perf_counter()
            res = localize(db, scans[i], cfg)
            best = min(best, time.perf_counter() - t0)
        times.append(1e3 * best)
        if res is not None:
            found += 1
            errs.append(float(np.linalg.norm(res[0].xy - simcache.gt_lidar(sim, scans[i].stamp).xy)))
    total = time.perf_counter() - t_start
    ok = max(times) < 50 and found >= 0.9 * len(queries) and total < 60
    detail = (f"500 keyframes, {len(queries)} queries: max {max(times):.1f} ms, mean {np.mean(times):.1f} ms, "
              f"{found} localized (worst error {max(errs, default=math.nan) * 1e3:.1f} mm); {total:.1f} s")
    assert criterion(9, "localization < 50 ms per query", ok, detail)


# ------------------------------------------------ 10. tracking throughput

@pytest.mark.slow
def test_10_tracking_throughput(criterion):
    sim = simcache.scenario("two_rooms")
    fe = Frontend(sim.calib)
    assert fe.cfg.window == 5
    t0 = time.perf_counter()
    n = 0
    for b in bundles_from_frames(iter_frames(sim.dataset)):
        res, _ = fe.process(b)
        n += len(res)
    wall = time.perf_counter() - t0
    span = sim.dataset.scans[-1].stamp - sim.dataset.scans[0].stamp
    ratio = span / wall
    ok = ratio >= 2.0 and n > 0.9 * len(sim.dataset.scans)
    detail = (f"{n} frames tracked, {span:.1f} s of 10 Hz data in {wall:.1f} s "
              f"({ratio:.1f}x real time, {1e3 * wall / len(sim.dataset.scans):.1f} ms per scan)")
    assert criterion(10, "tracking >= 2x real time", ok, detail)


# -------------------------------------------------------- 11. map quality

def test_11_map_quality(criterion):
    cfg = MapConfig()
    grid = simcache.room_grid(4.0, n=5, seed=0, cfg=cfg)
    img = classify(smooth(grid.probability(), cfg.smooth_sigma), cfg.occupied_thresh, cfg.free_thresh)
    n = int(round(2.0 / cfg.resolution))
    wall = [(i, j) for i in range(-n, n + 1) for j in range(-n, n + 1) if max(abs(i), abs(j)) == n]
    inner = [(i, j) for i in range(-n + 1, n) for j in range(-n + 1, n)]

    def pixel(cell):
        i, j = np.asarray(cell) - grid.offset
        return img[i, j]

    wall_occ = float(np.mean([pixel(c) == 0 for c in wall]))
    inner_free = float(np.mean([pixel(c) == 254 for c in inner]))

    # odds-product oracle over a fixed mixed sequence
    odds = lambda p: p / (1 - p)
    g = GridMap(MapConfig(chunk=1))
    g.update_cells([(0, 0)], 0.0)
    o, lo, hi = 1.0, odds(cfg.p_min), odds(cfg.p_max)
    oracle_err = 0.0
    for hit in np.random.default_rng(0).random(300) < 0.6:
        g.update_cells([(0, 0)], g.l_hit if hit else g.l_miss)
        o = min(max(o * odds(cfg.p_hit if hit else cfg.p_miss), lo), hi)
        oracle_err = max(oracle_err, abs(g.probability_at([(0, 0)])[0] - o / (1 + o)))
    ok = wall_occ >= 0.99 and inner_free >= 0.99 and oracle_err <= 1e-12
    detail = (f"walls occupied {wall_occ:.2%}, interior free {inner_free:.2%}, "
              f"odds oracle max error {oracle_err:.1e}")
    assert criterion(11, "map quality", ok, detail)


# ------------------------------------------------ 12. metric consistency

def test_12_metric_self_consistency(criterion):
    rng = np.random.default_rng(12)
    worst_sse = 0.0
    for _ in range(200):
        e = rng.uniform(0, 10, int(rng.integers(1, 500)))
        s = ErrorStats.of(e)
        worst_sse = max(worst_sse, abs(s.rmse ** 2 * s.count - s.sse) / max(s.sse, 1e-300))
    n = 300
    yaw = np.cumsum(rng.normal(0, 0.05, n))
    xy = np.cumsum(np.column_stack([np.cos(yaw), np.sin(yaw)]) * 0.05, axis=0)
    gt = Trajectory(np.arange(n) * 0.1, xy, yaw)
    est = Trajectory(gt.stamps, xy + rng.normal(0, 0.03, xy.shape), yaw + rng.normal(0, 0.01, n))
    base = ape_rmse(associate(est, gt), align=True)
    worst_inv = 0.0
    for _ in range(50):
        T = Pose2(rng.uniform(-math.pi, math.pi), rng.uniform(-100, 100, 2))
        r = ape_rmse(associate(est.transformed(T), gt), align=True)
        worst_inv = max(worst_inv, abs(r.trans_rmse - base.trans_rmse), abs(r.rot_rmse - base.rot_rmse))
    # "exactly" up to the last bits of one sqrt and one square
    ok = worst_sse <= 1e-12 and worst_inv <= 1e-9
    detail = f"max relative |rmse^2 n - sse| {worst_sse:.1e}, APE change under rigid motion {worst_inv:.1e}"
    assert criterion(12, "metric self-consistency", ok, detail)
