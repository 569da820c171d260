import math

import numpy as np
import pytest

from liwslam.dataio import Calibration, ImuStream, imu_window
from liwslam.geometry import Pose2, Pose3, exp_so3, log_so3, rotz
from liwslam.preintegration import (ImuBias, NoiseParams, State, compose, correct_for_bias, imu_residual,
                                    imu_residual_raw, integrate, make_imu_block_fn)
from liwslam.simgen import Motion, NoiseConfig, build_trajectory, gravity_vector, simulate, square_room
from liwslam.solver import ROTVEC, VECTOR, ResidualBlock, check_jacobian


def constant_stream(acc, gyr, T=1.0, hz=200):
    n = int(round(T * hz)) + 1
    t = np.arange(n) / hz
    return ImuStream(t, np.tile(acc, (n, 1)), np.tile(gyr, (n, 1)))


def rotating_oracle(a, w, T):
    """Closed form for constant body accel (a, 0, 0) and yaw rate w."""
    beta = a * np.array([math.sin(w * T) / w, (1 - math.cos(w * T)) / w, 0.0])
    alpha = a * np.array([(1 - math.cos(w * T)) / w ** 2, (w * T - math.sin(w * T)) / w ** 2, 0.0])
    return alpha, beta, rotz(w * T)


def test_zero_input():
    pre = integrate(constant_stream([0, 0, 0], [0, 0, 0]))
    assert np.array_equal(pre.alpha, np.zeros(3)) and np.array_equal(pre.beta, np.zeros(3))
    assert np.array_equal(pre.gamma, np.eye(3))
    assert pre.dt_total == pytest.approx(1.0)


def test_constant_acceleration():
    pre = integrate(constant_stream([1, 0, 0], [0, 0, 0]))
    assert np.allclose(pre.alpha, [0.5, 0, 0], atol=1e-4)
    assert np.allclose(pre.beta, [1, 0, 0], atol=1e-6)
    assert np.allclose(pre.gamma, np.eye(3), atol=1e-15)


def test_constant_rate():
    pre = integrate(constant_stream([0, 0, 0], [0, 0, math.pi / 2]))
    assert np.abs(log_so3(pre.gamma.T @ rotz(math.pi / 2))).max() < 1e-5


def test_first_order_convergence():
    a, w, T = 1.0, 1.0, 1.0
    alpha, beta, gamma = rotating_oracle(a, w, T)
    errs = []
    for hz in (50, 100, 200, 400):
        pre = integrate(constant_stream([a, 0, 0], [0, 0, w], T, hz))
        errs.append(np.abs(pre.alpha - alpha).max())
        assert np.abs(log_so3(pre.gamma.T @ gamma)).max() < 1e-12
    assert errs[2] < 1e-4
    for e0, e1 in zip(errs[:-1], errs[1:]):
        assert e1 <= e0 / 2


def test_non_monotone_rejected():
    s = ImuStream([0.0, 0.01, 0.01], np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        integrate(s)


def random_stream(n=41, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n) * 0.005
    return ImuStream(t, rng.normal(size=(n, 3)) + [0, 0, 9.81], rng.normal(size=(n, 3)) * 0.5)


def test_composition_matches_single_window():
    s = random_stream(61)
    b = ImuBias([0.01, 0.02, -0.01], [0.001, -0.002, 0.003])
    full = integrate(s, b)
    split = compose(integrate(s[:25], b), integrate(s[24:], b))
    assert np.abs(full.alpha - split.alpha).max() < 1e-9
    assert np.abs(full.beta - split.beta).max() < 1e-9
    assert np.abs(full.gamma - split.gamma).max() < 1e-9
    assert np.abs(full.J_bias - split.J_bias).max() < 1e-9
    assert np.abs(full.covariance - split.covariance).max() < 1e-9 * max(1.0, np.abs(full.covariance).max())


def test_covariance_grows_with_window():
    s = random_stream(201)
    traces = [np.trace(integrate(s[:k]).covariance) for k in (5, 20, 60, 120, 201)]
    assert all(b > a for a, b in zip(traces[:-1], traces[1:]))
    C = integrate(s).covariance
    assert np.allclose(C, C.T) and np.linalg.eigvalsh(C).min() >= -1e-18


def test_bias_correction_identity_and_accel_shift():
    s = constant_stream([0, 0, 9.81], [0, 0, 0])
    pre = integrate(s)
    same = correct_for_bias(pre, pre.linearization_bias)
    assert np.array_equal(same.alpha, pre.alpha) and np.array_equal(same.gamma, pre.gamma)
    nb = ImuBias([0.01, 0, 0], [0, 0, 0])
    shifted = correct_for_bias(pre, nb)
    assert shifted.alpha[0] - pre.alpha[0] == pytest.approx(-0.005, abs=1e-9)
    reint = integrate(s, nb)
    assert np.abs(shifted.alpha - reint.alpha).max() <= 1e-6


def test_bias_correction_second_order_error():
    s = random_stream(41, seed=3)
    b0 = ImuBias()
    pre = integrate(s, b0)
    rng = np.random.default_rng(4)
    d = rng.normal(size=6) * np.array([0.05, 0.05, 0.05, 0.01, 0.01, 0.01])
    errs = []
    for scale in (1.0, 0.5):
        nb = ImuBias(d[:3] * scale, d[3:] * scale)
        c = correct_for_bias(pre, nb)
        r = integrate(s, nb)
        errs.append(max(np.abs(c.alpha - r.alpha).max(), np.abs(c.beta - r.beta).max(),
                        np.abs(log_so3(c.gamma.T @ r.gamma)).max()))
    assert errs[1] < errs[0] / 3.0


def sim_pair():
    calib = Calibration(T_imu_base=Pose3((0, 0, 0.03), (0, 0, -0.1)))
    traj = build_trajectory(Pose2(0.4, (0.0, 0.0)), [Motion("wait", duration=0.5), Motion("fwd", 1.5),
                                                       Motion("turn", -1.2), Motion("fwd", 1.0)])
    return simulate(square_room(12.0), traj, calib, NoiseConfig.zero())


def test_zero_residual_on_simulated_states():
    sim = sim_pair()
    g = gravity_vector(sim.calib)
    noise = NoiseParams.from_calib(sim.calib.imu_noise)
    worst = 0.0
    for a, b in zip(sim.gt_stamps[:-1], sim.gt_stamps[1:]):
        pre = integrate(imu_window(sim.dataset.imu, a, b), noise=noise)
        r = imu_residual(sim.imu_state(a), sim.imu_state(b), pre, g)
        worst = max(worst, np.abs(r).max())
    assert worst <= 1e-8


def test_residual_vanishes_as_window_shrinks():
    g = np.array([0, 0, -9.81])
    s0 = State(stamp=0.0)
    norms = []
    for dt in (1e-3, 1e-5, 1e-7):
        s = ImuStream([0.0, dt], np.tile([0, 0, 9.81], (2, 1)), np.zeros((2, 3)))
        pre = integrate(s)
        r, _ = imu_residual_raw(s0.p, s0.theta, s0.v, np.zeros(3), np.zeros(3), s0.p, s0.theta, s0.v,
                                np.zeros(3), np.zeros(3), pre=pre, g=g, with_jac=False)
        norms.append(np.linalg.norm(r))
    assert norms[-1] < 1e-12


def test_residual_linear_in_next_position():
    s = random_stream(21)
    pre = integrate(s)
    rng = np.random.default_rng(5)
    vals = [rng.normal(size=3) for _ in range(10)]
    g = np.array([0, 0, -9.81])
    r0, _ = imu_residual_raw(*vals, pre=pre, g=g, with_jac=False)
    eps = np.array([1e-3, 0, 0])
    vals2 = list(vals)
    vals2[5] = vals[5] + eps
    r1, _ = imu_residual_raw(*vals2, pre=pre, g=g, with_jac=False)
    assert np.allclose(r1[:3] - r0[:3], exp_so3(vals[1]).T @ eps, atol=1e-15)
    assert np.array_equal(r1[3:], r0[3:])


def test_dt_mismatch_rejected():
    pre = integrate(random_stream(21))
    with pytest.raises(ValueError):
        imu_residual(State(stamp=0.0), State(stamp=0.5), pre, [0, 0, -9.81])


KINDS = [VECTOR, ROTVEC, VECTOR, VECTOR, VECTOR] * 2


def random_states(rng):
    vals = [rng.normal(size=3) for _ in range(10)]
    for i in (1, 6):
        vals[i] = rng.normal(size=3) * 0.8
    for i in (3, 8):
        vals[i] = rng.normal(size=3) * 0.1
    for i in (4, 9):
        vals[i] = rng.normal(size=3) * 0.01
    return vals


def test_imu_jacobians_finite_difference():
    rng = np.random.default_rng(6)
    pre = integrate(random_stream(21), ImuBias([0.05, -0.02, 0.01], [0.01, 0.0, -0.01]))
    blk = ResidualBlock([str(i) for i in range(10)],
                        lambda *v: imu_residual_raw(*v, pre=pre, g=np.array([0, 0, -9.81])))
    worst = max(check_jacobian(blk, random_states(rng), KINDS) for _ in range(100))
    assert worst <= 1e-5


def test_whitened_block_consistent_with_raw():
    pre = integrate(random_stream(21))
    rng = np.random.default_rng(7)
    vals = random_states(rng)
    g = np.array([0, 0, -9.81])
    r, J = make_imu_block_fn(pre, g)(*vals)
    r0, J0 = imu_residual_raw(*vals, pre=pre, g=g)
    W = pre.sqrt_info()
    assert np.allclose(r, W @ r0)
    C = pre.full_covariance()
    assert np.allclose(W.T @ W @ C, np.eye(15), atol=1e-6)
