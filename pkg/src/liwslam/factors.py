"""Observation models: line-to-line, wheel odometry, ground plane and priors.

Every ``*_raw`` function returns the unwhitened residual and a list of
Jacobians, one per state block, with rotations perturbed on the right.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import Calibration
from .features import DegenerateGeometryError, LineSegment
from .geometry import Pose3, between, exp_so3, log_so3, right_jacobian_inv, skew, wrap_angle
from .preintegration import ImuBias, State

__all__ = ["State", "LineMatch", "MatchConfig", "match_lines", "line_residual", "line_residual_raw",
           "make_line_block_fn", "WheelDelta", "wheel_delta", "wheel_residual", "wheel_residual_raw",
           "wheel_sqrt_info", "ground_residual", "ground_residual_raw", "ground_tilt_vector_raw",
           "prior_residual", "prior_residual_raw", "state_boxminus", "lidar_pose", "chassis_pose"]

EZ = np.array([0.0, 0.0, 1.0])
DEGENERATE_D = 1e-6


def chassis_pose(state: State, calib: Calibration) -> Pose3:
    R = state.R
    return Pose3.from_rt(R @ calib.T_imu_base.R, state.p + R @ calib.T_imu_base.translation)


def lidar_pose(state: State, calib: Calibration) -> Pose3:
    T_bl = calib.T_imu_base @ calib.T_base_lidar
    R = state.R
    return Pose3.from_rt(R @ T_bl.R, state.p + R @ T_bl.translation)


# ------------------------------------------------------------------ lines

@dataclass(frozen=True)
class LineMatch:
    ref_line: LineSegment
    cur_line: LineSegment
    angle: float = 0.0


@dataclass
class MatchConfig:
    theta_match_deg: float = 10.0
    d_match: float = 0.5
    min_overlap: float = 0.2

    @property
    def theta_match(self) -> float:
        return math.radians(self.theta_match_deg)


def _segment_arrays(lines):
    a = np.array([l.p_start for l in lines], dtype=float).reshape(-1, 2)
    b = np.array([l.p_end for l in lines], dtype=float).reshape(-1, 2)
    return a, b


def match_lines(cur_lines, ref_lines, T_guess: Pose3 | None = None,
                cfg: MatchConfig | None = None) -> list[LineMatch]:
    """Match current-scan lines to reference lines.

    ``T_guess`` maps the current LiDAR frame into the reference LiDAR frame.
    For each current line the candidate with the smallest angle wins,
    ties broken by midpoint distance.
    """
    cfg = cfg or MatchConfig()
    cur_lines, ref_lines = list(cur_lines), list(ref_lines)
    if not cur_lines or not ref_lines:
        return []
    T = T_guess if T_guess is not None else Pose3.identity()
    if not (np.all(np.isfinite(T.rotation)) and np.all(np.isfinite(T.translation))):
        raise ValueError("non-finite pose guess")
    ca, cb = _segment_arrays(cur_lines)
    R2 = T.R[:2, :2]
    t2 = T.translation[:2]
    ca, cb = ca @ R2.T + t2, cb @ R2.T + t2
    ra, rb = _segment_arrays(ref_lines)

    cdir = cb - ca
    rdir = rb - ra
    clen = np.linalg.norm(cdir, axis=1)
    rlen = np.linalg.norm(rdir, axis=1)
    ru = rdir / rlen[:, None]
    cu = cdir / clen[:, None]
    # undirected angle between every pair
    cosang = np.abs(cu @ ru.T).clip(0.0, 1.0)
    ang = np.arccos(cosang)

    mid = 0.5 * (ca + cb)
    rel = mid[:, None, :] - ra[None, :, :]
    s = np.clip((rel * ru[None]).sum(axis=2) / rlen[None], 0.0, 1.0)
    closest = ra[None] + s[..., None] * rdir[None]
    mdist = np.linalg.norm(mid[:, None, :] - closest, axis=2)

    # overlap of the projected current interval with the reference interval
    pa = ((ca[:, None, :] - ra[None]) * ru[None]).sum(axis=2)
    pb = ((cb[:, None, :] - ra[None]) * ru[None]).sum(axis=2)
    lo = np.minimum(pa, pb).clip(min=0.0)
    hi = np.minimum(np.maximum(pa, pb), rlen[None])
    inter = (hi - lo).clip(min=0.0)
    overlap = inter / np.minimum(clen[:, None], rlen[None])

    ok = (ang <= cfg.theta_match) & (mdist <= cfg.d_match) & (overlap >= cfg.min_overlap)
    out = []
    for i in range(len(cur_lines)):
        cand = np.flatnonzero(ok[i])
        if cand.size == 0:
            continue
        j = cand[np.lexsort((mdist[i, cand], ang[i, cand]))[0]]
        out.append(LineMatch(ref_lines[j], cur_lines[i], float(ang[i, j])))
    return out


def _body_to_lidar(calib: Calibration) -> Pose3:
    return calib.T_imu_base @ calib.T_base_lidar


def line_residual_raw(p_r, th_r, p_c, th_c, ref_nc: np.ndarray, cur_pts: np.ndarray, T_bl: Pose3,
                      with_jac: bool = True):
    """Perpendicular distances of current endpoints to reference lines.

    ``ref_nc`` is (M, 3) with rows (n_x, n_y, c); ``cur_pts`` is (M, 2, 2),
    the start and end point of each current line in its LiDAR frame.
    Returns 2M residuals ordered (d1, d2) per match.
    """
    ref_nc = np.asarray(ref_nc, dtype=float).reshape(-1, 3)
    P = np.asarray(cur_pts, dtype=float).reshape(-1, 2)
    M = ref_nc.shape[0]
    Rr, Rc = exp_so3(th_r), exp_so3(th_c)
    Rbl, tbl = T_bl.R, T_bl.translation
    P3 = np.column_stack([P, np.zeros(len(P))])
    q = P3 @ Rbl.T + tbl                       # points in the current body frame
    w = q @ Rc.T + (np.asarray(p_c) - np.asarray(p_r))
    Y = w @ Rr                                  # points in the reference body frame
    X = (Y - tbl) @ Rbl                         # reference LiDAR frame
    n = np.repeat(ref_nc[:, :2], 2, axis=0)
    c = np.repeat(ref_nc[:, 2], 2)
    r = (X[:, :2] * n).sum(axis=1) + c
    if not with_jac:
        return r, None
    n3 = np.column_stack([n, np.zeros(2 * M)])
    g = n3 @ Rbl.T                              # d r / d Y, one row per residual
    gr = g @ Rr.T                               # d r / d w
    J_pc = gr
    J_pr = -gr
    # right perturbations: dY/dth_c = -Rr^T Rc [q]x and dY/dth_r = [Y]x
    J_thc = _cross_rows(q, gr @ Rc)
    J_thr = _cross_rows(g, Y)
    return r, [J_pr, J_thr, J_pc, J_thc]


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # row-wise cross product; np.cross has a large fixed overhead
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _match_arrays(matches):
    ref_nc = np.array([[*m.ref_line.normal, m.ref_line.c] for m in matches], dtype=float).reshape(-1, 3)
    pts = np.array([[m.cur_line.p_start, m.cur_line.p_end] for m in matches], dtype=float).reshape(-1, 2, 2)
    for m in matches:
        if np.linalg.norm(np.asarray(m.ref_line.p_end) - np.asarray(m.ref_line.p_start)) < 1e-12:
            raise DegenerateGeometryError("reference line endpoints coincide")
    return ref_nc, pts


def line_residual(match: LineMatch, state_r: State, state_c: State, calib: Calibration,
                  sigma: float | None = None) -> np.ndarray:
    """(d1, d2) for one match, divided by the line noise sigma."""
    sigma = calib.line_sigma if sigma is None else sigma
    ref_nc, pts = _match_arrays([match])
    r, _ = line_residual_raw(state_r.p, state_r.theta, state_c.p, state_c.theta, ref_nc, pts,
                             _body_to_lidar(calib), with_jac=False)
    return r / sigma


def make_line_block_fn(matches, anchor: State, calib: Calibration, sigma: float | None = None):
    """Solver callback over (p_c, th_c) with the reference state held constant."""
    sigma = calib.line_sigma if sigma is None else sigma
    ref_nc, pts = _match_arrays(matches)
    T_bl = _body_to_lidar(calib)
    p_r, th_r = anchor.p.copy(), anchor.theta.copy()

    def fn(p_c, th_c):
        r, J = line_residual_raw(p_r, th_r, p_c, th_c, ref_nc, pts, T_bl)
        return r / sigma, [J[2] / sigma, J[3] / sigma]

    return fn


# ------------------------------------------------------------------ wheel

@dataclass(frozen=True)
class WheelDelta:
    d: float
    theta_d: float
    theta: float
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.theta_d, self.theta])


def wheel_delta(pose_i: Pose3, pose_j: Pose3) -> WheelDelta:
    rel = between(pose_i, pose_j)
    t = rel.translation
    d = float(math.hypot(t[0], t[1]))
    theta = float(np.linalg.norm(log_so3(rel.R)))
    if d < DEGENERATE_D:
        return WheelDelta(d, 0.0, theta, True)
    return WheelDelta(d, math.atan2(t[1], t[0]), theta, False)


def wheel_sqrt_info(meas: WheelDelta, calib: Calibration) -> np.ndarray:
    """Diagonal whitening with distance- and angle-proportional sigmas."""
    ws = calib.wheel_sigma
    s_d = ws.d * max(meas.d, 0.05)
    s_th = ws.theta * max(meas.theta, 0.02)
    return np.diag([1.0 / s_d, 1.0 / ws.theta_d, 1.0 / s_th])


def wheel_residual_raw(p_i, th_i, p_j, th_j, meas: WheelDelta, T_bo: Pose3, with_jac: bool = True):
    """Measured minus predicted (d, theta_d, theta) between two IMU states.

    ``T_bo`` is the chassis pose in the IMU frame.  The theta_d row is
    zeroed when either side has a degenerate direction.
    """
    Ri, Rj = exp_so3(th_i), exp_so3(th_j)
    Rbo, tbo = T_bo.R, T_bo.translation
    a = Rj @ tbo + np.asarray(p_j) - np.asarray(p_i)
    u = Ri.T @ a - tbo
    t = Rbo.T @ u
    d = math.hypot(t[0], t[1])
    Rrel = Rbo.T @ Ri.T @ Rj @ Rbo
    phi = log_so3(Rrel, check=False)
    th = float(np.linalg.norm(phi))
    degenerate = d < DEGENERATE_D or meas.degenerate
    theta_d = 0.0 if d < DEGENERATE_D else math.atan2(t[1], t[0])
    r = np.array([meas.d - d,
                  0.0 if degenerate else wrap_angle(meas.theta_d - theta_d),
                  wrap_angle(meas.theta - th)])
    if not with_jac:
        return r, None
    # d t / d(state blocks), right perturbations on the rotations
    dt_dpj = Rbo.T @ Ri.T
    dt_dpi = -dt_dpj
    dt_dthj = -Rbo.T @ Ri.T @ Rj @ skew(tbo)
    dt_dthi = Rbo.T @ skew(Ri.T @ a)
    J = [np.zeros((3, 3)) for _ in range(4)]
    if d >= DEGENERATE_D:
        gd = np.array([t[0], t[1], 0.0]) / d
        gtd = np.array([-t[1], t[0], 0.0]) / (d * d)
        for k, dt in enumerate((dt_dpi, dt_dthi, dt_dpj, dt_dthj)):
            J[k][0] = -gd @ dt
            if not degenerate:
                J[k][1] = -gtd @ dt
    if th > 1e-9:
        Jri = right_jacobian_inv(phi)
        gphi = phi / th
        J[3][2] = -gphi @ (Jri @ Rbo.T)
        J[1][2] = gphi @ (Jri @ Rrel.T @ Rbo.T)
    return r, J


def wheel_residual(state_k: State, state_k1: State, measured: WheelDelta, calib: Calibration) -> np.ndarray:
    r, _ = wheel_residual_raw(state_k.p, state_k.theta, state_k1.p, state_k1.theta, measured,
                              calib.T_imu_base, with_jac=False)
    W = wheel_sqrt_info(measured, calib)
    if measured.degenerate:
        W[1, 1] = 0.0
    return W @ r


def make_wheel_block_fn(measured: WheelDelta, calib: Calibration):
    W = wheel_sqrt_info(measured, calib)
    T_bo = calib.T_imu_base

    # W is diagonal, so whitening is a row scaling
    w = np.diag(W)

    def fn(p_i, th_i, p_j, th_j):
        r, J = wheel_residual_raw(p_i, th_i, p_j, th_j, measured, T_bo)
        return w * r, [w[:, None] * j for j in J]

    return fn


# ----------------------------------------------------------------- ground

def _ground_terms(p, th, T_bo: Pose3):
    R = exp_so3(th)
    Rbo, tbo = T_bo.R, T_bo.translation
    z = float(p[2] + (R @ tbo)[2])
    k = Rbo @ EZ
    axis = R @ k
    c = np.array([axis[1], -axis[0], 0.0])     # axis x e_z
    return R, tbo, k, axis, z, c


def ground_residual_raw(p, th, T_bo: Pose3, with_jac: bool = True):
    """(chassis z, tilt) with tilt = arcsin(|axis_z x e_z|)."""
    R, tbo, k, axis, z, c = _ground_terms(p, th, T_bo)
    s = float(np.linalg.norm(c))
    tilt = math.asin(min(s, 1.0))
    r = np.array([z, tilt])
    if not with_jac:
        return r, None
    Jp = np.zeros((2, 3))
    Jth = np.zeros((2, 3))
    Jp[0] = EZ
    Jth[0] = -EZ @ R @ skew(tbo)
    if 1e-12 < s < 1.0:
        # c = -[e_z]x axis and d axis = -R [k]x dth
        dc_dth = skew(EZ) @ R @ skew(k)
        Jth[1] = (c / s) @ dc_dth / math.sqrt(1.0 - s * s)
    return r, [Jp, Jth]


def ground_tilt_vector_raw(p, th, T_bo: Pose3, with_jac: bool = True):
    """(z, tilt * c/|c|): same squared norm as the scalar form, smooth at level."""
    R, tbo, k, axis, z, c = _ground_terms(p, th, T_bo)
    s = float(np.linalg.norm(c))
    tilt = math.asin(min(s, 1.0))
    # scale(s) = asin(s)/s, smooth and -> 1 at s = 0
    if s < 1e-6:
        scale, dscale = 1.0 + s * s / 6.0, s / 3.0
    else:
        scale = tilt / s
        dscale = (1.0 / math.sqrt(max(1.0 - s * s, 1e-300)) - scale) / s
    r = np.concatenate([[z], scale * c[:2]])
    if not with_jac:
        return r, None
    dc_dth = skew(EZ) @ R @ skew(k)
    Jp = np.zeros((3, 3))
    Jth = np.zeros((3, 3))
    Jp[0] = EZ
    Jth[0] = -EZ @ R @ skew(tbo)
    ds = (c / s) @ dc_dth if s > 1e-12 else np.zeros(3)
    Jth[1:] = scale * dc_dth[:2] + np.outer(c[:2], dscale * ds)
    return r, [Jp, Jth]


def ground_sqrt_info(calib: Calibration) -> np.ndarray:
    gs = calib.ground_sigma
    return np.diag([1.0 / gs.z_m, 1.0 / gs.tilt_rad])


def ground_residual(state: State, calib: Calibration) -> np.ndarray:
    r, _ = ground_residual_raw(state.p, state.theta, calib.T_imu_base, with_jac=False)
    return ground_sqrt_info(calib) @ r


def make_ground_block_fn(calib: Calibration):
    gs = calib.ground_sigma
    W = np.diag([1.0 / gs.z_m, 1.0 / gs.tilt_rad, 1.0 / gs.tilt_rad])
    T_bo = calib.T_imu_base

    def fn(p, th):
        r, J = ground_tilt_vector_raw(p, th, T_bo)
        return W @ r, [W @ j for j in J]

    return fn


# ------------------------------------------------------------------ prior

def state_boxminus(state: State, mean: State) -> np.ndarray:
    """Tangent-space difference state - mean (15-vector)."""
    return np.concatenate([state.p - mean.p, log_so3(mean.R.T @ state.R, check=False), state.v - mean.v,
                           state.bias.accel - mean.bias.accel, state.bias.gyro - mean.bias.gyro])


def state_boxplus(state: State, delta) -> State:
    delta = np.asarray(delta, dtype=float)
    return State(state.p + delta[0:3], log_so3(state.R @ exp_so3(delta[3:6])), state.v + delta[6:9],
                 ImuBias(state.bias.accel + delta[9:12], state.bias.gyro + delta[12:15]), state.stamp)


def prior_residual_raw(p, th, v, ba, bg, mean: State, with_jac: bool = True):
    phi = log_so3(mean.R.T @ exp_so3(th), check=False)
    r = np.concatenate([np.asarray(p) - mean.p, phi, np.asarray(v) - mean.v,
                        np.asarray(ba) - mean.bias.accel, np.asarray(bg) - mean.bias.gyro])
    if not with_jac:
        return r, None
    J = [np.zeros((15, 3)) for _ in range(5)]
    J[0][0:3] = np.eye(3)
    J[1][3:6] = right_jacobian_inv(phi)
    J[2][6:9] = np.eye(3)
    J[3][9:12] = np.eye(3)
    J[4][12:15] = np.eye(3)
    return r, J


def prior_residual(state: State, prior_mean: State, prior_sqrt_info) -> np.ndarray:
    r, _ = prior_residual_raw(state.p, state.theta, state.v, state.bias.accel, state.bias.gyro, prior_mean,
                              with_jac=False)
    return np.asarray(prior_sqrt_info, dtype=float) @ r


def make_prior_block_fn(mean: State, sqrt_info, blocks=(0, 1, 2, 3, 4)):
    """Prior over a subset of the five state blocks (p, th, v, ba, bg)."""
    W = np.asarray(sqrt_info, dtype=float)
    rows = np.concatenate([np.arange(3 * b, 3 * b + 3) for b in blocks])
    W = W[np.ix_(rows, rows)]
    defaults = [mean.p, mean.theta, mean.v, mean.bias.accel, mean.bias.gyro]

    def fn(*vals):
        full = list(defaults)
        for b, v in zip(blocks, vals):
            full[b] = v
        r, J = prior_residual_raw(*full, mean=mean)
        return W @ r[rows], [W @ J[b][rows] for b in blocks]

    return fn
