"""Corner-descriptor loop detection with randomized anchor trials and ICP
verification."""
from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .features import Corner, DegenerateGeometryError
from .geometry import Pose2, rot2

log = logging.getLogger(__name__)


class InfeasibleError(ValueError):
    pass


class NoOverlapError(RuntimeError):
    pass


@dataclass
class LoopConfig:
    d_res: float = 0.2
    a_res_deg: float = 5.0
    t_min: int = 6
    p: float = 0.95
    overlap_guess: float = 0.5
    exclusion_window: int = 30
    icp_gate: float = 0.1
    fast_filter: float = 0.3
    max_candidates: int = 5
    verify_radius: float = 0.3
    icp_max_iters: int = 30
    icp_radius: float = 0.5
    icp_min_inliers: float = 0.5
    angle_tolerance: int = 1
    hist_bins: int = 128
    seed: int = 0
    polish: bool = True

    @property
    def a_res(self) -> float:
        return math.radians(self.a_res_deg)


def n_angle_bins(a_res: float) -> int:
    return int(round(2 * math.pi / a_res))


# --------------------------------------------------------------- descriptors

@dataclass
class CornerDescriptor:
    anchor_index: int
    entries: np.ndarray        # (k, 3) int: d_int, a_int, partner index

    @property
    def d(self) -> np.ndarray:
        return self.entries[:, 0]

    @property
    def a(self) -> np.ndarray:
        return self.entries[:, 1]

    @property
    def j(self) -> np.ndarray:
        return self.entries[:, 2]


@dataclass
class DescriptorSet:
    keyframe_id: int
    descriptors: list
    corner_positions: np.ndarray
    d_res: float = 0.2
    a_res: float = math.radians(5.0)

    def __len__(self) -> int:
        return len(self.descriptors)


def _positions(corners) -> np.ndarray:
    if isinstance(corners, np.ndarray):
        return np.asarray(corners, dtype=float).reshape(-1, 2)
    return np.array([c.position if isinstance(c, Corner) else c for c in corners], dtype=float).reshape(-1, 2)


def build_descriptors(corners, d_res: float = 0.2, a_res: float = math.radians(5.0),
                      keyframe_id: int = -1) -> DescriptorSet:
    """One descriptor per corner: quantized distance and bearing to every other corner.

    The bearing is that of P_j - P_i against the x axis, in [0, 2 pi).
    """
    P = _positions(corners)
    n = len(P)
    if n < 2:
        return DescriptorSet(keyframe_id, [], P, d_res, a_res)
    na = n_angle_bins(a_res)
    diff = P[None, :, :] - P[:, None, :]               # [i, j] = P_j - P_i
    dist = np.linalg.norm(diff, axis=2)
    ang = np.arctan2(diff[..., 1], diff[..., 0]) % (2 * math.pi)
    d_int = np.rint(dist / d_res).astype(np.int64)
    a_int = np.rint(ang / a_res).astype(np.int64) % na
    descs = []
    idx = np.arange(n)
    for i in range(n):
        js = idx[idx != i]
        e = np.column_stack([d_int[i, js], a_int[i, js], js])
        order = np.lexsort((e[:, 1], e[:, 0]))
        descs.append(CornerDescriptor(i, e[order]))
    return DescriptorSet(keyframe_id, descs, P, d_res, a_res)


def wrap_bins(diff, na: int):
    """Symmetric wrap of a bin difference into (-na/2, na/2]."""
    w = np.mod(np.asarray(diff) + na // 2, na) - na // 2
    return np.where(w == -(na // 2), na // 2, w) if na % 2 == 0 else w


def _vote(da, aa, ja, db, ab, jb, na: int, tol: int):
    """Pairs (ja, jb) with equal d_int whose angle difference agrees with the vote winner."""
    eq = da[:, None] == db[None, :]
    ia, ib = np.nonzero(eq)
    if ia.size == 0:
        return None, np.zeros((0, 2), dtype=np.int64)
    diff = (aa[ia] - ab[ib]) % na
    hist = np.bincount(diff, minlength=na)
    if tol:
        k = np.arange(-tol, tol + 1)
        score = sum(np.roll(hist, -s) for s in k)
    else:
        score = hist
    best = int(np.argmax(score))
    ok = np.abs(wrap_bins(diff - best, na)) <= tol
    ia, ib = ia[ok], ib[ok]
    off = np.abs(wrap_bins(diff[ok] - best, na))
    # one partner each way, preferring the exact bin
    order = np.argsort(off, kind="stable")
    used_a, used_b, pairs = set(), set(), []
    for k in order:
        a_, b_ = int(ja[ia[k]]), int(jb[ib[k]])
        if a_ in used_a or b_ in used_b:
            continue
        used_a.add(a_)
        used_b.add(b_)
        pairs.append((a_, b_))
    return best, np.array(pairs, dtype=np.int64).reshape(-1, 2)


def match_descriptors(a: CornerDescriptor, b: CornerDescriptor, t_min: int = 6, na: int = 72,
                      angle_tolerance: int = 0):
    """Corner pairs (index in a's set, index in b's set) or None.

    The anchors themselves are included as the first pair.  The count
    compared against ``t_min`` is the number of partner pairs.
    """
    best, pairs = _vote(a.d, a.a, a.j, b.d, b.a, b.j, na, angle_tolerance)
    if best is None or len(pairs) < t_min:
        return None
    return MatchResult(np.vstack([[a.anchor_index, b.anchor_index], pairs]), best)


@dataclass
class MatchResult:
    pairs: np.ndarray          # (k, 2) indices into (M, N)
    diff_bin: int

    def __len__(self) -> int:
        return len(self.pairs)


def num_trials(p: float, m: int, c: float) -> int:
    """Smallest gamma with 1 - (1 - c/m)^gamma >= p."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if c <= 0:
        raise InfeasibleError("overlap c must be positive")
    if c > m:
        raise ValueError("overlap c cannot exceed the set size m")
    if c == m:
        return 1
    return int(math.ceil(math.log(1.0 - p) / math.log(1.0 - c / m) - 1e-12))


class _Stacked:
    """All descriptors of one set flattened for vectorized voting."""

    def __init__(self, ds: DescriptorSet):
        self.n = len(ds)
        e = [d.entries for d in ds.descriptors]
        self.owner = np.concatenate([np.full(len(x), d.anchor_index) for x, d in zip(e, ds.descriptors)]) \
            if e else np.zeros(0, int)
        flat = np.vstack(e) if e else np.zeros((0, 3), int)
        self.d, self.a, self.j = flat[:, 0], flat[:, 1], flat[:, 2]


def match_frames(desM: DescriptorSet, desN: DescriptorSet, p: float = 0.95, t_min: int = 6,
                 overlap_guess: float = 0.5, rng: np.random.Generator | None = None, angle_tolerance: int = 0,
                 verify_radius: float | None = 0.3, _stackN: _Stacked | None = None):
    """Randomized anchor matching.  Returns a MatchResult or None."""
    if len(desM) == 0 or len(desN) == 0:
        return None
    rng = rng or np.random.default_rng(0)
    m = len(desM)
    c = min(m, max(1.0, overlap_guess * min(len(desM), len(desN))))
    gamma = min(num_trials(p, m, c), m)
    na = n_angle_bins(desM.a_res)
    SN = _stackN or _Stacked(desN)
    anchors = rng.choice(m, size=gamma, replace=False)
    for i in anchors:
        dm = desM.descriptors[int(i)]
        # vote against every anchor of N at once: histogram over (owner, diff)
        eq = dm.d[:, None] == SN.d[None, :]
        ia, ib = np.nonzero(eq)
        if ia.size == 0:
            continue
        diff = (dm.a[ia] - SN.a[ib]) % na
        owner = SN.owner[ib]
        hist = np.bincount(owner * na + diff, minlength=SN.n * na).reshape(SN.n, na)
        if angle_tolerance:
            score = sum(np.roll(hist, -s, axis=1) for s in range(-angle_tolerance, angle_tolerance + 1))
        else:
            score = hist
        # visit N anchors with the most votes first
        top = np.argsort(-score.max(axis=1), kind="stable")
        for k in top:
            if score[k].max() < t_min:
                break
            res = match_descriptors(dm, desN.descriptors[int(k)], t_min, na, angle_tolerance)
            if res is not None and verify_radius:
                res = _verify(res, desM.corner_positions, desN.corner_positions, verify_radius, t_min)
            if res is not None:
                return res
    return None


def _verify(res: MatchResult, PM: np.ndarray, PN: np.ndarray, radius: float, t_min: int) -> MatchResult | None:
    """Keep the pairs that agree with one rigid transform, then add any others that do.

    Quantized bins let a stray corner share a cell with a true partner, so
    the worst pair is dropped until every residual is within ``radius``.
    """
    pairs = res.pairs
    while True:
        try:
            T, _ = solve_relative_pose(PM[pairs[:, 0]], PN[pairs[:, 1]], refine=False)
        except DegenerateGeometryError:
            return None
        r = np.linalg.norm(PM[pairs[:, 0]] - T.apply(PN[pairs[:, 1]]), axis=1)
        worst = int(np.argmax(r))
        if r[worst] <= radius:
            break
        pairs = np.delete(pairs, worst, axis=0)
        if len(pairs) < t_min + 1:
            return None
    mapped = T.apply(PN)
    d, nn = cKDTree(PM).query(mapped)
    kept = {tuple(p) for p in pairs.tolist()}
    used_m = {p[0] for p in kept}
    used_n = {p[1] for p in kept}
    for jn in np.argsort(d):
        if d[jn] > radius:
            break
        jm = int(nn[jn])
        if jm in used_m or int(jn) in used_n:
            continue
        kept.add((jm, int(jn)))
        used_m.add(jm)
        used_n.add(int(jn))
    return MatchResult(np.array(sorted(kept), dtype=np.int64), res.diff_bin)


# --------------------------------------------------------------- pose solve

def _rigid_fit(A: np.ndarray, B: np.ndarray) -> Pose2:
    """Closed-form R, t minimizing sum |A - (R B + t)|^2."""
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    a, b = A - ca, B - cb
    dot = float((a * b).sum())
    cross = float((b[:, 0] * a[:, 1] - b[:, 1] * a[:, 0]).sum())
    yaw = math.atan2(cross, dot)
    return Pose2(yaw, ca - rot2(yaw) @ cb)


def solve_relative_pose(PM, PN, refine: bool = True) -> tuple[Pose2, float]:
    """Pose T with PM ~= T(PN) and the residual RMS."""
    A = np.asarray(PM, dtype=float).reshape(-1, 2)
    B = np.asarray(PN, dtype=float).reshape(-1, 2)
    if len(A) != len(B) or len(A) < 2:
        raise DegenerateGeometryError("need at least two point pairs")
    sv = np.linalg.svd(B - B.mean(axis=0), compute_uv=False)
    if sv[0] < 1e-9 or sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometryError("point pairs are collinear")
    T = _rigid_fit(A, B)
    if refine and len(A) > 10:
        T = _refine_pose(A, B, T)
    r = A - T.apply(B)
    return T, float(np.sqrt((r * r).sum(axis=1).mean()))


def _refine_pose(A: np.ndarray, B: np.ndarray, T0: Pose2) -> Pose2:
    from .solver import HuberLoss, Problem, ResidualBlock, SolveOptions, solve

    prob = Problem()
    prob.add_slot("x", T0.as_array())

    def fn(x):
        c, s = math.cos(x[2]), math.sin(x[2])
        R = np.array([[c, -s], [s, c]])
        r = (B @ R.T + x[:2] - A).ravel()
        J = np.zeros((len(B), 2, 3))
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        J[:, 0, 2] = -s * B[:, 0] - c * B[:, 1]
        J[:, 1, 2] = c * B[:, 0] - s * B[:, 1]
        return r, [J.reshape(-1, 3)]

    prob.add_block(ResidualBlock(["x"], fn, loss=HuberLoss(0.05), loss_group=2, name="pairs"))
    solve(prob, SolveOptions(max_iters=20))
    x = prob.value("x")
    return Pose2(float(x[2]), x[:2])


# --------------------------------------------------------------------- ICP

@dataclass
class IcpResult:
    pose: Pose2
    rms: float
    inlier_fraction: float
    iters: int
    history: list = field(default_factory=list)


def icp_refine(points_a, points_b, initial: Pose2 | None = None, max_iters: int = 30, radius: float = 0.5,
               tree: cKDTree | None = None) -> IcpResult:
    """Point-to-point ICP aligning b onto a; RMS over gated correspondences.

    The returned RMS history never increases: an iteration that would
    raise it ends the refinement with the previous pose.
    """
    A = np.asarray(points_a, dtype=float).reshape(-1, 2)
    B = np.asarray(points_b, dtype=float).reshape(-1, 2)
    if len(A) < 20 or len(B) < 20:
        raise ValueError("ICP needs at least 20 points per cloud")
    tree = tree or cKDTree(A)
    T = initial or Pose2()

    def correspond(T: Pose2):
        d, nn = tree.query(T.apply(B), distance_upper_bound=radius)
        ok = np.isfinite(d)
        if not ok.any():
            raise NoOverlapError("no correspondences within the gating radius")
        return d[ok], nn[ok], ok

    d, nn, ok = correspond(T)
    rms = float(np.sqrt(np.mean(d * d)))
    history = [rms]
    iters = 0
    for iters in range(1, max_iters + 1):
        T_new = _rigid_fit(A[nn], B[ok])
        try:
            d2, nn2, ok2 = correspond(T_new)
        except NoOverlapError:
            break
        rms2 = float(np.sqrt(np.mean(d2 * d2)))
        if rms2 > rms:
            break
        T, d, nn, ok = T_new, d2, nn2, ok2
        improved = rms - rms2
        rms = rms2
        history.append(rms)
        if improved < 1e-6:
            break
    return IcpResult(T, rms, float(ok.mean()), iters, history)


def _segment_arrays(segments) -> np.ndarray:
    if isinstance(segments, np.ndarray):
        return segments.reshape(-1, 2, 2).astype(float)
    return np.array([[l.p_start, l.p_end] for l in segments], dtype=float).reshape(-1, 2, 2)


def polish_point_to_line(segments, points, T0: Pose2, radius: float = 0.1, huber: float = 0.03,
                         max_iters: int = 20) -> tuple[Pose2, float]:
    """Gauss-Newton alignment of raw points onto fitted line segments, started from T0.

    Returns the refined pose and the RMS point-to-line distance of the
    points that found a segment within ``radius``.
    """
    S = _segment_arrays(segments)
    B = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(S) < 2 or len(B) < 10:
        return T0, math.inf
    P0 = S[:, 0]
    D = S[:, 1] - S[:, 0]
    L2 = np.maximum((D * D).sum(axis=1), 1e-300)
    N = np.stack([-D[:, 1], D[:, 0]], axis=1) / np.sqrt(L2)[:, None]
    x = T0.as_array()
    rms = math.inf
    step = math.inf
    for _ in range(max_iters):
        c, s = math.cos(x[2]), math.sin(x[2])
        TB = B @ np.array([[c, -s], [s, c]]).T + x[:2]
        if step > 1e-6:
            # associations are frozen once the steps are tiny; only the fit is refined
            rel = TB[:, None, :] - P0[None]
            u = np.clip(np.einsum("pkd,kd->pk", rel, D) / L2[None], 0.0, 1.0)
            e = rel - u[..., None] * D[None]
            dist2 = np.einsum("pkd,pkd->pk", e, e)
            j = dist2.argmin(axis=1)
            ok = dist2[np.arange(len(B)), j] < radius * radius
            if ok.sum() < 10:
                break
            jo = j[ok]
        n = N[jo]
        r = ((TB[ok] - P0[jo]) * n).sum(axis=1)
        rms = float(np.sqrt(np.mean(r * r)))
        dTB = B[ok] @ np.array([[-s, -c], [c, -s]]).T
        J = np.column_stack([n, (dTB * n).sum(axis=1)])
        a = np.abs(r)
        w = np.where(a <= huber, 1.0, huber / np.maximum(a, 1e-300))
        try:
            dx = -np.linalg.solve(J.T @ (J * w[:, None]), J.T @ (w * r))
        except np.linalg.LinAlgError:
            break
        x = x + dx
        step = float(np.abs(dx).max())
        if step < 1e-9:
            break
    return Pose2(float(x[2]), x[:2]), rms


# -------------------------------------------------------------- detection

@dataclass
class LoopConstraint:
    from_id: int
    to_id: int
    relative_pose: Pose2       # pose of the "from" keyframe in the "to" keyframe's frame
    match_count: int
    post_icp_rms: float
    inlier_fraction: float = 1.0


@dataclass
class DatabaseEntry:
    keyframe_id: int
    pose: Pose2
    descriptors: DescriptorSet
    points: np.ndarray
    hist: np.ndarray
    stamp: float = 0.0
    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    _tree: cKDTree | None = None
    _stack: _Stacked | None = None

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    @property
    def stack(self) -> _Stacked:
        if self._stack is None:
            self._stack = _Stacked(self.descriptors)
        return self._stack


def distance_histogram(ds: DescriptorSet, bins: int) -> np.ndarray:
    """Normalized histogram of the d_int values of all corner pairs."""
    h = np.zeros(bins)
    P = ds.corner_positions
    if len(P) >= 2:
        i, j = np.triu_indices(len(P), 1)
        d = np.rint(np.linalg.norm(P[i] - P[j], axis=1) / ds.d_res).astype(int)
        h = np.bincount(np.minimum(d, bins - 1), minlength=bins).astype(float)
        h /= h.sum()
    return h


class DescriptorDatabase:
    """Append-only keyframe store with a vectorized histogram pre-filter."""

    def __init__(self, cfg: LoopConfig | None = None):
        self.cfg = cfg or LoopConfig()
        self.entries: list[DatabaseEntry] = []
        self._ids: list[int] = []
        self._hists = np.zeros((0, self.cfg.hist_bins))
        self.rng = np.random.default_rng(self.cfg.seed)
        self.last_timing: dict = {}

    def __len__(self) -> int:
        return len(self.entries)

    def make_entry(self, keyframe_id: int, pose: Pose2, corners, points, stamp: float = 0.0,
                   segments=()) -> DatabaseEntry:
        ds = build_descriptors(corners, self.cfg.d_res, self.cfg.a_res, keyframe_id)
        return DatabaseEntry(keyframe_id, pose, ds, np.asarray(points, dtype=float).reshape(-1, 2),
                             distance_histogram(ds, self.cfg.hist_bins), stamp, _segment_arrays(segments))

    def add(self, entry: DatabaseEntry) -> None:
        if self._ids and entry.keyframe_id <= self._ids[-1]:
            raise ValueError("keyframe ids must be strictly increasing")
        self.entries.append(entry)
        self._ids.append(entry.keyframe_id)
        self._hists = np.vstack([self._hists, entry.hist[None]])

    def get(self, keyframe_id: int) -> DatabaseEntry:
        i = bisect.bisect_left(self._ids, keyframe_id)
        if i == len(self._ids) or self._ids[i] != keyframe_id:
            raise KeyError(keyframe_id)
        return self.entries[i]

    @property
    def next_id(self) -> int:
        return self._ids[-1] + 1 if self._ids else 0

    def add_keyframe(self, kf) -> DatabaseEntry:
        e = self.make_entry(kf.id, kf.pose2, kf.corners, kf.scan_points[:, :2], kf.stamp, kf.lines)
        self.add(e)
        return e

    def fast_filter(self, query: DatabaseEntry, limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Indices of entries passing the histogram gate, best first."""
        n = len(self.entries) if limit is None else max(0, min(limit, len(self.entries)))
        if n == 0 or query.hist.sum() == 0:
            return np.zeros(0, int), np.zeros(0)
        score = np.minimum(self._hists[:n], query.hist[None]).sum(axis=1)
        idx = np.flatnonzero(score >= self.cfg.fast_filter)
        order = idx[np.argsort(-score[idx], kind="stable")]
        return order, score[order]

    def detect(self, query: DatabaseEntry, exclude_recent: bool = True) -> LoopConstraint | None:
        """Best loop constraint for ``query`` against older entries."""
        cfg = self.cfg
        limit = len(self.entries)
        if exclude_recent:
            # eligible: ids older than the exclusion window (entries are id-ordered)
            limit = bisect.bisect_left(self._ids, query.keyframe_id - cfg.exclusion_window)
        cand, _ = self.fast_filter(query, limit)
        self.last_timing = {"candidates": int(len(cand))}
        if len(query.descriptors) < 2:
            return None
        qstack = _Stacked(query.descriptors)
        for k in cand[:cfg.max_candidates]:
            e = self.entries[int(k)]
            if len(e.descriptors) < 2:
                continue
            res = match_frames(e.descriptors, query.descriptors, cfg.p, cfg.t_min, cfg.overlap_guess, self.rng,
                               cfg.angle_tolerance, cfg.verify_radius, _stackN=qstack)
            if res is None:
                continue
            PM = e.descriptors.corner_positions[res.pairs[:, 0]]
            PN = query.descriptors.corner_positions[res.pairs[:, 1]]
            try:
                T0, _ = solve_relative_pose(PM, PN)
                icp = icp_refine(e.points, query.points, T0, cfg.icp_max_iters, cfg.icp_radius, tree=e.tree)
            except (DegenerateGeometryError, NoOverlapError, ValueError):
                continue
            if icp.rms <= cfg.icp_gate and icp.inlier_fraction >= cfg.icp_min_inliers:
                pose = icp.pose
                if cfg.polish:
                    pose, _ = polish_point_to_line(e.segments, query.points, icp.pose)
                    if np.linalg.norm(pose.xy - icp.pose.xy) > cfg.icp_gate:
                        continue
                return LoopConstraint(query.keyframe_id, e.keyframe_id, pose, len(res), icp.rms,
                                      icp.inlier_fraction)
        return None

    # ----------------------------------------------------------- storage

    def save(self, path) -> None:
        """Four text lines per keyframe: header, corners, line segments, scan points."""
        with open(path, "w") as fh:
            fh.write(f"# d_res={self.cfg.d_res} a_res_deg={self.cfg.a_res_deg}\n")
            for e in self.entries:
                x, y, yaw = (float(v) for v in e.pose.as_array())
                fh.write(f"keyframe {e.keyframe_id} {float(e.stamp)!r} {x!r} {y!r} {yaw!r}\n")
                for tag, arr, width in (("corners", e.descriptors.corner_positions, 2), ("lines", e.segments, 4),
                                        ("points", e.points, 2)):
                    v = np.asarray(arr, dtype=float).ravel().tolist()
                    fh.write(f"{tag} {len(v) // width}" + "".join(f" {x!r}" for x in v) + "\n")

    @classmethod
    def load(cls, path, cfg: LoopConfig | None = None) -> "DescriptorDatabase":
        db = cls(cfg)
        rows = [l for l in Path(path).read_text().splitlines() if l.strip() and not l.startswith("#")]
        if len(rows) % 4:
            raise ValueError(f"{path}: truncated keyframe database")
        for k in range(0, len(rows), 4):
            head, corners, segs, points = (l.split() for l in rows[k:k + 4])
            if (head[0], corners[0], segs[0], points[0]) != ("keyframe", "corners", "lines", "points"):
                raise ValueError(f"{path}: malformed record {k // 4}")
            kid, stamp, x, y, yaw = int(head[1]), *map(float, head[2:6])
            C = np.array(corners[2:], dtype=float).reshape(-1, 2)
            S = np.array(segs[2:], dtype=float).reshape(-1, 2, 2)
            P = np.array(points[2:], dtype=float).reshape(-1, 2)
            if len(C) != int(corners[1]) or len(S) != int(segs[1]) or len(P) != int(points[1]):
                raise ValueError(f"{path}: count mismatch in record {k // 4}")
            db.add(db.make_entry(kid, Pose2(yaw, (x, y)), C, P, stamp, S))
        return db


def write_loops_csv(path, loops) -> None:
    with open(path, "w") as fh:
        fh.write("from_id,to_id,dx,dy,dyaw,match_count,icp_rms\n")
        for c in loops:
            x, y, yaw = c.relative_pose.as_array()
            fh.write(f"{c.from_id},{c.to_id},{x:.6f},{y:.6f},{yaw:.6f},{c.match_count},{c.post_icp_rms:.6f}\n")
