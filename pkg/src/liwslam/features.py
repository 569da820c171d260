"""Line segment and corner extraction from a single 2D scan."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateGeometryError(ValueError):
    pass


@dataclass
class FeatureConfig:
    d_break: float = 0.25
    skip: int = 5
    theta_line_deg: float = 170.0
    theta_corner_deg: float = 30.0
    n_min: int = 8
    len_min: float = 0.15
    d_adjacent: float = 0.3
    nms_window: int = 5
    split_dist: float = 0.05
    trim_dist: float = 0.03

    @property
    def theta_line(self) -> float:
        return math.radians(self.theta_line_deg)

    @property
    def theta_corner(self) -> float:
        return math.radians(self.theta_corner_deg)


@dataclass
class PointSet:
    points: np.ndarray
    beam_indices: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class LineSegment:
    coeffs: np.ndarray
    p_start: np.ndarray
    p_end: np.ndarray
    support: int = 0
    frame_stamp: float = 0.0
    first_beam: int = 0
    last_beam: int = 0

    @property
    def normal(self) -> np.ndarray:
        return self.coeffs[:2]

    @property
    def c(self) -> float:
        return float(self.coeffs[2])

    @property
    def direction(self) -> np.ndarray:
        d = self.p_end - self.p_start
        return d / np.linalg.norm(d)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p_end - self.p_start))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.p_start + self.p_end)

    @property
    def angle(self) -> float:
        """Undirected line orientation in [0, pi)."""
        d = self.p_end - self.p_start
        return math.atan2(d[1], d[0]) % math.pi

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "LineSegment":
        return segment_from_endpoints(R @ self.p_start + t, R @ self.p_end + t, self.support,
                                      self.frame_stamp, self.first_beam, self.last_beam)

    def to_dict(self) -> dict:
        return {"coeffs": [float(x) for x in self.coeffs], "p_start": [float(x) for x in self.p_start],
                "p_end": [float(x) for x in self.p_end], "support": int(self.support),
                "first_beam": int(self.first_beam), "last_beam": int(self.last_beam)}


@dataclass
class Corner:
    position: np.ndarray
    incident_angle: float


def segment_from_endpoints(p0, p1, support=0, stamp=0.0, first_beam=0, last_beam=0) -> LineSegment:
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d = p1 - p0
    L = np.linalg.norm(d)
    if L == 0.0:
        raise DegenerateGeometryError("segment endpoints coincide")
    n = np.array([-d[1], d[0]]) / L
    c = -float(n @ p0)
    return LineSegment(np.array([n[0], n[1], c]), p0, p1, support, stamp, first_beam, last_beam)


def split_continuous(points, beam_indices=None, d_break: float = 0.25, n_min: int = 8,
                     closed: bool = False) -> list[PointSet]:
    """Cut an ordered point list wherever neighbours are more than d_break apart.

    With ``closed`` (a full 360 degree scan) the last and first runs are
    joined when they are continuous across the seam.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    idx = np.arange(len(pts)) if beam_indices is None else np.asarray(beam_indices)
    if len(pts) == 0:
        return []
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cuts = np.flatnonzero(gaps > d_break) + 1
    bounds = np.concatenate([[0], cuts, [len(pts)]])
    runs = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    sets = [PointSet(pts[a:b], idx[a:b]) for a, b in runs]
    if closed and len(sets) > 1 and np.linalg.norm(pts[-1] - pts[0]) <= d_break:
        first, last = sets[0], sets.pop()
        sets[0] = PointSet(np.vstack([last.points, first.points]),
                           np.concatenate([last.beam_indices, first.beam_indices]))
    return [s for s in sets if len(s) >= n_min]


def _angles_at(pts: np.ndarray, i: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    u = pts[a] - pts[i]
    v = pts[b] - pts[i]
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise DegenerateGeometryError("zero-length ray in vertex angle")
    cross = u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    dot = (u * v).sum(axis=-1)
    return np.arctan2(np.abs(cross), dot)


def vertex_angle(ps, i: int, skip: int) -> float:
    """Interior angle at point i between rays to i-skip and i+skip."""
    pts = ps.points if isinstance(ps, PointSet) else np.asarray(ps, dtype=float)
    if not skip <= i <= len(pts) - 1 - skip:
        raise IndexError("vertex index too close to the set boundary")
    return float(_angles_at(pts, np.array(i), np.array(i - skip), np.array(i + skip)))


def vertex_angles(pts: np.ndarray, skip: int) -> np.ndarray:
    """Angles for every index, NaN where the skip neighbourhood leaves the set."""
    n = len(pts)
    out = np.full(n, np.nan)
    if n > 2 * skip:
        i = np.arange(skip, n - skip)
        out[skip:n - skip] = _angles_at(pts, i, i - skip, i + skip)
    return out


def nms_angles(angles, window: int) -> np.ndarray:
    """Indices whose deviation |pi - angle| is strictly largest within +-window."""
    dev = np.abs(math.pi - np.asarray(angles, dtype=float))
    dev = np.where(np.isnan(dev), -np.inf, dev)
    n = len(dev)
    if n == 0:
        return np.zeros(0, dtype=int)
    pad = np.full(n + 2 * window, -np.inf)
    pad[window:window + n] = dev
    from numpy.lib.stride_tricks import sliding_window_view
    win = sliding_window_view(pad, 2 * window + 1)
    others = np.delete(win, window, axis=1) if window > 0 else np.full((n, 1), -np.inf)
    keep = (dev > others.max(axis=1)) & np.isfinite(dev)
    return np.flatnonzero(keep)


def fit_line(points, beam_indices=None, stamp: float = 0.0) -> LineSegment:
    """Total-least-squares line; endpoints are projections of first/last points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise DegenerateGeometryError("need at least two points")
    centroid = pts.mean(axis=0)
    X = pts - centroid
    if np.abs(X).max() == 0.0:
        raise DegenerateGeometryError("all points coincide")
    _, _, Vt = np.linalg.svd(X, full_matrices=False)
    d = Vt[0]
    if d @ (pts[-1] - pts[0]) < 0:
        d = -d
    n = np.array([-d[1], d[0]])
    c = -float(n @ centroid)
    p0 = pts[0] - (n @ pts[0] + c) * n
    p1 = pts[-1] - (n @ pts[-1] + c) * n
    bi = np.arange(len(pts)) if beam_indices is None else np.asarray(beam_indices)
    return LineSegment(np.array([n[0], n[1], c]), p0, p1, len(pts), stamp, int(bi[0]), int(bi[-1]))


def _point_line_dist(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    L = np.linalg.norm(d)
    if L == 0:
        return np.linalg.norm(pts - a, axis=1)
    return np.abs((pts[:, 0] - a[0]) * d[1] - (pts[:, 1] - a[1]) * d[0]) / L


class _Scatter:
    """Prefix sums giving O(1) total-least-squares cost of any index range."""

    def __init__(self, pts: np.ndarray):
        x, y = pts[:, 0], pts[:, 1]
        z = np.zeros(1)
        self.n = np.arange(len(pts) + 1, dtype=float)
        self.sx = np.concatenate([z, np.cumsum(x)])
        self.sy = np.concatenate([z, np.cumsum(y)])
        self.sxx = np.concatenate([z, np.cumsum(x * x)])
        self.syy = np.concatenate([z, np.cumsum(y * y)])
        self.sxy = np.concatenate([z, np.cumsum(x * y)])

    def moments(self, a, b):
        """Centered scatter terms over inclusive range [a, b] (arrays allowed)."""
        b1 = np.asarray(b) + 1
        n = self.n[b1] - self.n[a]
        mx = (self.sx[b1] - self.sx[a]) / n
        my = (self.sy[b1] - self.sy[a]) / n
        cxx = (self.sxx[b1] - self.sxx[a]) - n * mx * mx
        cyy = (self.syy[b1] - self.syy[a]) - n * my * my
        cxy = (self.sxy[b1] - self.sxy[a]) - n * mx * my
        return cxx, cyy, cxy

    def sse(self, a, b):
        cxx, cyy, cxy = self.moments(a, b)
        tr = cxx + cyy
        disc = np.sqrt(np.maximum(0.25 * (cxx - cyy) ** 2 + cxy * cxy, 0.0))
        return np.maximum(0.5 * tr - disc, 0.0)

    def angle(self, a, b):
        cxx, cyy, cxy = self.moments(a, b)
        return 0.5 * np.arctan2(2 * cxy, cxx - cyy)


def _line_gap(a1, a2) -> float:
    d = abs(a1 - a2) % math.pi
    return min(d, math.pi - d)


def _bent(pts: np.ndarray, s: int, m: int, e: int, cfg: FeatureConfig) -> bool:
    # both the angle and the offset must show a corner, so range noise on
    # short arms cannot break a straight wall
    dist = float(_point_line_dist(pts[m:m + 1], pts[s], pts[e])[0])
    if dist <= cfg.split_dist:
        return False
    return float(_angles_at(pts, np.array(m), np.array(s), np.array(e))) < cfg.theta_line


def _best_split(sc: _Scatter, s: int, e: int, lo: int, hi: int) -> int:
    m = np.arange(max(lo, s + 1), min(hi, e - 1) + 1)
    if m.size == 0:
        return (s + e) // 2
    cost = sc.sse(s, m) + sc.sse(m, e)
    return int(m[np.argmin(cost)])


def _tls_max_residual(pts: np.ndarray) -> float:
    X = pts - pts.mean(axis=0)
    _, _, Vt = np.linalg.svd(X, full_matrices=False)
    return float(np.abs(X @ Vt[-1]).max())


def _refine(pts: np.ndarray, sc: _Scatter, s: int, e: int, cfg: FeatureConfig, out: list) -> None:
    """Split [s, e] at the best two-line break while the halves disagree."""
    if e - s < 4 or _tls_max_residual(pts[s:e + 1]) <= cfg.split_dist:
        out.append((s, e))
        return
    m = _best_split(sc, s, e, s + 2, e - 2)
    if _line_gap(float(sc.angle(s, m)), float(sc.angle(m, e))) >= math.pi - cfg.theta_line:
        _refine(pts, sc, s, m, cfg, out)
        _refine(pts, sc, m, e, cfg, out)
        return
    out.append((s, e))


def _merge(pts: np.ndarray, spans: list, cfg: FeatureConfig) -> list:
    """Join neighbouring spans whose union is still one straight line."""
    out = [spans[0]] if spans else []
    for a, b in spans[1:]:
        pa, pb = out[-1]
        if pb == a and _tls_max_residual(pts[pa:b + 1]) <= cfg.split_dist:
            out[-1] = (pa, b)
        else:
            out.append((a, b))
    return out


def _fit_trimmed(pts: np.ndarray, idx: np.ndarray, cfg: FeatureConfig, stamp: float):
    """Fit after peeling end points that sit off the line through the others.

    Both ends are judged against the fit through the interior points, with a
    threshold of three times that fit's residual scale (capped at trim_dist).  With
    clean data this also removes a neighbouring wall's first points.
    """
    sc = _Scatter(pts - pts.mean(axis=0))
    centred = pts - pts.mean(axis=0)
    a, b = 0, len(pts)
    # may trim below n_min; the caller drops such segments
    while b - a > 4:
        # reference fit over the interior, without either end
        s, e = a + 1, b - 2
        n = e - s + 1
        cxx, cyy, cxy = sc.moments(s, e)
        th = 0.5 * math.atan2(2 * cxy, cxx - cyy)
        normal = np.array([-math.sin(th), math.cos(th)])
        centre = np.array([sc.sx[e + 1] - sc.sx[s], sc.sy[e + 1] - sc.sy[s]]) / n
        sigma = math.sqrt(float(sc.sse(s, e)) / max(n - 2, 1))
        thr = min(cfg.trim_dist, max(3.0 * sigma, 1e-7))
        ratios = [abs(float((centred[i] - centre) @ normal)) / thr for i in (a, b - 1)]
        if max(ratios) <= 1.0:
            break
        if ratios[0] >= ratios[1]:
            a += 1
        else:
            b -= 1
    return fit_line(pts[a:b], idx[a:b], stamp), b - a


def extract_lines(ps: PointSet, cfg: FeatureConfig | None = None, stamp: float = 0.0) -> list[LineSegment]:
    """Grow segments between corner candidates, then fit each one.

    Breaks found by growth are moved to the index that minimises the
    two-sided fit cost, and spans that are still visibly bent are split
    recursively.
    """
    cfg = cfg or FeatureConfig()
    pts = ps.points
    n = len(pts)
    if n < max(cfg.n_min, 2):
        return []
    ang = vertex_angles(pts, cfg.skip)
    cand = nms_angles(ang, cfg.nms_window)
    cand = cand[np.abs(math.pi - ang[cand]) >= math.pi - cfg.theta_line]
    ends = np.unique(np.concatenate([[0], cand, [n - 1]]))

    breaks = [0]
    k = 1
    while k < len(ends):
        cur = ends[k]
        if k + 1 < len(ends) and not _bent(pts, breaks[-1], cur, ends[k + 1], cfg):
            k += 1
            continue
        breaks.append(int(cur))
        k += 1

    sc = _Scatter(pts)
    for j in range(1, len(breaks) - 1):
        b = breaks[j]
        breaks[j] = _best_split(sc, breaks[j - 1], breaks[j + 1], b - cfg.skip, b + cfg.skip)

    refined: list[tuple[int, int]] = []
    for a, b in zip(breaks[:-1], breaks[1:]):
        _refine(pts, sc, a, b, cfg, refined)
    refined = _merge(pts, refined, cfg)

    lines = []
    for a, b in refined:
        if b - a + 1 < cfg.n_min:
            continue
        seg, support = _fit_trimmed(pts[a:b + 1], ps.beam_indices[a:b + 1], cfg, stamp)
        if support < cfg.n_min or seg.length < cfg.len_min:
            continue
        lines.append(seg)
    return lines


def extract_corners(lines, cfg: FeatureConfig | None = None, closed: bool = False) -> list[Corner]:
    """Intersections of adjacent, sufficiently non-parallel segments.

    ``closed`` also pairs the last segment with the first one.
    """
    cfg = cfg or FeatureConfig()
    corners = []
    pairs = list(zip(lines[:-1], lines[1:]))
    if closed and len(lines) > 2:
        pairs.append((lines[-1], lines[0]))
    for l1, l2 in pairs:
        if np.linalg.norm(l1.p_end - l2.p_start) >= cfg.d_adjacent:
            continue
        cosang = abs(float(l1.direction @ l2.direction))
        acute = math.acos(min(1.0, cosang))
        if acute < math.radians(1.0) or acute < cfg.theta_corner:
            continue
        A = np.array([l1.normal, l2.normal])
        p = np.linalg.solve(A, -np.array([l1.c, l2.c]))
        corners.append(Corner(p, acute))
    return corners


@dataclass
class ScanFeatures:
    lines: list = field(default_factory=list)
    corners: list = field(default_factory=list)
    sets: list = field(default_factory=list)


def extract_scan_features(points, beam_indices, cfg: FeatureConfig | None = None, stamp: float = 0.0,
                          closed: bool = False) -> ScanFeatures:
    cfg = cfg or FeatureConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    sets = split_continuous(pts, beam_indices, cfg.d_break, cfg.n_min, closed)
    ring = (closed and len(sets) == 1 and len(sets[0]) == len(pts) > 2 * cfg.skip + 1
            and np.linalg.norm(pts[-1] - pts[0]) <= cfg.d_break)
    if ring:
        sets = [_open_loop(sets[0], cfg.skip)]
    lines, corners = [], []
    for ps in sets:
        seg = extract_lines(ps, cfg, stamp)
        lines.extend(seg)
        corners.extend(extract_corners(seg, cfg, closed=ring))
    return ScanFeatures(lines, corners, sets)


def _open_loop(ps: PointSet, skip: int) -> PointSet:
    """Cut a closed ring of points at its sharpest vertex."""
    n = len(ps)
    i = np.arange(n)
    ang = _angles_at(ps.points, i, (i - skip) % n, (i + skip) % n)
    k = int(np.argmin(ang))
    order = np.concatenate([np.arange(k, n), np.arange(0, k + 1)])
    return PointSet(ps.points[order], ps.beam_indices[order])


class LineIndex:
    """Segments bucketed by undirected orientation for fast candidate lookup."""

    def __init__(self, lines=(), n_buckets: int = 64):
        self.n = n_buckets
        self.buckets: list[list[int]] = [[] for _ in range(n_buckets)]
        self.lines: list[LineSegment] = []
        for l in lines:
            self.add(l)

    def _bucket(self, angle: float) -> int:
        return int(angle / math.pi * self.n) % self.n

    def add(self, line: LineSegment) -> int:
        self.lines.append(line)
        self.buckets[self._bucket(line.angle)].append(len(self.lines) - 1)
        return len(self.lines) - 1

    def query(self, angle: float, tol: float) -> list[int]:
        width = math.pi / self.n
        span = int(math.ceil(tol / width))
        b = self._bucket(angle % math.pi)
        ks = {k % self.n for k in range(b - span, b + span + 1)}
        return [i for k in sorted(ks) for i in self.buckets[k]]


def dump_features(path, records) -> None:
    """Write one JSON line per scan: stamp, segments, corners."""
    with open(path, "w") as fh:
        for stamp, feats in records:
            rec = {"stamp": float(stamp), "segments": [l.to_dict() for l in feats.lines],
                   "corners": [{"position": [float(x) for x in c.position],
                                "incident_angle": float(c.incident_angle)} for c in feats.corners]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
