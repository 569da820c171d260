"""Occupancy probability grid built from keyframe scans."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .geometry import Pose2


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class MapConfig:
    resolution: float = 0.05
    p_hit: float = 0.55
    p_miss: float = 0.49
    p_min: float = 0.12
    p_max: float = 0.971
    occupied_thresh: float = 0.65
    free_thresh: float = 0.35
    smooth_sigma: float = 0.5
    chunk: int = 64
    max_range: float = 30.0


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Cells on the segment from (x0, y0) to (x1, y1), both ends included."""
    dx, dy = x1 - x0, y1 - y0
    n = max(abs(dx), abs(dy))
    if n == 0:
        return [(x0, y0)]
    out = []
    for k in range(n + 1):
        out.append((x0 + _round_div(k * dx, n), y0 + _round_div(k * dy, n)))
    return out


def _round_div(a, n):
    # round(a / n) with halves away from zero, exact in integers
    a = np.asarray(a)
    q = (2 * np.abs(a) + n) // (2 * n)
    r = np.sign(a) * q
    return int(r) if r.ndim == 0 else r


def ray_cells(x0: int, y0: int, ends: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All Bresenham cells of rays from (x0, y0) to each end, excluding the end cells.

    Returns cell coordinates and the index of the ray each cell belongs to.
    """
    ends = np.asarray(ends, dtype=np.int64).reshape(-1, 2)
    d = ends - np.array([x0, y0])
    n = np.abs(d).max(axis=1)
    counts = n  # k = 0 .. n-1 (drop the endpoint)
    total = int(counts.sum())
    if total == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    ray = np.repeat(np.arange(len(ends)), counts)
    start = np.cumsum(counts) - counts
    k = np.arange(total) - np.repeat(start, counts)
    nn = n[ray]
    cx = x0 + _round_div(k * d[ray, 0], nn)
    cy = y0 + _round_div(k * d[ray, 1], nn)
    return np.stack([cx, cy], axis=1), ray


class GridMap:
    """Log-odds grid; cell (i, j) has its centre at origin + res * (i, j) with i along x."""

    def __init__(self, cfg: MapConfig | None = None, origin: Pose2 | None = None):
        self.cfg = cfg or MapConfig()
        self.resolution = self.cfg.resolution
        self.origin = origin or Pose2()
        self.offset = np.zeros(2, dtype=np.int64)  # grid index of array element [0, 0]
        self.log_odds = np.zeros((0, 0))
        self.observed = np.zeros((0, 0), dtype=bool)
        self.l_hit = logit(self.cfg.p_hit)
        self.l_miss = logit(self.cfg.p_miss)
        self.l_min = logit(self.cfg.p_min)
        self.l_max = logit(self.cfg.p_max)

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_odds.shape

    def world_to_cell(self, pts) -> np.ndarray:
        local = self.origin.inverse().apply(np.asarray(pts, dtype=float).reshape(-1, 2))
        return np.floor(local / self.resolution + 0.5).astype(np.int64)

    def cell_center(self, cells) -> np.ndarray:
        return self.origin.apply(np.asarray(cells, dtype=float).reshape(-1, 2) * self.resolution)

    def _ensure(self, lo: np.ndarray, hi: np.ndarray) -> None:
        """Grow storage in whole chunks so that grid indices lo..hi fit."""
        c = self.cfg.chunk
        new_lo = (lo // c) * c
        new_hi = (hi // c + 1) * c - 1
        if self.log_odds.size:
            cur_lo = self.offset
            cur_hi = self.offset + np.array(self.shape) - 1
            if np.all(lo >= cur_lo) and np.all(hi <= cur_hi):
                return
            new_lo = np.minimum(cur_lo, new_lo)
            new_hi = np.maximum(cur_hi, new_hi)
        size = (new_hi - new_lo + 1).astype(int)
        L = np.zeros(tuple(size))
        M = np.zeros(tuple(size), dtype=bool)
        if self.log_odds.size:
            a = self.offset - new_lo
            L[a[0]:a[0] + self.shape[0], a[1]:a[1] + self.shape[1]] = self.log_odds
            M[a[0]:a[0] + self.shape[0], a[1]:a[1] + self.shape[1]] = self.observed
        self.log_odds, self.observed, self.offset = L, M, new_lo.astype(np.int64)

    def _index(self, cells: np.ndarray):
        idx = cells - self.offset
        return idx[:, 0], idx[:, 1]

    def update_cells(self, cells: np.ndarray, delta: float) -> None:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        if not len(cells):
            return
        self._ensure(cells.min(axis=0), cells.max(axis=0))
        i, j = self._index(cells)
        np.add.at(self.log_odds, (i, j), delta)
        np.clip(self.log_odds, self.l_min, self.l_max, out=self.log_odds)
        self.observed[i, j] = True

    def integrate_scan(self, points_local: np.ndarray, pose: Pose2) -> None:
        """One hit per endpoint cell and one miss per traversed cell, per scan."""
        pts = np.asarray(points_local, dtype=float).reshape(-1, 2)
        if not (np.all(np.isfinite(pose.xy)) and math.isfinite(pose.yaw)):
            raise ValueError("non-finite pose")
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        pts = pts[np.linalg.norm(pts, axis=1) <= self.cfg.max_range]
        if not len(pts):
            return
        sensor = self.world_to_cell(pose.xy)[0]
        ends = self.world_to_cell(pose.apply(pts))
        lo = np.minimum(ends.min(axis=0), sensor)
        hi = np.maximum(ends.max(axis=0), sensor)
        self._ensure(lo, hi)
        cells, _ = ray_cells(int(sensor[0]), int(sensor[1]), ends)
        hits = np.unique(self._flat(ends))
        miss = np.unique(self._flat(cells)) if len(cells) else np.zeros(0, dtype=np.int64)
        # endpoints seen in the same scan take precedence over pass-throughs
        miss = miss[~np.isin(miss, hits, assume_unique=True)]
        L = self.log_odds.reshape(-1)
        M = self.observed.reshape(-1)
        L[miss] += self.l_miss
        L[hits] += self.l_hit
        M[miss] = True
        M[hits] = True
        L[miss] = np.clip(L[miss], self.l_min, self.l_max)
        L[hits] = np.clip(L[hits], self.l_min, self.l_max)

    def integrate_keyframe(self, kf, pose: Pose2 | None = None) -> None:
        self.integrate_scan(kf.scan_points[:, :2], kf.pose2 if pose is None else pose)

    def _flat(self, cells: np.ndarray) -> np.ndarray:
        i, j = self._index(cells)
        return i * self.shape[1] + j

    def probability(self) -> np.ndarray:
        """Probability per cell, NaN where never observed."""
        p = 1.0 / (1.0 + np.exp(-self.log_odds))
        return np.where(self.observed, p, np.nan)

    def probability_at(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        out = np.full(len(cells), np.nan)
        if self.log_odds.size == 0:
            return out
        idx = cells - self.offset
        ok = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)
        P = self.probability()
        out[ok] = P[idx[ok, 0], idx[ok, 1]]
        return out


def gaussian_kernel(sigma: float, truncate: float = 3.0) -> np.ndarray:
    r = max(1, int(math.ceil(truncate * sigma)))
    x = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(prob: np.ndarray, sigma_cells: float) -> np.ndarray:
    """Separable Gaussian blur over observed cells (non-NaN); unknown cells stay NaN."""
    if sigma_cells <= 0 or prob.size == 0:
        return prob.copy()
    mask = np.isfinite(prob)
    k = gaussian_kernel(sigma_cells)
    num = np.where(mask, prob, 0.0)
    den = mask.astype(float)
    for ax in (0, 1):
        num = convolve1d(num, k, axis=ax, mode="constant", cval=0.0)
        den = convolve1d(den, k, axis=ax, mode="constant", cval=0.0)
    out = np.full(prob.shape, np.nan)
    out[mask] = num[mask] / den[mask]
    return out


def classify(prob: np.ndarray, occupied_thresh: float = 0.65, free_thresh: float = 0.35) -> np.ndarray:
    """PGM pixel values: 0 occupied, 254 free, 205 unknown or ambiguous."""
    img = np.full(prob.shape, 205, dtype=np.uint8)
    with np.errstate(invalid="ignore"):
        img[prob > occupied_thresh] = 0
        img[prob < free_thresh] = 254
    return img


@dataclass
class MapMetadata:
    resolution: float
    origin_x: float
    origin_y: float
    origin_yaw: float
    occupied_thresh: float
    free_thresh: float
    width: int
    height: int

    def dumps(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.__dict__.items())

    @classmethod
    def loads(cls, text: str) -> "MapMetadata":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        return cls(**{k: (int(kv[k]) if k in ("width", "height") else float(kv[k]))
                      for k in cls.__dataclass_fields__})


def metadata_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def export(grid: GridMap, path, sigma_cells: float | None = None) -> MapMetadata:
    """Write a P5 PGM (top row = largest y) and a key=value sidecar next to it."""
    if grid.log_odds.size == 0:
        raise ValueError("empty map")
    cfg = grid.cfg
    sigma = cfg.smooth_sigma if sigma_cells is None else sigma_cells
    prob = smooth(grid.probability(), sigma)
    img = classify(prob, cfg.occupied_thresh, cfg.free_thresh)
    # array axis 0 is x, axis 1 is y; image rows run from +y down
    pix = img.T[::-1]
    h, w = pix.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pix).tobytes())
    # origin reported as the lower-left corner of pixel (0, h-1)
    corner = grid.origin.apply((grid.offset - 0.5) * grid.resolution)
    meta = MapMetadata(grid.resolution, float(corner[0]), float(corner[1]), grid.origin.yaw,
                       cfg.occupied_thresh, cfg.free_thresh, w, h)
    metadata_path(path).write_text(meta.dumps())
    return meta


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def read_metadata(path) -> MapMetadata:
    return MapMetadata.loads(metadata_path(path).read_text())


def build_map(keyframes, poses: dict | None = None, cfg: MapConfig | None = None) -> GridMap:
    """Rebuild from scratch using optimized poses where given."""
    grid = GridMap(cfg)
    for kf in keyframes:
        grid.integrate_keyframe(kf, None if poses is None else poses.get(kf.id, kf.pose2))
    return grid
