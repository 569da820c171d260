"""Sensor streams, calibration, CSV/TUM file formats and frame synchronization."""
from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose3, interpolate, inverse

log = logging.getLogger(__name__)

IMU_GAP_MAX = 0.1

SCAN_HEADER = "stamp,angle_min,angle_max,angle_increment,range_min,range_max,ranges"
IMU_HEADER = "stamp,ax,ay,az,gx,gy,gz"
WHEEL_HEADER = "stamp,x,y,z,rx,ry,rz"


class DataFormatError(ValueError):
    pass


class DataGapError(ValueError):
    pass


class OutOfRangeError(ValueError):
    pass


def fmt_stamp(t: float) -> str:
    return f"{t:.9g}"


def quantize_stamp(t: float) -> float:
    """Round a stamp to what survives a write/read cycle."""
    return float(fmt_stamp(t))


def fmt_float(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- samples

@dataclass(frozen=True)
class LaserScan:
    stamp: float
    angle_min: float
    angle_max: float
    angle_increment: float
    range_min: float
    range_max: float
    ranges: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=float).reshape(-1)
        object.__setattr__(self, "ranges", r)
        if self.angle_increment <= 0:
            raise ValueError("angle_increment must be positive")
        n = int(round((self.angle_max - self.angle_min) / self.angle_increment)) + 1
        if n != r.shape[0]:
            raise ValueError(f"scan has {r.shape[0]} ranges, header implies {n}")

    @property
    def angles(self) -> np.ndarray:
        return self.angle_min + np.arange(self.ranges.shape[0]) * self.angle_increment


@dataclass(frozen=True)
class ImuSample:
    stamp: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass(frozen=True)
class WheelOdomSample:
    stamp: float
    pose: Pose3


class ImuStream:
    """Column-oriented IMU samples; indexing yields :class:`ImuSample`."""

    def __init__(self, stamps, accel, gyro):
        self.stamps = np.asarray(stamps, dtype=float).reshape(-1)
        self.accel = np.asarray(accel, dtype=float).reshape(-1, 3)
        self.gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
        if not (self.stamps.shape[0] == self.accel.shape[0] == self.gyro.shape[0]):
            raise ValueError("IMU columns differ in length")

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]) -> "ImuStream":
        if isinstance(samples, ImuStream):
            return samples
        return cls([s.stamp for s in samples], [s.accel for s in samples], [s.gyro for s in samples])

    def __len__(self) -> int:
        return self.stamps.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return ImuStream(self.stamps[i], self.accel[i], self.gyro[i])
        return ImuSample(float(self.stamps[i]), self.accel[i].copy(), self.gyro[i].copy())

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        return (isinstance(other, ImuStream) and np.array_equal(self.stamps, other.stamps)
                and np.array_equal(self.accel, other.accel) and np.array_equal(self.gyro, other.gyro))


class WheelStream:
    """Absolute chassis poses in the odometry frame."""

    def __init__(self, stamps, xyz, rotvec):
        self.stamps = np.asarray(stamps, dtype=float).reshape(-1)
        self.xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        self.rotvec = np.asarray(rotvec, dtype=float).reshape(-1, 3)

    @classmethod
    def from_samples(cls, samples: Sequence[WheelOdomSample]) -> "WheelStream":
        if isinstance(samples, WheelStream):
            return samples
        return cls([s.stamp for s in samples], [s.pose.translation for s in samples],
                   [s.pose.rotation for s in samples])

    def __len__(self) -> int:
        return self.stamps.shape[0]

    def __getitem__(self, i) -> WheelOdomSample:
        return WheelOdomSample(float(self.stamps[i]), Pose3(self.rotvec[i], self.xyz[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        return (isinstance(other, WheelStream) and np.array_equal(self.stamps, other.stamps)
                and np.array_equal(self.xyz, other.xyz) and np.array_equal(self.rotvec, other.rotvec))


# ------------------------------------------------------------ calibration

@dataclass
class ImuNoise:
    accel_density: float = 2e-3
    gyro_density: float = 2e-4
    accel_bias_walk: float = 1e-4
    gyro_bias_walk: float = 1e-5


@dataclass
class WheelSigma:
    d: float = 0.01
    theta_d: float = 0.02
    theta: float = 0.01


@dataclass
class GroundSigma:
    z_m: float = 0.002
    tilt_rad: float = 0.001


@dataclass
class Calibration:
    T_base_lidar: Pose3 = field(default_factory=Pose3)
    T_imu_base: Pose3 = field(default_factory=Pose3)
    gravity_magnitude: float = 9.81
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    wheel_sigma: WheelSigma = field(default_factory=WheelSigma)
    ground_sigma: GroundSigma = field(default_factory=GroundSigma)
    line_sigma: float = 0.02

    def validate(self) -> None:
        if not 9.0 <= self.gravity_magnitude <= 10.5:
            raise ValueError(f"gravity_magnitude {self.gravity_magnitude} outside [9.0, 10.5]")
        for key, val in self.flat().items():
            if isinstance(val, float) and key != "gravity_magnitude" and val <= 0:
                raise ValueError(f"calibration sigma {key} must be positive")

    @property
    def T_base_imu(self) -> Pose3:
        return inverse(self.T_imu_base)

    def flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Pose3):
                out[f"{f.name}.xyz"] = v.translation
                out[f"{f.name}.rotvec"] = v.rotation
            elif is_dataclass(v):
                for g in fields(v):
                    out[f"{f.name}.{g.name}"] = float(getattr(v, g.name))
            else:
                out[f.name] = float(v)
        return out


def write_calibration(calib: Calibration, path) -> None:
    lines = []
    for key, val in calib.flat().items():
        if isinstance(val, np.ndarray):
            lines.append(f"{key}={','.join(fmt_float(x) for x in val)}")
        else:
            lines.append(f"{key}={fmt_float(val)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_calibration(path) -> Calibration:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"calibration file not found: {path}")
    vals: dict[str, str] = {}
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path.name}:{n} expected key=value")
        k, v = line.split("=", 1)
        vals[k.strip()] = v.strip()
    calib = Calibration()
    known = calib.flat()
    poses: dict[str, dict[str, np.ndarray]] = {}
    for k, v in vals.items():
        if k not in known:
            raise DataFormatError(f"{path.name}: unknown calibration key {k!r}")
        head, _, tail = k.partition(".")
        if tail in ("xyz", "rotvec"):
            arr = np.array([float(x) for x in v.split(",")])
            if arr.shape != (3,):
                raise DataFormatError(f"{path.name}: {k} needs 3 values")
            poses.setdefault(head, {})[tail] = arr
        elif tail:
            setattr(getattr(calib, head), tail, float(v))
        else:
            setattr(calib, head, float(v))
    for head, parts in poses.items():
        old = getattr(calib, head)
        setattr(calib, head, Pose3(parts.get("rotvec", old.rotation), parts.get("xyz", old.translation)))
    calib.validate()
    return calib


# ------------------------------------------------------------------ CSVs

def _rows(path: Path, header: str):
    if not path.exists():
        raise FileNotFoundError(f"{path.name} not found in {path.parent}")
    with open(path, "r") as fh:
        first = fh.readline().strip()
        if first != header:
            raise DataFormatError(f"{path.name}:1 bad header {first!r}")
        for n, line in enumerate(fh, start=2):
            line = line.strip()
            if line:
                yield n, line


def _check_monotone(name: str, n: int, prev: float | None, t: float) -> None:
    if prev is not None and not t > prev:
        raise DataFormatError(f"{name}:{n} non-monotone")


def read_imu_csv(path) -> ImuStream:
    path = Path(path)
    data, prev = [], None
    for n, line in _rows(path, IMU_HEADER):
        try:
            row = [float(x) for x in line.split(",")]
        except ValueError:
            raise DataFormatError(f"{path.name}:{n} malformed number") from None
        if len(row) != 7 or not all(math.isfinite(x) for x in row):
            raise DataFormatError(f"{path.name}:{n} expected 7 finite fields")
        _check_monotone(path.name, n, prev, row[0])
        prev = row[0]
        data.append(row)
    a = np.array(data, dtype=float).reshape(-1, 7)
    return ImuStream(a[:, 0], a[:, 1:4], a[:, 4:7])


def read_wheel_csv(path) -> WheelStream:
    path = Path(path)
    data, prev = [], None
    for n, line in _rows(path, WHEEL_HEADER):
        try:
            row = [float(x) for x in line.split(",")]
        except ValueError:
            raise DataFormatError(f"{path.name}:{n} malformed number") from None
        if len(row) != 7 or not all(math.isfinite(x) for x in row):
            raise DataFormatError(f"{path.name}:{n} expected 7 finite fields")
        _check_monotone(path.name, n, prev, row[0])
        prev = row[0]
        data.append(row)
    a = np.array(data, dtype=float).reshape(-1, 7)
    return WheelStream(a[:, 0], a[:, 1:4], a[:, 4:7])


def read_scan_csv(path) -> list[LaserScan]:
    path = Path(path)
    scans, prev = [], None
    for n, line in _rows(path, SCAN_HEADER):
        parts = line.split(",")
        if len(parts) != 7:
            raise DataFormatError(f"{path.name}:{n} expected 7 fields")
        try:
            head = [float(x) for x in parts[:6]]
            ranges = np.array([float(x) for x in parts[6].split(";")]) if parts[6] else np.zeros(0)
        except ValueError:
            raise DataFormatError(f"{path.name}:{n} malformed number") from None
        _check_monotone(path.name, n, prev, head[0])
        prev = head[0]
        try:
            scans.append(LaserScan(*head, ranges))
        except ValueError as e:
            raise DataFormatError(f"{path.name}:{n} {e}") from None
    return scans


def write_imu_csv(path, stream: ImuStream) -> None:
    with open(path, "w") as fh:
        fh.write(IMU_HEADER + "\n")
        for t, a, g in zip(stream.stamps, stream.accel, stream.gyro):
            fh.write(",".join([fmt_stamp(t)] + [fmt_float(x) for x in (*a, *g)]) + "\n")


def write_wheel_csv(path, stream: WheelStream) -> None:
    with open(path, "w") as fh:
        fh.write(WHEEL_HEADER + "\n")
        for t, p, r in zip(stream.stamps, stream.xyz, stream.rotvec):
            fh.write(",".join([fmt_stamp(t)] + [fmt_float(x) for x in (*p, *r)]) + "\n")


def write_scan_csv(path, scans: Sequence[LaserScan]) -> None:
    with open(path, "w") as fh:
        fh.write(SCAN_HEADER + "\n")
        for s in scans:
            head = [fmt_stamp(s.stamp)] + [fmt_float(x) for x in (s.angle_min, s.angle_max, s.angle_increment,
                                                                 s.range_min, s.range_max)]
            fh.write(",".join(head) + "," + ";".join(fmt_float(r) for r in s.ranges) + "\n")


@dataclass
class Dataset:
    scans: list
    imu: ImuStream
    wheel: WheelStream
    calib: Calibration


def load_dataset(directory, calib_path=None) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    calib = read_calibration(calib_path if calib_path is not None else d / "calib.txt")
    return Dataset(read_scan_csv(d / "scan.csv"), read_imu_csv(d / "imu.csv"),
                   read_wheel_csv(d / "wheel.csv"), calib)


def save_dataset(directory, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_scan_csv(d / "scan.csv", ds.scans)
    write_imu_csv(d / "imu.csv", ds.imu)
    write_wheel_csv(d / "wheel.csv", ds.wheel)
    write_calibration(ds.calib, d / "calib.txt")


# ----------------------------------------------------------- operations

@dataclass(frozen=True)
class ScanPoints:
    points: np.ndarray
    beam_indices: np.ndarray


def scan_to_points(scan: LaserScan) -> ScanPoints:
    r = scan.ranges
    keep = np.isfinite(r) & (r >= scan.range_min) & (r <= scan.range_max)
    idx = np.flatnonzero(keep)
    phi = scan.angle_min + idx * scan.angle_increment
    rr = r[idx]
    return ScanPoints(np.column_stack([rr * np.cos(phi), rr * np.sin(phi)]), idx)


def wheel_pose_at(stream: WheelStream, t: float) -> Pose3:
    stream = WheelStream.from_samples(stream)
    ts = stream.stamps
    if len(ts) == 0 or t < ts[0] or t > ts[-1]:
        raise OutOfRangeError(f"t={t} outside wheel coverage")
    i = bisect.bisect_left(ts, t)
    if ts[i] == t:
        return stream[i].pose
    a, b = stream[i - 1], stream[i]
    s = (t - a.stamp) / (b.stamp - a.stamp)
    return interpolate(a.pose, b.pose, s)


def imu_window(stream, t0: float, t1: float, max_gap: float = IMU_GAP_MAX) -> ImuStream:
    stream = ImuStream.from_samples(stream)
    ts = stream.stamps
    if not t0 < t1:
        raise ValueError("imu_window requires t0 < t1")
    if len(ts) == 0 or t0 < ts[0] or t1 > ts[-1]:
        raise OutOfRangeError(f"window [{t0}, {t1}] outside IMU coverage")
    lo = bisect.bisect_right(ts, t0)
    hi = bisect.bisect_left(ts, t1)
    inner = slice(lo, hi)

    def at(t: float):
        j = bisect.bisect_left(ts, t)
        if ts[j] == t:
            return stream.accel[j], stream.gyro[j]
        s = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        return ((1 - s) * stream.accel[j - 1] + s * stream.accel[j],
                (1 - s) * stream.gyro[j - 1] + s * stream.gyro[j])

    a0, g0 = at(t0)
    a1, g1 = at(t1)
    stamps = np.concatenate([[t0], ts[inner], [t1]])
    if np.diff(stamps).max() > max_gap:
        raise DataGapError(f"IMU gap over {max_gap} s inside [{t0}, {t1}]")
    return ImuStream(stamps, np.vstack([a0, stream.accel[inner], a1]),
                     np.vstack([g0, stream.gyro[inner], g1]))


@dataclass
class Frame:
    index: int
    stamp: float
    scan: LaserScan
    imu: ImuStream | None
    wheel_pose: Pose3


def iter_frames(ds: Dataset) -> Iterator[Frame]:
    """Pair each scan with the IMU window since the previous kept scan.

    Scans outside wheel/IMU coverage, or whose IMU window has a gap, are
    dropped with a warning.
    """
    prev_t = None
    k = 0
    for scan in ds.scans:
        try:
            pose = wheel_pose_at(ds.wheel, scan.stamp)
            imu = imu_window(ds.imu, prev_t, scan.stamp) if prev_t is not None else None
        except (OutOfRangeError, DataGapError) as e:
            log.warning("dropping scan at %.6f: %s", scan.stamp, e)
            if isinstance(e, DataGapError):
                prev_t = None
            continue
        yield Frame(k, scan.stamp, scan, imu, pose)
        k += 1
        prev_t = scan.stamp


# ------------------------------------------------------------------- TUM

def write_tum(path, stamps: Sequence[float], poses: Sequence[Pose3]) -> None:
    with open(path, "w") as fh:
        for t, p in zip(stamps, poses):
            q = Rotation.from_rotvec(p.rotation).as_quat()
            vals = [fmt_stamp(t)] + [fmt_float(x) for x in (*p.translation, *q)]
            fh.write(" ".join(vals) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[Pose3]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    stamps, poses = [], []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataFormatError(f"{path.name}:{n} expected 8 fields")
        v = [float(x) for x in parts]
        if stamps and not v[0] > stamps[-1]:
            raise DataFormatError(f"{path.name}:{n} non-monotone")
        q = np.array(v[4:8])
        rv = Rotation.from_quat(q / np.linalg.norm(q)).as_rotvec()
        stamps.append(v[0])
        poses.append(Pose3(rv, v[1:4]))
    return np.array(stamps), poses
