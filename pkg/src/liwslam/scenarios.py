"""Bundled simulator scenarios.

``square_loop``   ring corridor around a block, about 44 m with a revisit of the start.
``corridor_clip`` 2 m wide, 30 m long corridor with ranges clipped at 3 m.
``two_rooms``     two rooms joined by a door; the route returns to room A.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .dataio import Calibration
from .geometry import Pose2, Pose3
from .simgen import Motion, NoiseConfig, ScanParams, SimOutput, World, WorldBuilder, build_trajectory, simulate

# 1/3 degree beams, close to common indoor scanners
SCAN = ScanParams(n_beams=1080)


def notched_wall(a, b, notches, outward: float = 1.0) -> list[tuple[float, float]]:
    """Polyline from a to b with rectangular notches (offset, width, depth).

    Positive depth recesses the wall to the left of a->b times ``outward``.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    u = (b - a) / np.linalg.norm(b - a)
    n = outward * np.array([-u[1], u[0]])
    pts = [a]
    for off, w, depth in sorted(notches):
        p0 = a + u * off
        p1 = p0 + u * w
        pts += [p0, p0 + n * depth, p1 + n * depth, p1]
    pts.append(b)
    return [tuple(p) for p in pts]


def _ring(corners, notch_sets, outward):
    pts = []
    for i, c in enumerate(corners):
        d = corners[(i + 1) % len(corners)]
        pts += notched_wall(c, d, notch_sets[i], outward)[:-1]
    return pts


def square_loop_world() -> World:
    outer = [(-7.0, -7.0), (7.0, -7.0), (7.0, 7.0), (-7.0, 7.0)]
    inner = [(-3.0, -3.0), (3.0, -3.0), (3.0, 3.0), (-3.0, 3.0)]
    # irregular spacing so no two sides of the ring look alike
    outer_notches = [
        [(1.2, 1.0, 0.6), (4.1, 1.6, 0.4), (8.3, 0.8, 0.7), (11.0, 1.3, 0.5)],
        [(2.0, 1.4, 0.5), (5.6, 0.9, 0.8), (9.2, 2.0, 0.4)],
        [(0.9, 0.7, 0.5), (3.3, 1.2, 0.6), (6.9, 1.5, 0.3), (10.4, 1.0, 0.7)],
        [(2.6, 2.2, 0.5), (7.0, 1.0, 0.4), (10.0, 1.7, 0.6)],
    ]
    inner_notches = [
        [(0.8, 1.1, 0.3), (3.4, 0.7, 0.5)],
        [(1.9, 1.5, 0.4)],
        [(0.6, 0.8, 0.4), (2.8, 1.4, 0.3), (4.7, 0.6, 0.5)],
        [(1.3, 2.0, 0.3), (4.2, 0.9, 0.4)],
    ]
    wb = WorldBuilder("square_loop")
    # outer boundary is CCW, so recesses go to the right of each edge
    wb.polyline(_ring(outer, outer_notches, -1.0), closed=True)
    # inner block is CCW too; protrusions point away from the block
    wb.polyline(_ring(inner, inner_notches, -1.0), closed=True)
    for cx, cy, w, h, yaw in [(-1.0, -6.2, 0.4, 0.4, 0.0), (6.2, 1.5, 0.5, 0.3, 0.3),
                              (2.4, 6.3, 0.3, 0.6, 0.0), (-6.3, -2.2, 0.4, 0.4, 0.5),
                              (4.6, -3.6, 0.3, 0.3, 0.2), (-3.7, 4.3, 0.5, 0.3, 0.0)]:
        wb.box(cx, cy, w, h, yaw)
    return wb.build()


def default_calibration() -> Calibration:
    return Calibration(T_base_lidar=Pose3((0.0, 0.0, 0.0), (0.12, 0.0, 0.25)),
                       T_imu_base=Pose3((0.0, 0.0, 0.05), (0.0, 0.0, -0.08)))


def square_loop(seed: int = 0, noise: NoiseConfig | None = None) -> SimOutput:
    noise = noise or NoiseConfig(seed=seed)
    start = Pose2(0.0, (-3.0, -5.0))
    q = math.pi / 2
    motions = [Motion("wait", duration=1.0), Motion("fwd", 8.0), Motion("turn", q), Motion("fwd", 10.0),
               Motion("turn", q), Motion("fwd", 10.0), Motion("turn", q), Motion("fwd", 10.0),
               Motion("turn", q), Motion("fwd", 6.0), Motion("wait", duration=0.5)]
    return simulate(square_loop_world(), build_trajectory(start, motions), default_calibration(), noise,
                    scan_params=SCAN)


def corridor_world(length: float = 30.0, width: float = 2.0) -> World:
    h = width / 2
    return (WorldBuilder("corridor_clip")
            .polyline([(0.0, -h), (length, -h), (length, h), (0.0, h)], closed=True).build())


def corridor_clip(seed: int = 0, noise: NoiseConfig | None = None) -> SimOutput:
    noise = noise or NoiseConfig(seed=seed)
    start = Pose2(0.0, (2.0, 0.0))
    motions = [Motion("wait", duration=1.0), Motion("fwd", 20.0), Motion("wait", duration=0.5)]
    sim = simulate(corridor_world(), build_trajectory(start, motions), default_calibration(), noise,
                   scan_params=SCAN, range_clip=3.0)
    # only the two side walls are visible, so the initialization gate is relaxed
    sim.overrides = {"frontend.m_init": 2}
    return sim


def two_rooms_world() -> World:
    wb = WorldBuilder("two_rooms")
    # room A: x in [0, 6], room B: x in [6.2, 12], door of 1.2 m at y in [2.4, 3.6]
    wb.polyline([(6.0, 2.4), (6.0, 0.0)] + notched_wall((6.0, 0.0), (0.0, 0.0), [(1.0, 1.2, 0.4)])[1:-1]
                + [(0.0, 0.0)] + notched_wall((0.0, 0.0), (0.0, 5.0), [(2.8, 1.0, 0.5)])[1:-1]
                + [(0.0, 5.0)] + notched_wall((0.0, 5.0), (6.0, 5.0), [(1.6, 0.9, 0.4), (3.9, 1.3, 0.3)])[1:-1]
                + [(6.0, 5.0), (6.0, 3.6)])
    wb.polyline([(6.2, 3.6), (6.2, 5.0)] + notched_wall((6.2, 5.0), (12.0, 5.0), [(1.5, 1.4, 0.4)])[1:-1]
                + [(12.0, 5.0), (12.0, 0.0), (6.2, 0.0), (6.2, 2.4)])
    wb.segment((6.0, 2.4), (6.2, 2.4)).segment((6.0, 3.6), (6.2, 3.6))
    wb.box(2.0, 3.6, 0.6, 0.4).box(4.3, 1.3, 0.5, 0.5, 0.4).box(9.5, 1.4, 0.8, 0.4).box(10.6, 3.8, 0.4, 0.4)
    wb.box(8.2, 4.1, 0.3, 0.5, 0.2).box(1.0, 0.8, 0.4, 0.4, 0.3).box(3.2, 0.7, 0.5, 0.3)
    wb.box(5.2, 4.3, 0.4, 0.4, 0.6).box(0.7, 4.2, 0.3, 0.3)
    return wb.build()


def two_rooms(seed: int = 0, noise: NoiseConfig | None = None) -> SimOutput:
    noise = noise or NoiseConfig(seed=seed)
    start = Pose2(0.0, (1.2, 2.0))
    q = math.pi / 2
    # A -> through the door -> small loop in B -> back through the door -> A, facing the other way
    motions = [Motion("wait", duration=1.0), Motion("fwd", 1.8), Motion("turn", q), Motion("fwd", 1.0),
               Motion("turn", -q), Motion("fwd", 5.5), Motion("turn", -q), Motion("fwd", 1.0),
               Motion("turn", q), Motion("fwd", 2.0), Motion("turn", q), Motion("fwd", 1.0),
               Motion("turn", q), Motion("fwd", 7.5), Motion("turn", q), Motion("fwd", 1.0),
               Motion("turn", -q), Motion("fwd", 1.0), Motion("wait", duration=0.5)]
    return simulate(two_rooms_world(), build_trajectory(start, motions), default_calibration(), noise,
                    scan_params=SCAN)


SCENARIOS: dict[str, Callable[..., SimOutput]] = {
    "square_loop": square_loop,
    "corridor_clip": corridor_clip,
    "two_rooms": two_rooms,
}


def make_scenario(name: str, seed: int = 0, noise: NoiseConfig | None = None) -> SimOutput:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return fn(seed=seed, noise=noise)
