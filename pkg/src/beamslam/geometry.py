"""2D geometry: kinematics, mirror anchors, reflections, path angles.

Coordinates are meters, east = +x, north = +y. All bearings are measured
from the negative y axis and folded into the open interval (0, pi) because
a ULA cannot distinguish front from back.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

__all__ = [
    "Vec2",
    "UEState",
    "Wall",
    "Anchor",
    "PathGeometry",
    "fold_angle",
    "bearing",
    "step_kinematics",
    "mirror_anchor",
    "is_path_clear",
    "reflection_point",
    "path_angles",
]

_EPS = 1e-9


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinates ({self.x}, {self.y})")

    def __add__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x - other.x, self.y - other.y)

    def scaled(self, k: float) -> "Vec2":
        return Vec2(k * self.x, k * self.y)

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def dist(self, other: "Vec2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple:
        return (self.x, self.y)


@dataclass(frozen=True)
class UEState:
    position: Vec2
    velocity: Vec2
    acceleration: Vec2

    def speed(self) -> float:
        return self.velocity.norm()


@dataclass(frozen=True)
class Wall:
    a: Vec2
    b: Vec2

    def __post_init__(self):
        if self.a.dist(self.b) <= _EPS:
            raise ValueError("degenerate wall (endpoints closer than 1e-9 m)")


@dataclass(frozen=True)
class Anchor:
    kind: str  # "PA" | "VA"
    position: Vec2
    wall_index: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("PA", "VA"):
            raise ValueError(f"anchor kind must be PA or VA, got {self.kind!r}")
        if (self.kind == "VA") != (self.wall_index is not None):
            raise ValueError("wall_index present iff kind is VA")


@dataclass(frozen=True)
class PathGeometry:
    anchor_index: int
    aoa: float
    aod: float
    length: float
    reflection_point: Optional[Vec2] = None


def fold_angle(beta: float) -> float:
    """Map a bearing to the ULA-observable half circle [0, pi)."""
    r = beta % math.pi
    # % can round up to the modulus itself for tiny negative inputs
    return 0.0 if r >= math.pi else r


def bearing(src: Vec2, dst: Vec2) -> float:
    """Bearing of dst as seen from src, from the negative y axis, folded.

    Equals atan(dy/dx) + pi/2 on (0, pi); the fold makes the sign of dx
    irrelevant, matching what a linear array can observe.
    """
    return fold_angle(math.atan2(dst.y - src.y, dst.x - src.x) + 0.5 * math.pi)


def step_kinematics(state: UEState, dt: float) -> UEState:
    """Advance constant-acceleration motion by dt seconds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p, v, a = state.position, state.velocity, state.acceleration
    pos = Vec2(p.x + dt * v.x + 0.5 * dt * dt * a.x,
               p.y + dt * v.y + 0.5 * dt * dt * a.y)
    vel = Vec2(v.x + dt * a.x, v.y + dt * a.y)
    return UEState(pos, vel, a)


def mirror_anchor(pa: Vec2, wall: Wall) -> Vec2:
    """Mirror image of pa across the infinite line through the wall."""
    dx, dy = wall.b.x - wall.a.x, wall.b.y - wall.a.y
    L2 = dx * dx + dy * dy
    t = ((pa.x - wall.a.x) * dx + (pa.y - wall.a.y) * dy) / L2
    foot = Vec2(wall.a.x + t * dx, wall.a.y + t * dy)
    return Vec2(2 * foot.x - pa.x, 2 * foot.y - pa.y)


def _seg_intersect(p: Vec2, q: Vec2, a: Vec2, b: Vec2) -> bool:
    """True if open segments p-q and a-b properly cross (1e-9 endpoint slack)."""
    rx, ry = q.x - p.x, q.y - p.y
    sx, sy = b.x - a.x, b.y - a.y
    denom = rx * sy - ry * sx
    if abs(denom) < 1e-15:
        return False  # parallel; grazing contact does not block
    t = ((a.x - p.x) * sy - (a.y - p.y) * sx) / denom
    u = ((a.x - p.x) * ry - (a.y - p.y) * rx) / denom
    # endpoint slack in parameter space, scaled by segment lengths
    tp = _EPS / max(math.hypot(rx, ry), _EPS)
    up = _EPS / max(math.hypot(sx, sy), _EPS)
    return (tp < t < 1 - tp) and (up < u < 1 - up)


def is_path_clear(a: Vec2, b: Vec2, walls: Sequence[Wall],
                  ignore: Optional[int] = None) -> bool:
    """True iff the open segment a->b crosses no wall other than `ignore`."""
    for i, w in enumerate(walls):
        if i == ignore:
            continue
        if _seg_intersect(a, b, w.a, w.b):
            return False
    return True


def reflection_point(va: Vec2, ue: Vec2, wall: Wall) -> Optional[Vec2]:
    """Intersection of segment VA->UE with the wall's supporting line.

    Returns None when the segment does not reach the line or the hit falls
    off the finite wall segment (1e-9 m slack).
    """
    rx, ry = ue.x - va.x, ue.y - va.y
    sx, sy = wall.b.x - wall.a.x, wall.b.y - wall.a.y
    denom = rx * sy - ry * sx
    if abs(denom) < 1e-15:
        return None
    t = ((wall.a.x - va.x) * sy - (wall.a.y - va.y) * sx) / denom
    if not (0.0 <= t <= 1.0):
        return None
    hit = Vec2(va.x + t * rx, va.y + t * ry)
    # must lie on the finite segment
    u = ((hit.x - wall.a.x) * sx + (hit.y - wall.a.y) * sy) / (sx * sx + sy * sy)
    wall_len = wall.a.dist(wall.b)
    slack = _EPS / wall_len
    if not (-slack <= u <= 1.0 + slack):
        return None
    return hit


def path_angles(anchor: Anchor, pa: Vec2, ue: Vec2,
                walls: Sequence[Wall]) -> Optional[PathGeometry]:
    """AoA/AoD and length for one anchor's path, or None if invalid.

    LoS: aoa = aod = folded bearing UE->PA, blocked by any wall.
    NLoS: single specular bounce off the generating wall; aoa is the folded
    bearing UE->VA (image source), aod the folded bearing PA->reflection
    point; both legs must be clear of every other wall.
    """
    if ue.dist(anchor.position) <= _EPS:
        raise ValueError("UE coincides with anchor")
    if anchor.kind == "PA":
        if not is_path_clear(pa, ue, walls):
            return None
        ang = bearing(ue, pa)
        if ang <= 0.0 or ang >= math.pi:
            return None  # path along the array axis is unobservable
        return PathGeometry(anchor_index=0, aoa=ang, aod=ang,
                            length=ue.dist(pa))

    wall = walls[anchor.wall_index]
    hit = reflection_point(anchor.position, ue, wall)
    if hit is None:
        return None
    if not is_path_clear(ue, hit, walls, ignore=anchor.wall_index):
        return None
    if not is_path_clear(pa, hit, walls, ignore=anchor.wall_index):
        return None
    aoa = bearing(ue, anchor.position)
    aod = bearing(pa, hit)
    if min(aoa, aod) <= 0.0 or max(aoa, aod) >= math.pi:
        return None
    return PathGeometry(anchor_index=anchor.wall_index + 1, aoa=aoa, aod=aod,
                        length=ue.dist(anchor.position), reflection_point=hit)
