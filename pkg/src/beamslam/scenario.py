"""Environments and trajectories: wall layouts, UE motion plans, and per-step
ground-truth path generation (geometry-derived angles + gains).

A scenario is a frozen spec (walls, BS, trajectory plan, radio parameters)
loadable from JSON. Ground truth per step comes from the image-source model:
the LoS path exists iff the direct segment is clear, and each wall contributes
at most one single-bounce path whose geometry validates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .channel import PathParams, path_gain
from .geometry import (Anchor, PathGeometry, UEState, Vec2, Wall,
                       is_path_clear, mirror_anchor, path_angles)

__all__ = [
    "WaypointPlan",
    "RandomWalkPlan",
    "BlockageEvent",
    "ScenarioSpec",
    "GroundTruthStep",
    "scenario_anchors",
    "trajectory_states",
    "random_walk_trajectory",
    "generate_truth",
    "load_scenario",
    "scenario_from_dict",
    "square_hall",
    "t_intersection",
]

_EPS = 1e-9
# seed-stream tags keeping gain magnitudes (static per run) and phases
# (redrawn per step) on independent substreams
_MAG_TAG = 11
_PHASE_TAG = 13
_WALK_TAG = 17


@dataclass(frozen=True)
class WaypointPlan:
    """Piecewise-linear path: constant speed along each leg."""
    waypoints: Tuple[Vec2, ...]
    speeds: Tuple[float, ...]

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ValueError("need at least two waypoints")
        if len(self.speeds) != len(self.waypoints) - 1:
            raise ValueError("one speed per leg")
        if any(s <= 0 for s in self.speeds):
            raise ValueError("leg speeds must be positive")


@dataclass(frozen=True)
class RandomWalkPlan:
    """Persistent-direction walk inside a rectangle, U(step) displacements."""
    bounds: Tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    n_steps: int
    seed: int
    step_bounds: Tuple[float, float] = (0.7, 0.9)
    start: Optional[Vec2] = None

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if xmax <= xmin or ymax <= ymin:
            raise ValueError("walk region is empty")
        lo, hi = self.step_bounds
        if not (0 < lo <= hi):
            raise ValueError("step-length bounds must satisfy 0 < lo <= hi")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


@dataclass(frozen=True)
class BlockageEvent:
    """Scripted obstruction: the listed path ids vanish for `duration` steps
    starting at `step`. Path id 0 is the LoS; id i+1 is wall i's bounce."""
    step: int
    duration: int
    paths: Tuple[int, ...]

    def __post_init__(self):
        if self.step < 0 or self.duration < 1:
            raise ValueError("event needs step >= 0 and duration >= 1")
        if not self.paths or any(p < 0 for p in self.paths):
            raise ValueError("event must block at least one valid path id")

    def active(self, step: int) -> bool:
        return self.step <= step < self.step + self.duration


def _point_on_wall(p: Vec2, wall: Wall) -> bool:
    ax, ay = wall.a.x, wall.a.y
    dx, dy = wall.b.x - ax, wall.b.y - ay
    t = ((p.x - ax) * dx + (p.y - ay) * dy) / (dx * dx + dy * dy)
    t = min(1.0, max(0.0, t))
    return p.dist(Vec2(ax + t * dx, ay + t * dy)) <= _EPS


@dataclass(frozen=True)
class ScenarioSpec:
    walls: Tuple[Wall, ...]
    bs: Vec2
    trajectory: Union[WaypointPlan, RandomWalkPlan]
    snr_db: float = 15.0
    dt: float = 1.0
    t_b: float = 1.0 / 16.0e3
    n_grid: int = 64
    arrays: Tuple[int, int] = (32, 32)  # (N_BS, N_UE)
    gain_model: str = "table"
    known_bs: bool = False
    events: Tuple[BlockageEvent, ...] = ()
    init_sweep_steps: int = 1

    def __post_init__(self):
        if self.dt <= 0 or self.t_b <= 0:
            raise ValueError("dt and t_b must be positive")
        if self.gain_model not in ("table", "freespace"):
            raise ValueError(f"unknown gain model {self.gain_model!r}")
        if len(self.arrays) != 2 or min(self.arrays) < 2:
            raise ValueError("arrays must hold two element counts >= 2")
        if self.n_grid < 2:
            raise ValueError("angular grid too small")
        if self.init_sweep_steps < 1:
            raise ValueError("init_sweep_steps must be >= 1")
        for w in self.walls:
            if _point_on_wall(self.bs, w):
                raise ValueError("BS sits on a wall")

    @property
    def n_steps(self) -> int:
        return len(trajectory_states(self))


@dataclass(frozen=True)
class GroundTruthStep:
    ue: UEState
    paths: Tuple[Tuple[PathGeometry, PathParams], ...]
    l_true: int

    def __post_init__(self):
        if self.l_true != len(self.paths):
            raise ValueError("l_true must equal the path count")


def scenario_anchors(spec: ScenarioSpec) -> List[Anchor]:
    """Physical anchor plus one virtual anchor per wall, in wall order."""
    out = [Anchor("PA", spec.bs)]
    out.extend(Anchor("VA", mirror_anchor(spec.bs, w), i)
               for i, w in enumerate(spec.walls))
    return out


def _states_from_positions(positions: Sequence[Vec2], dt: float
                           ) -> Tuple[UEState, ...]:
    """Attach finite-difference velocity/acceleration to a position list."""
    xy = np.array([[p.x, p.y] for p in positions])
    if len(xy) == 1:
        return (UEState(positions[0], Vec2(0, 0), Vec2(0, 0)),)
    vel = np.gradient(xy, dt, axis=0, edge_order=1)
    # second differences of position (not smoothed velocity gradients): this
    # is the acceleration a dead-reckoning predictor can integrate exactly
    # on constant-acceleration stretches
    acc = np.zeros_like(xy)
    if len(xy) >= 3:
        acc[1:-1] = (xy[2:] - 2.0 * xy[1:-1] + xy[:-2]) / dt**2
        acc[0], acc[-1] = acc[1], acc[-2]
    return tuple(UEState(p, Vec2(*v), Vec2(*a))
                 for p, v, a in zip(positions, vel, acc))


def _waypoint_positions(plan: WaypointPlan, dt: float) -> List[Vec2]:
    pos = [plan.waypoints[0]]
    for leg in range(len(plan.speeds)):
        target = plan.waypoints[leg + 1]
        step_len = plan.speeds[leg] * dt
        while pos[-1].dist(target) > _EPS:
            gap = pos[-1].dist(target)
            if gap <= step_len + _EPS:
                pos.append(target)  # clamp the arrival step
            else:
                d = (target - pos[-1]).scaled(step_len / gap)
                pos.append(pos[-1] + d)
    return pos


def random_walk_trajectory(bounds: Tuple[float, float, float, float],
                           n_steps: int, seed: int, *,
                           step_bounds: Tuple[float, float] = (0.7, 0.9),
                           start: Optional[Vec2] = None, dt: float = 1.0,
                           max_turn: float = 0.5 * math.pi,
                           walls: Sequence[Wall] = ()) -> List[UEState]:
    """Bounded-turn persistent walk; steps leaving the rectangle (or crossing
    a wall) are redrawn — first within the turn bound, then, if still stuck,
    from the full circle — and 100 consecutive rejections abort."""
    xmin, ymin, xmax, ymax = bounds
    if xmax <= xmin or ymax <= ymin:
        raise ValueError("walk region is empty")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([_WALK_TAG, seed]))
    here = start if start is not None else Vec2(0.5 * (xmin + xmax),
                                                0.5 * (ymin + ymax))
    if not (xmin <= here.x <= xmax and ymin <= here.y <= ymax):
        raise ValueError("start position outside the walk region")
    heading = rng.uniform(0.0, 2.0 * math.pi)
    positions = [here]
    for _ in range(n_steps - 1):
        rejects = 0
        while True:
            turn = (rng.uniform(-max_turn, max_turn) if rejects < 50
                    else rng.uniform(-math.pi, math.pi))
            cand_heading = heading + turn
            length = rng.uniform(*step_bounds)
            nxt = Vec2(here.x + length * math.cos(cand_heading),
                       here.y + length * math.sin(cand_heading))
            ok = (xmin <= nxt.x <= xmax and ymin <= nxt.y <= ymax
                  and is_path_clear(here, nxt, walls))
            if ok:
                break
            rejects += 1
            if rejects >= 100:
                raise ValueError("walk region too small: 100 rejected steps")
        heading, here = cand_heading, nxt
        positions.append(here)
    return list(_states_from_positions(positions, dt))


def _validate_positions(positions: Sequence[Vec2], spec: ScenarioSpec) -> None:
    for p in positions:
        for w in spec.walls:
            if _point_on_wall(p, w):
                raise ValueError("trajectory touches a wall")
    for a, b in zip(positions, positions[1:]):
        if not is_path_clear(a, b, spec.walls):
            raise ValueError("trajectory step crosses a wall")


@lru_cache(maxsize=32)
def trajectory_states(spec: ScenarioSpec) -> Tuple[UEState, ...]:
    plan = spec.trajectory
    if isinstance(plan, WaypointPlan):
        positions = _waypoint_positions(plan, spec.dt)
        states = _states_from_positions(positions, spec.dt)
    else:
        states = tuple(random_walk_trajectory(
            plan.bounds, plan.n_steps, plan.seed,
            step_bounds=plan.step_bounds, start=plan.start, dt=spec.dt,
            walls=spec.walls))
    _validate_positions([s.position for s in states], spec)
    return states


def _table_gain(geom: PathGeometry, anchor_idx: int, step: int,
                seed: int) -> complex:
    # magnitude: one draw per (run, anchor), held across steps — the anchors
    # are stationary; phase: fresh per step (path lengths drift sub-bin)
    mag_rng = np.random.default_rng(
        np.random.SeedSequence([seed, _MAG_TAG, anchor_idx]))
    mag = abs(path_gain(geom, "table", rng=mag_rng))
    ph_rng = np.random.default_rng(
        np.random.SeedSequence([seed, _PHASE_TAG, anchor_idx, step]))
    phase = ph_rng.uniform(0.0, 2.0 * math.pi)
    return mag * complex(math.cos(phase), math.sin(phase))


def generate_truth(spec: ScenarioSpec, step: int, seed: int = 0
                   ) -> GroundTruthStep:
    """Geometry-true paths at one trajectory step: LoS if clear, plus one
    validated single-bounce path per wall, minus scripted blockages."""
    states = trajectory_states(spec)
    if not 0 <= step < len(states):
        raise ValueError(f"step {step} outside trajectory [0, {len(states)})")
    ue = states[step]
    blocked = set()
    for ev in spec.events:
        if ev.active(step):
            blocked.update(ev.paths)
    paths = []
    for anchor in scenario_anchors(spec):
        geom = path_angles(anchor, spec.bs, ue.position, spec.walls)
        if geom is None or geom.anchor_index in blocked:
            continue
        if spec.gain_model == "table":
            g = _table_gain(geom, geom.anchor_index, step, seed)
        else:
            g = path_gain(geom, "freespace")
        paths.append((geom, PathParams(geom.aoa, geom.aod, g)))
    return GroundTruthStep(ue=ue, paths=tuple(paths), l_true=len(paths))


# ---------------------------------------------------------------------------
# JSON loading (strict: unknown fields rejected at every level)

def _vec(v, what: str) -> Vec2:
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ValueError(f"{what} must be an [x, y] pair")
    return Vec2(float(v[0]), float(v[1]))


def _check_keys(d: dict, allowed: set, what: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {what} fields: {sorted(unknown)}")


def _trajectory_from_dict(d: dict) -> Union[WaypointPlan, RandomWalkPlan]:
    _check_keys(d, {"waypoints", "speeds", "random_walk"}, "trajectory")
    if "random_walk" in d:
        if "waypoints" in d or "speeds" in d:
            raise ValueError("trajectory is either waypoints or random_walk")
        rw = d["random_walk"]
        _check_keys(rw, {"bounds", "n_steps", "seed", "step_bounds", "start"},
                    "random_walk")
        return RandomWalkPlan(
            bounds=tuple(float(x) for x in rw["bounds"]),
            n_steps=int(rw["n_steps"]), seed=int(rw["seed"]),
            step_bounds=tuple(float(x) for x in rw.get("step_bounds", (0.7, 0.9))),
            start=_vec(rw["start"], "start") if "start" in rw else None)
    return WaypointPlan(
        waypoints=tuple(_vec(w, "waypoint") for w in d["waypoints"]),
        speeds=tuple(float(s) for s in d["speeds"]))


def scenario_from_dict(d: dict) -> ScenarioSpec:
    _check_keys(d, {"walls", "bs", "trajectory", "snr_db", "dt", "t_b",
                    "n_grid", "arrays", "gain_model", "known_bs", "events",
                    "init_sweep_steps"}, "scenario")
    for req in ("walls", "bs", "trajectory"):
        if req not in d:
            raise ValueError(f"scenario is missing {req!r}")
    events = []
    for ev in d.get("events", []):
        _check_keys(ev, {"step", "duration", "paths"}, "event")
        events.append(BlockageEvent(step=int(ev["step"]),
                                    duration=int(ev["duration"]),
                                    paths=tuple(int(p) for p in ev["paths"])))
    kwargs = {}
    for key in ("snr_db", "dt", "t_b"):
        if key in d:
            kwargs[key] = float(d[key])
    for key in ("n_grid", "init_sweep_steps"):
        if key in d:
            kwargs[key] = int(d[key])
    if "arrays" in d:
        kwargs["arrays"] = tuple(int(x) for x in d["arrays"])
    if "gain_model" in d:
        kwargs["gain_model"] = str(d["gain_model"])
    if "known_bs" in d:
        kwargs["known_bs"] = bool(d["known_bs"])
    return ScenarioSpec(
        walls=tuple(Wall(_vec(w[0], "wall end"), _vec(w[1], "wall end"))
                    for w in d["walls"]),
        bs=_vec(d["bs"], "bs"),
        trajectory=_trajectory_from_dict(d["trajectory"]),
        events=tuple(events), **kwargs)


def load_scenario(path) -> ScenarioSpec:
    return scenario_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Presets

def square_hall(seed: int = 1, n_steps: int = 30, snr_db: float = 15.0,
                **overrides) -> ScenarioSpec:
    """Square hall, BS in the upper half, three reflecting walls
    (left/top/right): every interior position sees the LoS plus three
    single-bounce paths.  The BS sits 4 m clear of the top wall so its
    mirror image stays resolvable from the walk region, and the walk keeps
    south of the BS so no bearing degenerates at point-blank range."""
    half = 10.0
    walls = (
        Wall(Vec2(-half, -half), Vec2(-half, half)),   # left
        Wall(Vec2(-half, half), Vec2(half, half)),     # top
        Wall(Vec2(half, half), Vec2(half, -half)),     # right
    )
    walk = RandomWalkPlan(bounds=(-8.0, -8.0, 8.0, 4.0), n_steps=n_steps,
                          seed=seed, start=Vec2(-6.0, -4.0))
    defaults = dict(walls=walls, bs=Vec2(0.0, 6.0), trajectory=walk,
                    snr_db=snr_db, n_grid=256, known_bs=True,
                    init_sweep_steps=3)
    defaults.update(overrides)
    return ScenarioSpec(**defaults)


def t_intersection(speed: float = 0.8, snr_db: float = 15.0,
                   **overrides) -> ScenarioSpec:
    """T-shaped corridor, BS up the stem: the walk along the bar only sees
    paths near the junction, so the path count rises and then falls."""
    walls = (
        Wall(Vec2(-30.0, -2.0), Vec2(30.0, -2.0)),   # bar, bottom
        Wall(Vec2(-30.0, 2.0), Vec2(-2.0, 2.0)),     # bar, top-left
        Wall(Vec2(2.0, 2.0), Vec2(30.0, 2.0)),       # bar, top-right
        Wall(Vec2(-2.0, 2.0), Vec2(-2.0, 30.0)),     # stem, left
        Wall(Vec2(2.0, 2.0), Vec2(2.0, 30.0)),       # stem, right
    )
    plan = WaypointPlan(waypoints=(Vec2(-25.0, 0.0), Vec2(25.0, 0.0)),
                        speeds=(speed,))
    defaults = dict(walls=walls, bs=Vec2(0.0, 18.0), trajectory=plan,
                    snr_db=snr_db, known_bs=True)
    defaults.update(overrides)
    return ScenarioSpec(**defaults)
