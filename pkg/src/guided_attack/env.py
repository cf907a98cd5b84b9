"""Deterministic micro-traffic simulator with two scenarios.

``left_turn``: the ego drives north, then turns left across a southbound
oncoming lane at an unsignalized intersection.
``merge``: the ego drives up an on-ramp and joins an eastbound main road.

Background traffic enters at the head of each source lane. It follows a
TTC-braking car-following rule and may yield at the conflict point. The ego
only controls its longitudinal acceleration and follows its route polyline.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError

SCENARIOS = ("left_turn", "merge")

VEHICLE_LENGTH = 5.0
VEHICLE_WIDTH = 2.0
LANE_WIDTH = 3.5
N_REGIONS = 6
REGIONS = ("front", "rear", "front_left", "rear_left", "front_right", "rear_right")
OBS_DIM = 2 + 4 * N_REGIONS
EMPTY_SLOT = (1.0, 0.0, 0.0, 0.0)

WARMUP_STEPS = 10
COLLISION_SUBSTEPS = 10
SPAWN_CLEARANCE = 10.0  # entry counts as occupied if a vehicle is this close to it
SPAWN_SPEED_FRAC = 0.6
CRUISE_SPEED_FRAC = 0.8
BACKGROUND_ACCEL = 2.6
TTC_BRAKE = 2.0
MIN_GAP = 1.0
YIELD_PROB = 0.5
YIELD_TRIGGER = 20.0  # ego within this distance of the conflict point triggers yielding
YIELD_CLEAR = 7.0  # ego this far past the conflict point releases yielding vehicles
STOP_OFFSET = 8.0  # yielding vehicles stop this far before the conflict point
BLOCK_HALF_ZONE = 4.0  # half extent of the ego footprint along a blocked lane
ZONE_HALF = 6.5  # a crossing vehicle this close to its conflict point is inside the zone
GAP_ACCEPT = 4.0  # seconds of clear crossing traffic a queued vehicle needs before it goes
FEEDER_WARMUP_STEPS = 7  # warm-up steps that may spawn traffic ahead of the ego
FEEDER_START_CLEARANCE = 12.0


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "left_turn"
    spawn_prob: float = 0.5
    dt: float = 1.0
    max_steps: int = 30
    v_max: float = 15.0
    accel_range: tuple[float, float] = (-7.6, 7.6)
    sensing_radius: float = 200.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "accel_range", tuple(float(a) for a in self.accel_range))
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if not 0.0 <= self.spawn_prob <= 1.0:
            raise ConfigError("spawn_prob must lie in [0, 1]")
        if self.dt <= 0 or self.max_steps < 1 or self.v_max <= 0 or self.sensing_radius <= 0:
            raise ConfigError("dt, v_max, sensing_radius must be positive and max_steps >= 1")
        lo, hi = self.accel_range
        if not (lo < 0 < hi and math.isclose(-lo, hi)):
            raise ConfigError(f"accel_range must be symmetric about 0, got {self.accel_range}")

    @property
    def accel_max(self) -> float:
        return self.accel_range[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accel_range"] = list(self.accel_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(**d)


class Route:
    """Polyline parameterised by arc length."""

    def __init__(self, name: str, points):
        self.name = name
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_heading = np.arctan2(seg[:, 1], seg[:, 0])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])

    def pose(self, s: float) -> tuple[float, float, float]:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self.seg_len) - 1)
        t = (s - self.cum[i]) / self.seg_len[i]
        p0, p1 = self.points[i], self.points[i + 1]
        return (float(p0[0] + t * (p1[0] - p0[0])), float(p0[1] + t * (p1[1] - p0[1])),
                float(self.seg_heading[i]))


def _arc(center, radius, a0, a1, n=24):
    angles = np.linspace(a0, a1, n + 1)
    return [(center[0] + radius * math.cos(a), center[1] + radius * math.sin(a)) for a in angles]


@dataclass(frozen=True, eq=False)
class Layout:
    ego_route: Route
    sources: tuple[Route, ...]
    # (source route name, conflict arc length on that route)
    source_conflict: dict
    ego_conflict: float
    # ego arc-length window in which its footprint overlaps the source lanes
    ego_occupancy: tuple[float, float] = (0.0, 0.0)
    # merge only: ego arc length at the merge point and the main-road arc length it maps to
    shared_from: float | None = None
    shared_offset: float | None = None


def _occupancy(ego: Route, source: Route, conflict: float) -> tuple[float, float]:
    """Ego arc lengths over which it overlaps a vehicle sitting near the conflict point."""
    hits = []
    for s in np.arange(0.0, ego.length, 0.25):
        ex, ey, eh = ego.pose(s)
        for off in np.arange(-6.0, 6.01, 0.5):
            bx, by, bh = source.pose(conflict + off)
            if _rects_overlap(ex, ey, eh, bx, by, bh):
                hits.append(s)
                break
    return (min(hits), max(hits)) if hits else (0.0, 0.0)


@lru_cache(maxsize=None)
def build_layout(scenario: str) -> Layout:
    layout = _build_layout(scenario)
    occ = _occupancy(layout.ego_route, layout.sources[0],
                     layout.source_conflict[layout.sources[0].name])
    return replace(layout, ego_occupancy=occ)


def _build_layout(scenario: str) -> Layout:
    if scenario == "left_turn":
        ego = Route("ego_left_turn",
                    [(2.0, -62.0), (2.0, -8.0)] + _arc((-8.0, -8.0), 10.0, 0.0, math.pi / 2)[1:]
                    + [(-40.0, 2.0)])
        oncoming = Route("southbound", [(-2.0, 150.0), (-2.0, -100.0)])
        # The turning arc crosses x = -2 at (-2, 0): 54 m straight plus 10 * atan2(8, 6) of arc.
        ego_conflict = 54.0 + 10.0 * math.atan2(8.0, 6.0)
        return Layout(ego, (oncoming,), {"southbound": 150.0}, ego_conflict)
    ang = math.radians(12.0)
    ramp_len = 60.0
    ego = Route("ego_merge", [(-ramp_len * math.cos(ang), -ramp_len * math.sin(ang)), (0.0, 0.0),
                              (60.0, 0.0)])
    main = Route("eastbound", [(-150.0, 0.0), (150.0, 0.0)])
    return Layout(ego, (main,), {"eastbound": 150.0}, ramp_len, shared_from=ramp_len,
                  shared_offset=150.0 - ramp_len)


@dataclass
class VehicleState:
    id: int
    route: str
    s: float
    speed: float
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH
    is_ego: bool = False
    yields: bool = False

    def snapshot(self) -> dict:
        return {"id": self.id, "route": self.route, "x": self.x, "y": self.y,
                "speed": self.speed, "heading": self.heading}


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    collision: bool
    goal_reached: bool
    ego_speed: float
    applied_accel: float = 0.0


def victim_reward(v_t: float, collision: bool, config: ScenarioConfig) -> float:
    return v_t / config.v_max - (1.0 if collision else 0.0)


def _wrap(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def encode_observation(ego: VehicleState, others, v_max: float, sensing_radius: float,
                       lane_width: float = LANE_WIDTH) -> np.ndarray:
    obs = np.empty(OBS_DIM)
    obs[0] = ego.speed / v_max
    obs[1] = _wrap(ego.heading) / math.pi
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    best: list[tuple | None] = [None] * N_REGIONS
    for v in others:
        dx, dy = v.x - ego.x, v.y - ego.y
        dist = math.hypot(dx, dy)
        if dist > sensing_radius:
            continue
        lon = dx * c + dy * s
        lat = -dx * s + dy * c
        if abs(lat) < lane_width:
            region = 0 if lon >= 0.0 else 1
        elif lat > 0.0:
            region = 2 if lon >= 0.0 else 3
        else:
            region = 4 if lon >= 0.0 else 5
        key = (dist, v.id)
        cur = best[region]
        if cur is None or key < cur[0]:
            best[region] = (key, dist, math.atan2(lat, lon), v)
    for r, entry in enumerate(best):
        base = 2 + 4 * r
        if entry is None:
            obs[base:base + 4] = EMPTY_SLOT
            continue
        _, dist, bearing, v = entry
        obs[base] = dist / sensing_radius
        obs[base + 1] = bearing / math.pi
        obs[base + 2] = min(v.speed / v_max, 1.0)
        obs[base + 3] = _wrap(v.heading - ego.heading) / math.pi
    return obs


def _rects_overlap(ax, ay, ah, bx, by, bh, length=VEHICLE_LENGTH, width=VEHICLE_WIDTH) -> bool:
    hl, hw = 0.5 * length, 0.5 * width
    dx, dy = bx - ax, by - ay
    ca, sa, cb, sb = math.cos(ah), math.sin(ah), math.cos(bh), math.sin(bh)
    for nx, ny in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        ra = hl * abs(ca * nx + sa * ny) + hw * abs(-sa * nx + ca * ny)
        rb = hl * abs(cb * nx + sb * ny) + hw * abs(-sb * nx + cb * ny)
        if abs(dx * nx + dy * ny) >= ra + rb:
            return False
    return True


def rectangles_overlap(a: VehicleState, b: VehicleState) -> bool:
    return _rects_overlap(a.x, a.y, a.heading, b.x, b.y, b.heading)


@dataclass
class World:
    config: ScenarioConfig
    layout: Layout
    routes: dict
    ego: VehicleState | None = None
    vehicles: list = field(default_factory=list)
    next_id: int = 1
    t: int = 0
    spawned: int = 0
    spawn_eligible: int = 0

    def place(self, v: VehicleState) -> None:
        v.x, v.y, v.heading = self.routes[v.route].pose(v.s)


def make_world(config: ScenarioConfig) -> World:
    layout = build_layout(config.scenario)
    routes = {r.name: r for r in (layout.ego_route,) + layout.sources}
    return World(config, layout, routes)


def _turners(world: World):
    """Vehicles on the ego's route, the ego included, that must cross or merge."""
    name = world.layout.ego_route.name
    out = [v for v in world.vehicles if v.route == name]
    if world.ego is not None:
        out.append(world.ego)
    return out


def _yield_active(world: World, c: VehicleState, turners) -> bool:
    lay = world.layout
    if not c.yields or c.s > lay.source_conflict[c.route] - STOP_OFFSET:
        return False
    return any(-YIELD_CLEAR <= lay.ego_conflict - t.s <= YIELD_TRIGGER for t in turners)


def _gap_clear(world: World, turners) -> bool:
    """True when no crossing vehicle will reach the conflict zone soon."""
    lay = world.layout
    for c in world.vehicles:
        if c.route == lay.ego_route.name:
            continue
        conflict = lay.source_conflict[c.route]
        if c.s > conflict + ZONE_HALF:
            continue
        if c.s >= conflict - ZONE_HALF:
            return False
        if _yield_active(world, c, turners):
            continue
        if (conflict - ZONE_HALF - c.s) / max(c.speed, 0.1) < GAP_ACCEPT:
            return False
    return True


def _background_accel(world: World, v: VehicleState, leaders: dict, turners,
                      gap_clear: bool) -> tuple[float, float]:
    """Acceleration and max allowed advance for one background vehicle."""
    cfg = world.config
    lay = world.layout
    gap, lead_speed = leaders.get(v.id, (math.inf, 0.0))
    lo, hi = lay.ego_occupancy
    if v.route == lay.ego_route.name:
        # queued ahead of the ego: hold at the stop line until the crossing is clear
        stop_s = lo - 1.0
        if v.s <= stop_s and not gap_clear:
            stop_gap = stop_s - v.s
            if stop_gap < gap:
                gap, lead_speed = stop_gap, 0.0
    else:
        conflict = lay.source_conflict[v.route]
        if any(lo - t.speed * cfg.dt <= t.s <= hi for t in turners):
            # a turner in the zone, or about to enter it, blocks this lane:
            # vehicles not yet in the zone brake for it
            block_gap = conflict - BLOCK_HALF_ZONE - (v.s + 0.5 * v.length)
            if 0.0 <= block_gap < gap:
                gap, lead_speed = block_gap, 0.0
        if _yield_active(world, v, turners):
            stop_gap = conflict - STOP_OFFSET - v.s
            if stop_gap < gap:
                gap, lead_speed = stop_gap, 0.0
    closing = v.speed - lead_speed
    ttc = gap / closing if closing > 1e-9 else math.inf
    if ttc < TTC_BRAKE or gap < MIN_GAP:
        a = cfg.accel_range[0]
    else:
        a = min(BACKGROUND_ACCEL, (CRUISE_SPEED_FRAC * cfg.v_max - v.speed) / cfg.dt)
        a = max(a, cfg.accel_range[0])
    return a, max(gap - MIN_GAP, 0.0) if math.isfinite(gap) else math.inf


def _leaders(world: World) -> dict:
    """Gap (bumper to bumper) and speed of each background vehicle's leader.

    In the merge layout vehicles past the merge point also belong to the
    main-road lane, so a vehicle may have leaders in two lanes; the nearer wins.
    """
    lay = world.layout
    lanes: dict[str, list] = {}
    everyone = list(world.vehicles) + ([world.ego] if world.ego is not None else [])
    for v in everyone:
        lanes.setdefault(v.route, []).append((v.s, v))
        if lay.shared_from is not None and v.route == lay.ego_route.name and v.s >= lay.shared_from:
            lanes.setdefault(lay.sources[0].name, []).append((v.s + lay.shared_offset, v))
    out = {}
    for items in lanes.values():
        items.sort(key=lambda p: (p[0], p[1].id))
        for (s_f, f), (s_l, lead) in zip(items[:-1], items[1:]):
            if f.is_ego:
                continue
            gap = s_l - s_f - 0.5 * (f.length + lead.length)
            if f.id not in out or gap < out[f.id][0]:
                out[f.id] = (gap, lead.speed)
    return out


def step_background(world: World, rng: np.random.Generator) -> list:
    """Advance background traffic one step; returns (vehicle, s_before) pairs."""
    cfg = world.config
    leaders = _leaders(world)
    turners = _turners(world)
    gap_clear = _gap_clear(world, turners)
    moves = []
    updates = []
    for v in world.vehicles:
        a, max_adv = _background_accel(world, v, leaders, turners, gap_clear)
        speed = min(max(v.speed + a * cfg.dt, 0.0), cfg.v_max)
        updates.append((v, speed, min(speed * cfg.dt, max_adv)))
    for v, speed, adv in updates:
        moves.append((v, v.s))
        v.speed = speed
        v.s += adv
        world.place(v)
    return moves


def spawn_background(world: World, rng: np.random.Generator, routes=None) -> World:
    cfg = world.config
    for route in world.layout.sources if routes is None else routes:
        u = rng.random()
        occupied = any(v.route == route.name and v.s - 0.5 * v.length < SPAWN_CLEARANCE
                       for v in world.vehicles)
        if occupied:
            continue
        world.spawn_eligible += 1
        if u < cfg.spawn_prob:
            v = VehicleState(world.next_id, route.name, 0.0, SPAWN_SPEED_FRAC * cfg.v_max,
                             yields=bool(rng.random() < YIELD_PROB))
            world.place(v)
            world.vehicles.append(v)
            world.next_id += 1
            world.spawned += 1
    return world


def _remove_exited(world: World) -> None:
    world.vehicles = [v for v in world.vehicles if v.s < world.routes[v.route].length]


class TrafficEnv:
    """One independently seeded episode runner."""

    def __init__(self, config: ScenarioConfig, record: bool = False):
        self.config = config
        self.record = record
        self.trajectory: list[dict] = []
        self.world: World | None = None
        self.rng: np.random.Generator | None = None
        self.done = True
        self.t = 0

    def reset(self, episode_seed: int) -> np.ndarray:
        cfg = self.config
        self.rng = np.random.default_rng([cfg.seed, int(episode_seed)])
        world = make_world(cfg)
        lay = world.layout
        for k in range(WARMUP_STEPS):
            step_background(world, self.rng)
            _remove_exited(world)
            # traffic queued ahead of the ego only enters before the ego does
            routes = lay.sources + (lay.ego_route,) if k < FEEDER_WARMUP_STEPS else lay.sources
            spawn_background(world, self.rng, routes)
        world.vehicles = [v for v in world.vehicles
                          if v.route != lay.ego_route.name or v.s >= FEEDER_START_CLEARANCE]
        speed = float(self.rng.uniform(0.3, 0.7)) * cfg.v_max
        world.ego = VehicleState(0, world.layout.ego_route.name, 0.0, speed, is_ego=True)
        world.place(world.ego)
        self.world = world
        self.done = False
        self.t = 0
        self.trajectory = []
        return self.observe()

    def observe(self) -> np.ndarray:
        w = self.world
        return encode_observation(w.ego, w.vehicles, self.config.v_max, self.config.sensing_radius)

    def step(self, action, perturbed: bool = False) -> StepResult:
        if self.done:
            raise UsageError("step() called on a finished episode; call reset() first")
        cfg = self.config
        w = self.world
        a = float(np.clip(float(np.asarray(action).reshape(-1)[0]), *cfg.accel_range))
        ego = w.ego
        ego_s0 = ego.s
        ego.speed = min(max(ego.speed + a * cfg.dt, 0.0), cfg.v_max)
        ego.s = ego.s + ego.speed * cfg.dt
        moves = step_background(w, self.rng)
        collision = self._swept_collision(ego_s0, moves)
        w.place(ego)
        _remove_exited(w)
        spawn_background(w, self.rng)
        self.t += 1
        goal = (not collision) and ego.s >= w.layout.ego_route.length
        done = collision or goal or self.t >= cfg.max_steps
        self.done = done
        reward = victim_reward(ego.speed, collision, cfg)
        obs = self.observe()
        if self.record:
            self.trajectory.append({
                "t": self.t, "ego": ego.snapshot(),
                "neighbors": [v.snapshot() for v in w.vehicles
                              if math.hypot(v.x - ego.x, v.y - ego.y) <= cfg.sensing_radius],
                "action": a, "perturbed": bool(perturbed), "reward": reward, "done": done,
            })
        return StepResult(obs, reward, done, collision, goal, ego.speed, a)

    def _swept_collision(self, ego_s0: float, moves) -> bool:
        ego_route = self.world.routes[self.world.ego.route]
        ego_s1 = self.world.ego.s
        for k in range(1, COLLISION_SUBSTEPS + 1):
            f = k / COLLISION_SUBSTEPS
            ex, ey, eh = ego_route.pose(ego_s0 + f * (ego_s1 - ego_s0))
            for v, s0 in moves:
                bx, by, bh = self.world.routes[v.route].pose(s0 + f * (v.s - s0))
                if abs(bx - ex) > 8.0 or abs(by - ey) > 8.0:
                    continue
                if _rects_overlap(ex, ey, eh, bx, by, bh):
                    return True
        return False


def write_trajectory(path, records) -> None:
    with open(Path(path), "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def with_scenario(config: ScenarioConfig, **kw) -> ScenarioConfig:
    return replace(config, **kw)
