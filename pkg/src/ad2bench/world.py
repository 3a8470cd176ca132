"""Closed-loop driving world: route geometry, ego dynamics, obstacles, infractions and leaderboard metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

PENALTY = {
    "ped_collision": 0.5,
    "vehicle_collision": 0.6,
    "static_collision": 0.65,
    "red_light": 0.7,
    "stop_sign": 0.8,
}
COLLISION_KIND = {"pedestrian": "ped_collision", "vehicle": "vehicle_collision", "static": "static_collision"}
OBSTACLE_HEIGHT = {"pedestrian": 1.8, "vehicle": 1.5, "static": 1.0}


class EpisodeAbort(RuntimeError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


# -- route ---------------------------------------------------------------------

@dataclass(frozen=True)
class SignalZone:
    stop_s: float
    # (start, end) seconds of red phases; green otherwise
    red_intervals: tuple[tuple[float, float], ...]

    def is_red(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.red_intervals)


@dataclass(frozen=True)
class StopZone:
    start_s: float
    length: float = 6.0
    required_stop: bool = True


class RouteSpec:
    """Lane centreline polyline plus traffic-control features placed by arc length."""

    def __init__(self, waypoints, lane_width: float = 3.5, signal_zones: Sequence[SignalZone] = (),
                 stop_zones: Sequence[StopZone] = (), route_id: str = "route", vehicle_width: float = 1.8):
        wp = np.asarray(waypoints, dtype=np.float64)
        if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 2:
            raise ValueError("route needs at least two (x, y) waypoints")
        seg = np.diff(wp, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lens <= 0):
            raise ValueError("consecutive waypoints must be distinct")
        if lane_width <= vehicle_width:
            raise ValueError(f"lane_width {lane_width} must exceed vehicle width {vehicle_width}")
        self.route_id = route_id
        self.waypoints = wp
        self.lane_width = float(lane_width)
        self.seg_vec = seg
        self.seg_len = lens
        self.seg_dir = seg / lens[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(lens)])
        self.total_length = float(math.fsum(lens))
        self.signal_zones = tuple(signal_zones)
        self.stop_zones = tuple(stop_zones)

    # geometry helpers
    def point_at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Centreline point and unit tangent at arc length s (clamped to the route)."""
        s = min(max(s, 0.0), self.total_length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.seg_len) - 1)
        u = (s - self.cum[i]) / self.seg_len[i]
        return self.waypoints[i] + u * self.seg_vec[i], self.seg_dir[i]

    def heading_at(self, s: float) -> float:
        _, d = self.point_at(s)
        return math.atan2(d[1], d[0])

    def project(self, x: float, y: float, s_lo: float | None = None, s_hi: float | None = None):
        """Nearest centreline point, optionally restricted to an arc-length window.

        Returns (s, signed_offset, distance). Offset is positive left of travel.
        """
        lo, hi = 0, len(self.seg_len)
        if s_lo is not None:
            lo = max(0, int(np.searchsorted(self.cum, s_lo, side="right") - 1))
        if s_hi is not None:
            hi = min(len(self.seg_len), int(np.searchsorted(self.cum, s_hi, side="right")))
        hi = max(hi, lo + 1)
        a = self.waypoints[lo:hi]
        d = self.seg_vec[lo:hi]
        L2 = self.seg_len[lo:hi] ** 2
        px, py = x - a[:, 0], y - a[:, 1]
        u = np.clip((px * d[:, 0] + py * d[:, 1]) / L2, 0.0, 1.0)
        qx, qy = px - u * d[:, 0], py - u * d[:, 1]
        dist2 = qx * qx + qy * qy
        k = int(np.argmin(dist2))
        dist = math.sqrt(dist2[k])
        i = lo + k
        cross = self.seg_dir[i, 0] * qy[k] - self.seg_dir[i, 1] * qx[k]
        sign = 1.0 if cross >= 0 else -1.0
        s = float(self.cum[i] + u[k] * self.seg_len[i])
        return s, sign * dist, dist

    def boundary(self, side: float) -> np.ndarray:
        """Polyline offset by side * lane_width / 2 (side=+1 left, -1 right)."""
        wp = self.waypoints
        n = np.zeros_like(wp)
        t = np.zeros_like(wp)
        t[:-1] += self.seg_dir
        t[1:] += self.seg_dir
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        n[:, 0], n[:, 1] = -t[:, 1], t[:, 0]
        return wp + side * 0.5 * self.lane_width * n

    def zone_polygon(self, s0: float, s1: float, half_width: float | None = None) -> np.ndarray:
        hw = 0.5 * self.lane_width if half_width is None else half_width
        p0, d0 = self.point_at(s0)
        p1, d1 = self.point_at(s1)
        n0 = np.array([-d0[1], d0[0]])
        n1 = np.array([-d1[1], d1[0]])
        return np.array([p0 + hw * n0, p1 + hw * n1, p1 - hw * n1, p0 - hw * n0])

    def stop_line(self, zone: SignalZone) -> tuple[np.ndarray, np.ndarray]:
        p, d = self.point_at(zone.stop_s)
        n = np.array([-d[1], d[0]])
        hw = 0.5 * self.lane_width
        return p + hw * n, p - hw * n


def build_route(segments, spacing: float = 1.0, start=(0.0, 0.0), heading: float = 0.0):
    """Waypoints from ("straight", length) and ("arc", radius, degrees) pieces; positive degrees turn left."""
    pts = [np.array(start, dtype=np.float64)]
    h = heading
    for seg in segments:
        if seg[0] == "straight":
            n = max(1, int(math.ceil(seg[1] / spacing)))
            step = seg[1] / n
            for _ in range(n):
                pts.append(pts[-1] + step * np.array([math.cos(h), math.sin(h)]))
        elif seg[0] == "arc":
            radius, deg = seg[1], seg[2]
            ang = math.radians(deg)
            arc = abs(ang) * radius
            n = max(1, int(math.ceil(arc / spacing)))
            side = 1.0 if ang > 0 else -1.0
            c = pts[-1] + side * radius * np.array([-math.sin(h), math.cos(h)])
            a0 = math.atan2(pts[-1][1] - c[1], pts[-1][0] - c[0])
            for k in range(1, n + 1):
                a = a0 + ang * k / n
                pts.append(c + radius * np.array([math.cos(a), math.sin(a)]))
            h += ang
        else:
            raise ValueError(f"unknown segment type {seg[0]!r}")
    return np.array(pts)


# -- ego / control -------------------------------------------------------------

@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.7
    length: float = 4.6
    width: float = 1.8
    a_max: float = 3.0
    b_max: float = 8.0
    c_drag: float = 0.05
    delta_max: float = math.radians(35.0)


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float
    wheelbase: float = 2.7

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")
        object.__setattr__(self, "heading", wrap_angle(self.heading))


@dataclass(frozen=True)
class Control:
    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def __post_init__(self):
        for name, lo in (("steer", -1.0), ("throttle", 0.0), ("brake", 0.0)):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"non-finite {name}: {v}")
            if not lo <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [{lo}, 1]")


def step_dynamics(s: EgoState, u: Control, dt: float, vp: VehicleParams = VehicleParams()) -> EgoState:
    """Kinematic bicycle update with linear drag; position uses the mid-step heading and mean speed."""
    if not 0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    vals = (s.x, s.y, s.heading, s.speed, u.steer, u.throttle, u.brake)
    if not all(math.isfinite(v) for v in vals):
        raise ArithmeticError(f"non-finite dynamics input {vals}")
    a = vp.a_max * u.throttle - vp.b_max * u.brake - vp.c_drag * s.speed
    v1 = max(0.0, s.speed + a * dt)
    yaw_rate = (s.speed / s.wheelbase) * math.tan(vp.delta_max * u.steer)
    h1 = s.heading + yaw_rate * dt
    v_mean = 0.5 * (s.speed + v1)
    h_mid = 0.5 * (s.heading + h1)
    return EgoState(s.x + v_mean * math.cos(h_mid) * dt, s.y + v_mean * math.sin(h_mid) * dt, h1, v1, s.wheelbase)


# -- metrics -------------------------------------------------------------------

def lane_deviation(s: EgoState, route: RouteSpec) -> float:
    return route.project(s.x, s.y)[1]


def route_completion(progress: float, route: RouteSpec) -> float:
    if not 0.0 <= progress <= route.total_length + 1e-9:
        raise ValueError(f"progress {progress} outside [0, {route.total_length}]")
    return 100.0 * min(progress, route.total_length) / route.total_length


@dataclass(frozen=True)
class InfractionRecord:
    kind: str
    timestep: int
    location: tuple[float, float]

    def __post_init__(self):
        if self.kind not in PENALTY:
            raise ValueError(f"unknown infraction kind {self.kind!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "timestep": self.timestep,
                "location": [round(self.location[0], 6), round(self.location[1], 6)]}


def infraction_penalty(infractions) -> float:
    """Product of per-instance coefficients. Accepts records, kind strings, or a {kind: count} mapping."""
    if isinstance(infractions, dict):
        counts = dict(infractions)
    else:
        counts = {}
        for rec in infractions:
            kind = rec.kind if isinstance(rec, InfractionRecord) else rec
            counts[kind] = counts.get(kind, 0) + 1
    unknown = sorted(k for k in counts if k not in PENALTY)
    if unknown:
        raise ValueError(f"unknown infraction kinds: {unknown}")
    p = 1.0
    # fixed kind order keeps the float product independent of input order
    for kind in PENALTY:
        p *= PENALTY[kind] ** counts.get(kind, 0)
    return p


def driving_score(R: float, P: float) -> float:
    if not 0.0 <= R <= 100.0:
        raise ValueError(f"R={R} outside [0, 100]")
    if not 0.0 < P <= 1.0:
        raise ValueError(f"P={P} outside (0, 1]")
    return R * P


# -- obstacles -----------------------------------------------------------------

@dataclass(frozen=True)
class Obstacle:
    kind: str
    pose: tuple[float, float, float]
    extent: tuple[float, float]
    # constant velocity (vx, vy) m/s, switched on once ego progress reaches trigger_s
    velocity: tuple[float, float] | None = None
    trigger_s: float = 0.0

    def __post_init__(self):
        if self.kind not in COLLISION_KIND:
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ValueError("obstacle extent must be positive")

    @property
    def height(self) -> float:
        return OBSTACLE_HEIGHT[self.kind]


def box_corners(x, y, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals."""
    for poly in (a, b):
        for i in range(4):
            e = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-e[1], e[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _point_in_convex(pt, poly) -> bool:
    sgn = 0
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        cr = (b[0] - a[0]) * (pt[1] - a[1]) - (b[1] - a[1]) * (pt[0] - a[0])
        if cr != 0:
            if sgn == 0:
                sgn = 1 if cr > 0 else -1
            elif (cr > 0) != (sgn > 0):
                return False
    return True


class World:
    """Mutable per-episode world state: time, triggered obstacles, infraction bookkeeping."""

    def __init__(self, route: RouteSpec, obstacles: Sequence[Obstacle] = (), vehicle: VehicleParams = VehicleParams()):
        self.route = route
        self.obstacles = tuple(obstacles)
        self.vehicle = vehicle
        self.time = 0.0
        self.step = 0
        self._trigger_time: list[float | None] = [None] * len(self.obstacles)
        self._in_contact = [False] * len(self.obstacles)
        self._in_stop_zone = [False] * len(route.stop_zones)
        self._zone_min_speed = [math.inf] * len(route.stop_zones)
        self._prev_pos: tuple[float, float] | None = None

    def obstacle_pose(self, i: int) -> tuple[float, float, float]:
        ob = self.obstacles[i]
        t0 = self._trigger_time[i]
        if ob.velocity is None or t0 is None:
            return ob.pose
        dt = self.time - t0
        return (ob.pose[0] + ob.velocity[0] * dt, ob.pose[1] + ob.velocity[1] * dt, ob.pose[2])

    def obstacle_states(self):
        return [(ob, self.obstacle_pose(i)) for i, ob in enumerate(self.obstacles)]

    def signal_states(self):
        return [(z, z.is_red(self.time)) for z in self.route.signal_zones]

    def update_triggers(self, progress: float) -> None:
        for i, ob in enumerate(self.obstacles):
            if self._trigger_time[i] is None and ob.velocity is not None and progress >= ob.trigger_s:
                self._trigger_time[i] = self.time

    def advance(self, dt: float) -> None:
        self.time += dt
        self.step += 1


def detect_infractions(world: World, ego: EgoState, dt: float | None = None) -> list[InfractionRecord]:
    """Infractions newly incurred at the world's current step.

    Collisions are debounced per obstacle contact episode; red lights fire when
    the ego centre crosses a stop line during red; stop signs fire on leaving a
    stop zone whose in-zone minimum speed stayed above 0.1 m/s.
    """
    out = []
    vp = world.vehicle
    loc = (ego.x, ego.y)
    ego_box = box_corners(ego.x, ego.y, ego.heading, vp.length, vp.width)
    for i, ob in enumerate(world.obstacles):
        px, py, ph = world.obstacle_pose(i)
        ob_box = box_corners(px, py, ph, ob.extent[0], ob.extent[1])
        touching = boxes_overlap(ego_box, ob_box)
        if touching and not world._in_contact[i]:
            out.append(InfractionRecord(COLLISION_KIND[ob.kind], world.step, loc))
        world._in_contact[i] = touching
    prev = world._prev_pos
    if prev is not None and prev != loc:
        for z in world.route.signal_zones:
            a, b = world.route.stop_line(z)
            if z.is_red(world.time) and _segments_cross(prev, loc, a, b):
                out.append(InfractionRecord("red_light", world.step, loc))
    for k, z in enumerate(world.route.stop_zones):
        poly = world.route.zone_polygon(z.start_s, z.start_s + z.length)
        inside = _point_in_convex(loc, poly)
        if inside:
            world._zone_min_speed[k] = min(world._zone_min_speed[k], ego.speed)
        elif world._in_stop_zone[k]:
            if z.required_stop and world._zone_min_speed[k] > 0.1:
                out.append(InfractionRecord("stop_sign", world.step, loc))
            world._zone_min_speed[k] = math.inf
        world._in_stop_zone[k] = inside
    world._prev_pos = loc
    return out


# -- episode -------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    blocked_timeout_s: float = 180.0
    timeout_s: float | None = None
    offroute_m: float = 30.0
    seed: int = 0
    init_offset: float = 0.0
    init_speed: float = 0.0

    def resolved_timeout(self, route: RouteSpec) -> float:
        return self.timeout_s if self.timeout_s is not None else 60.0 + route.total_length / 1.5


@dataclass
class EpisodeReport:
    R: float
    P: float
    DS: float
    ldev_trace: list[float]
    attacked_trace: list[bool]
    infractions: list[InfractionRecord]
    outside_lane_pct: float
    tests: dict[str, str]
    steps: int
    sim_time_s: float
    blocked_timeout_s: float
    timeout_s: float
    route_id: str
    attack: dict | None = None
    abort_reason: str | None = None

    @property
    def ldev_abs_mean(self) -> float:
        return float(np.mean(np.abs(self.ldev_trace))) if self.ldev_trace else 0.0

    @property
    def ldev_abs_std(self) -> float:
        return float(np.std(np.abs(self.ldev_trace))) if self.ldev_trace else 0.0

    def infraction_counts(self) -> dict[str, int]:
        counts = {k: 0 for k in PENALTY}
        for rec in self.infractions:
            counts[rec.kind] += 1
        return counts

    def to_json(self) -> dict:
        return {
            "route_id": self.route_id,
            "R": self.R,
            "P": self.P,
            "DS": self.DS,
            "ldev_abs_mean": round(self.ldev_abs_mean, 6),
            "ldev_abs_std": round(self.ldev_abs_std, 6),
            "outside_lane_pct": self.outside_lane_pct,
            "tests": dict(self.tests),
            "infraction_counts": self.infraction_counts(),
            "infractions": [r.to_json() for r in self.infractions],
            "steps": self.steps,
            "sim_time_s": round(self.sim_time_s, 6),
            "blocked_timeout_s": self.blocked_timeout_s,
            "timeout_s": self.timeout_s,
            "attack": self.attack,
            "abort_reason": self.abort_reason,
            "attacked_steps": int(sum(self.attacked_trace)),
            "ldev_trace": [round(v, 6) for v in self.ldev_trace],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    def ldev_csv(self, dt: float = 0.05) -> str:
        lines = ["step,t_seconds,ldev_m,attacked"]
        for i, (v, a) in enumerate(zip(self.ldev_trace, self.attacked_trace)):
            lines.append(f"{i},{i * dt:.6f},{v:.6f},{int(a)}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Observation:
    frames: tuple
    speed: float
    t: int
    # ground truth, only read by the oracle pilot
    world: World | None = None
    ego: EgoState | None = None
    progress: float = 0.0


class Agent(Protocol):
    needs_frames: bool

    def reset(self) -> None: ...

    def act(self, obs: Observation) -> Control: ...


def run_episode(route: RouteSpec, agent, attack=None, sim: SimConfig = SimConfig(),
                obstacles: Sequence[Obstacle] = (), rig=None, vehicle: VehicleParams = VehicleParams(),
                frame_sink: Callable | None = None) -> EpisodeReport:
    """Run one closed-loop episode and return its report.

    Per step: render the rig, attack if scheduled, query the agent, integrate
    the dynamics, then account progress, lane deviation and infractions.
    `frame_sink(step, frames, attacked)` receives the frames the agent saw.
    """
    from . import attacks as atk
    from .render import default_rig, render_rig

    rig = rig or default_rig()
    world = World(route, obstacles, vehicle)
    p0, d0 = route.point_at(0.0)
    n0 = np.array([-d0[1], d0[0]])
    start = p0 + sim.init_offset * n0
    ego = EgoState(float(start[0]), float(start[1]), math.atan2(d0[1], d0[0]), sim.init_speed, vehicle.wheelbase)
    agent.reset()
    timeout = sim.resolved_timeout(route)
    half_gap = 0.5 * route.lane_width - 0.5 * vehicle.width
    progress = 0.0
    ldev, attacked_trace, infractions = [], [], []
    tests = {"in_route": "Success", "blocked": "Success", "timeout": "Success"}
    stopped_for = 0.0
    driven = outside = 0.0
    abort = None
    needs_frames = getattr(agent, "needs_frames", True)
    step = 0
    while True:
        world.update_triggers(progress)
        frames, attacked = None, False
        if needs_frames or frame_sink is not None:
            frames = render_rig(world, ego, rig)
            if attack is not None:
                frames, attacked = atk.apply(frames, attack, step)
            if frame_sink is not None:
                frame_sink(step, frames, attacked)
        elif attack is not None:
            attacked = atk.is_attack_step(step, attack)
        obs = Observation(tuple(frames) if frames is not None else (), ego.speed, step, world, ego, progress)
        try:
            u = agent.act(obs)
        except (ValueError, ArithmeticError) as exc:
            abort = f"agent error at step {step}: {exc}"
            break
        if not isinstance(u, Control):
            abort = f"agent returned {type(u).__name__} at step {step}"
            break
        new = step_dynamics(ego, u, sim.dt, vehicle)
        seg = math.hypot(new.x - ego.x, new.y - ego.y)
        ego = new
        world.advance(sim.dt)
        s, off, _ = route.project(ego.x, ego.y, progress - 15.0, progress + 15.0)
        _, _, dist = route.project(ego.x, ego.y)
        ldev.append(off)
        attacked_trace.append(attacked)
        driven += seg
        if abs(off) > half_gap:
            outside += seg
        infractions.extend(detect_infractions(world, ego, sim.dt))
        step += 1
        if dist > sim.offroute_m:
            tests["in_route"] = "Failure"
            break
        progress = max(progress, s)
        if progress >= route.total_length - 1e-6:
            progress = route.total_length
            break
        stopped_for = stopped_for + sim.dt if ego.speed < 0.1 else 0.0
        if stopped_for > sim.blocked_timeout_s:
            tests["blocked"] = "Failure"
            break
        if world.time > timeout:
            tests["timeout"] = "Failure"
            break
    R = route_completion(progress, route)
    P = infraction_penalty(infractions)
    return EpisodeReport(
        R=R, P=P, DS=driving_score(R, P), ldev_trace=ldev, attacked_trace=attacked_trace,
        infractions=infractions, outside_lane_pct=100.0 * outside / driven if driven > 0 else 0.0,
        tests=tests, steps=step, sim_time_s=world.time, blocked_timeout_s=sim.blocked_timeout_s,
        timeout_s=timeout, route_id=route.route_id,
        attack=attack.to_json() if attack is not None else None, abort_reason=abort,
    )


# -- bundled routes --------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    route: RouteSpec
    obstacles: tuple[Obstacle, ...]


def bundled_scenario(family: str = "test", length: float = 300.0, variant: int = 0) -> Scenario:
    """Desk-scale route with two curves, one signal, one stop zone and four scripted obstacles.

    The "train" and "test" families use different procedural seeds so their
    geometry never coincides; `variant` selects further routes within a family
    (seed = base + 16 * variant keeps the two families' seeds apart).
    """
    seeds = {"train": 0xA, "test": 0xB}
    if family not in seeds:
        raise ValueError(f"unknown route family {family!r}")
    if variant < 0:
        raise ValueError(f"variant must be >= 0, got {variant}")
    seed = seeds[family] + 16 * variant
    rng = np.random.default_rng(seed)
    r1, r2 = rng.uniform(35.0, 50.0), rng.uniform(35.0, 50.0)
    a1 = float(rng.choice([-1, 1]) * rng.uniform(60.0, 90.0))
    a2 = float(-np.sign(a1) * rng.uniform(60.0, 90.0))
    arc1, arc2 = abs(math.radians(a1)) * r1, abs(math.radians(a2)) * r2
    scale = length / 300.0
    s1 = 50.0 * scale
    s2 = 70.0 * scale
    s3 = length - s1 - s2 - arc1 - arc2
    if s3 < 20.0:
        raise ValueError(f"route length {length} too short for two curves")
    wp = build_route([("straight", s1), ("arc", r1, a1), ("straight", s2), ("arc", r2, a2), ("straight", s3)])
    c2_end = s1 + arc1 + s2 + arc2
    sig_s = s1 + arc1 + 0.6 * s2
    stop_s = c2_end + 0.5 * s3
    # red until a few seconds after a nominal arrival, green afterwards
    signal = SignalZone(sig_s, ((0.0, sig_s / 6.0 + 6.0),))
    route = RouteSpec(wp, lane_width=3.5, signal_zones=[signal], stop_zones=[StopZone(stop_s)],
                      route_id=f"{family}-{seed:X}")

    def lateral(s, off):
        p, d = route.point_at(s)
        return p + off * np.array([-d[1], d[0]]), math.atan2(d[1], d[0])

    obstacles = []
    # pedestrian crossing left to right, released when ego is 25 m away
    ped_s = 0.5 * s1 + 0.5 * (s1 + arc1) if family == "train" else s1 * 0.7
    (px, py), h = lateral(ped_s, 4.5)
    speed = 1.4
    obstacles.append(Obstacle("pedestrian", (px, py, h), (0.5, 0.5),
                              velocity=(speed * math.sin(h), -speed * math.cos(h)), trigger_s=ped_s - 25.0))
    # parked vehicles on the right shoulder
    for s in (s1 + arc1 + 0.3 * s2, c2_end + 0.2 * s3):
        (vx, vy), h = lateral(s, -3.6)
        obstacles.append(Obstacle("vehicle", (vx, vy, h), (4.5, 1.8)))
    # barrier on the outside of the second curve
    (bx, by), h = lateral(s1 + arc1 + s2 + 0.5 * arc2, float(np.sign(a2)) * -3.0)
    obstacles.append(Obstacle("static", (bx, by, h), (0.6, 0.6)))
    return Scenario(route, tuple(obstacles))
