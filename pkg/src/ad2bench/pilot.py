"""Camera-driven reference pilot and a ground-truth oracle pilot."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .render import SIGNAL_HEIGHT, CameraSpec
from .world import Control, Observation, World


@dataclass(frozen=True)
class PilotConfig:
    target_speed: float = 6.0
    kp: float = 0.35
    kd: float = 1.2
    speed_gain: float = 0.5
    brake_threshold: float = 0.5
    # obstacle distances (m from camera) mapped to proximity 0 and 1
    proximity_far: float = 14.0
    proximity_near: float = 6.0
    corridor_half: float = 1.6
    marking_min_r: int = 180
    marking_min_g: int = 150
    hold_steps: int = 5
    # camera distance to keep from a red signal's stop line (disc must stay in view)
    signal_margin: float = 6.0
    stop_release_s: float = 3.0

    def __post_init__(self):
        if self.target_speed <= 0:
            raise ValueError("target_speed must be positive")
        if min(self.kp, self.kd, self.speed_gain) < 0:
            raise ValueError("gains must be non-negative")


@dataclass(frozen=True)
class Percepts:
    lane_offset_est: float = 0.0
    heading_err_est: float = 0.0
    obstacle_ahead: bool = False
    obstacle_proximity: float = 0.0
    degraded: bool = False
    red_signal_dist: float | None = None
    stop_zone_far_dist: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.obstacle_proximity <= 1.0:
            raise ValueError(f"obstacle_proximity {self.obstacle_proximity} outside [0, 1]")


def _masks(img: np.ndarray, cfg: PilotConfig):
    r = img[..., 0].astype(np.int16)
    g = img[..., 1].astype(np.int16)
    b = img[..., 2].astype(np.int16)
    marking = (r >= cfg.marking_min_r) & (g >= cfg.marking_min_g)
    magenta = (r > 200) & (b > 200) & (g < 80)
    blue = (b > 160) & (r < 90) & (g < 120)
    orange = (r > 200) & (g > 60) & (g < 160) & (b < 60)
    red = (r > 200) & (g < 60) & (b < 60)
    band = (r > 120) & (r < 180) & (g < 60) & (b < 60)
    return marking, magenta | blue | orange, red, band


def perceive(frames, cfg: PilotConfig = PilotConfig(), cam: CameraSpec = CameraSpec()) -> Percepts:
    """Percepts from the centre frame of a [left, centre, right] triple."""
    img = frames[1].data if len(frames) == 3 else frames[0].data
    H, W = img.shape[:2]
    f = 0.5 * W / math.tan(0.5 * cam.hfov)
    cx, cy, h = 0.5 * W, 0.5 * H, cam.mount_offset[2]
    marking, obstacle, red, band = _masks(img, cfg)
    cols = np.arange(W) + 0.5

    # lane centre per row in the lower third, from the outer edges of the two boundaries
    zs, centres = [], []
    for v in range(H - H // 3, H):
        c = np.nonzero(marking[v])[0]
        if len(c) < 2:
            continue
        z = h * f / (v + 0.5 - cy)
        lat = (cols[c] - cx) * z / f
        if lat.max() - lat.min() > 2.0:
            zs.append(z)
            centres.append(0.5 * (lat.max() + lat.min()))
    degraded = len(zs) < 3
    if degraded:
        a = b = 0.0
    else:
        b, a = np.polyfit(np.array(zs), np.array(centres), 1)
    # ego centre sits mount_offset[0] behind the camera
    offset = float(a - b * cam.mount_offset[0])
    heading_err = float(math.atan(b))

    # obstacles: ground-contact row per column gives distance; keep those inside the lane corridor
    nearest = math.inf
    below = obstacle.copy()
    below[: int(cy)] = False
    any_col = below.any(axis=0)
    if any_col.any():
        last = H - 1 - np.argmax(below[::-1], axis=0)
        for c in np.nonzero(any_col)[0]:
            z = h * f / (last[c] + 0.5 - cy)
            lat = (cols[c] - cx) * z / f
            centre = 0.0 if degraded else a + b * z
            if abs(lat - centre) < cfg.corridor_half:
                nearest = min(nearest, z)
    prox = 0.0
    if math.isfinite(nearest):
        prox = (cfg.proximity_far - nearest) / (cfg.proximity_far - cfg.proximity_near)
        prox = float(min(1.0, max(0.0, prox)))

    red_dist = None
    red_up = red.copy()
    red_up[int(cy):] = False
    if red_up.any():
        rows = np.nonzero(red_up.any(axis=1))[0]
        vc = 0.5 * (rows.min() + rows.max()) + 0.5
        if vc < cy:
            red_dist = (SIGNAL_HEIGHT - h) * f / (cy - vc)

    stop_far = None
    band_low = band.copy()
    band_low[: int(cy)] = False
    if band_low.sum() >= 3:
        top = int(np.nonzero(band_low.any(axis=1))[0].min())
        stop_far = h * f / (top + 0.5 - cy)

    return Percepts(offset, heading_err, bool(prox > 0.0), prox, degraded, red_dist, stop_far)


def _stop_brake(speed: float, dist: float, b_max: float = 8.0) -> float:
    """Brake fraction that stops the vehicle within `dist` metres."""
    if dist <= 0.3:
        return 1.0
    need = speed * speed / (2.0 * dist)
    if need < 0.3 * b_max:
        return 0.0
    return min(1.0, 1.2 * need / b_max)


def act(p: Percepts, speed: float, cfg: PilotConfig = PilotConfig(), extra_brake: float = 0.0) -> Control:
    vals = (p.lane_offset_est, p.heading_err_est, p.obstacle_proximity, speed, extra_brake)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite percepts {vals}")
    steer = min(1.0, max(-1.0, -cfg.kp * p.lane_offset_est - cfg.kd * p.heading_err_est))
    brake = 1.0 if p.obstacle_proximity > cfg.brake_threshold else 0.0
    brake = max(brake, min(1.0, max(0.0, extra_brake)))
    throttle = 0.0
    if brake == 0.0:
        throttle = min(1.0, max(0.0, cfg.speed_gain * (cfg.target_speed - speed)))
    return Control(float(steer), float(throttle), float(brake))


class ReferencePilot:
    """Colour-threshold perception plus PD steering; the only input is the camera rig and the speedometer."""

    needs_frames = True

    def __init__(self, cfg: PilotConfig = PilotConfig(), dt: float = 0.05):
        self.cfg = cfg
        self.dt = dt
        self.reset()

    def reset(self) -> None:
        self._last_steer = 0.0
        self._degraded_for = 0
        self._stop_release = 0.0

    def act(self, obs: Observation) -> Control:
        p = perceive(obs.frames, self.cfg)
        extra = 0.0
        if p.red_signal_dist is not None:
            extra = _stop_brake(obs.speed, p.red_signal_dist - self.cfg.signal_margin)
        if self._stop_release > 0.0:
            self._stop_release -= self.dt
        elif p.stop_zone_far_dist is not None:
            if obs.speed < 0.05 and p.stop_zone_far_dist < 6.0:
                self._stop_release = self.cfg.stop_release_s
            else:
                extra = max(extra, _stop_brake(obs.speed, p.stop_zone_far_dist - 3.0))
        u = act(p, obs.speed, self.cfg, extra)
        if p.degraded:
            self._degraded_for += 1
            steer = self._last_steer if self._degraded_for <= self.cfg.hold_steps else 0.5 * self._last_steer
            u = Control(steer, u.throttle, u.brake)
        else:
            self._degraded_for = 0
        self._last_steer = u.steer
        return u


class OraclePilot:
    """Same control law fed with ground-truth state instead of camera percepts."""

    needs_frames = False

    def __init__(self, cfg: PilotConfig = PilotConfig(), dt: float = 0.05):
        self.cfg = cfg
        self.dt = dt
        self.reset()

    def reset(self) -> None:
        self._stopped_zone: set[int] = set()

    def act(self, obs: Observation) -> Control:
        world: World = obs.world
        ego = obs.ego
        route = world.route
        s, off, _ = route.project(ego.x, ego.y, obs.progress - 15.0, obs.progress + 15.0)
        look = 3.0
        heading_err = math.atan2(math.sin(ego.heading - route.heading_at(s + look)),
                                 math.cos(ego.heading - route.heading_at(s + look)))
        cam_ahead = 1.0
        nearest = math.inf
        for ob, (x, y, _) in world.obstacle_states():
            so, oo, _ = route.project(x, y, s - 5.0, s + 40.0)
            if so > s and abs(oo) - 0.5 * ob.extent[1] < self.cfg.corridor_half:
                nearest = min(nearest, so - s - cam_ahead - 0.5 * ob.extent[0])
        prox = 0.0
        if math.isfinite(nearest):
            prox = min(1.0, max(0.0, (self.cfg.proximity_far - nearest)
                                / (self.cfg.proximity_far - self.cfg.proximity_near)))
        extra = 0.0
        for zone, red in world.signal_states():
            gap = zone.stop_s - s
            if red and 0.0 < gap:
                extra = max(extra, _stop_brake(obs.speed, gap - 2.0))
        for k, z in enumerate(route.stop_zones):
            gap = z.start_s + 0.5 * z.length - s
            if k in self._stopped_zone or gap < -0.5 * z.length:
                continue
            if obs.speed < 0.05 and abs(gap) < 0.5 * z.length:
                self._stopped_zone.add(k)
            elif gap > 0:
                extra = max(extra, _stop_brake(obs.speed, gap))
        p = Percepts(off, heading_err, prox > 0.0, prox)
        return act(p, obs.speed, self.cfg, extra)


def make_pilot(name: str, cfg: PilotConfig = PilotConfig(), dt: float = 0.05):
    if name == "reference":
        return ReferencePilot(cfg, dt)
    if name == "oracle":
        return OraclePilot(cfg, dt)
    raise ValueError(f"unknown pilot {name!r}; expected 'reference' or 'oracle'")
