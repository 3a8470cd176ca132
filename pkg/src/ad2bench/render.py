"""Pinhole rasterizer for the three-camera rig (painter's algorithm, no z-buffer)."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .imaging import Frame, save_ppm

SKY = (135, 206, 235)
GROUND = (105, 105, 105)
WHITE = (245, 245, 245)
YELLOW = (240, 200, 40)
STOP_BAND = (150, 30, 30)
SIGNAL_RED = (255, 0, 0)
SIGNAL_GREEN = (0, 255, 0)
OBSTACLE_COLORS = {
    "pedestrian": (255, 0, 255),
    "vehicle": (40, 70, 200),
    "static": (255, 110, 0),
}
CAMERA_NAMES = ("left", "centre", "right")

NEAR = 0.3
MARKING_WIDTH = 0.2
MARKING_RANGE = 70.0
SIGNAL_HEIGHT = 4.0
SIGNAL_RADIUS = 0.35


@dataclass(frozen=True)
class CameraSpec:
    mount_offset: tuple[float, float, float] = (1.0, 0.0, 1.5)
    yaw_offset: float = 0.0
    hfov: float = math.radians(90.0)
    width: int = 96
    height: int = 64

    def __post_init__(self):
        if not 0 < self.hfov < math.pi:
            raise ValueError(f"hfov must be in (0, pi), got {self.hfov}")
        if self.width < 16 or self.height < 16:
            raise ValueError(f"camera must be at least 16x16, got {self.width}x{self.height}")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.hfov)

    def azimuth_interval(self) -> tuple[float, float]:
        return self.yaw_offset - 0.5 * self.hfov, self.yaw_offset + 0.5 * self.hfov


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[CameraSpec, CameraSpec, CameraSpec]

    def __post_init__(self):
        if len(self.cameras) != 3:
            raise ValueError("rig needs exactly [left, centre, right] cameras")
        for a, b in zip(self.cameras[:-1], self.cameras[1:]):
            lo_a, hi_a = a.azimuth_interval()
            lo_b, hi_b = b.azimuth_interval()
            overlap = min(hi_a, hi_b) - max(lo_a, lo_b)
            if overlap < math.radians(10.0) - 1e-12:
                raise ValueError(f"adjacent cameras overlap by {math.degrees(overlap):.1f} deg < 10 deg")


def default_rig(width: int = 96, height: int = 64) -> CameraRig:
    """Left camera yawed +45 deg (towards positive, left-hand azimuths), right camera -45 deg."""
    return CameraRig(tuple(CameraSpec(yaw_offset=math.radians(y), width=width, height=height)
                           for y in (45.0, 0.0, -45.0)))


class _View:
    """World-to-pixel transform for one camera at one ego pose."""

    def __init__(self, ego, cam: CameraSpec):
        c, s = math.cos(ego.heading), math.sin(ego.heading)
        dx, dy, dz = cam.mount_offset
        self.px = ego.x + c * dx - s * dy
        self.py = ego.y + s * dx + c * dy
        self.h = dz
        yaw = ego.heading + cam.yaw_offset
        self.fwd = (math.cos(yaw), math.sin(yaw))
        self.f = cam.focal
        self.cx = 0.5 * cam.width
        self.cy = 0.5 * cam.height

    def to_cam(self, pts: np.ndarray) -> np.ndarray:
        """(N, 3) world points -> (N, 3) camera coords (right, up, depth)."""
        rx = pts[:, 0] - self.px
        ry = pts[:, 1] - self.py
        depth = rx * self.fwd[0] + ry * self.fwd[1]
        right = rx * self.fwd[1] - ry * self.fwd[0]
        return np.stack([right, pts[:, 2] - self.h, depth], axis=1)

    def project(self, cam_pts: np.ndarray) -> np.ndarray:
        z = cam_pts[:, 2]
        return np.stack([self.cx + self.f * cam_pts[:, 0] / z, self.cy - self.f * cam_pts[:, 1] / z], axis=1)


def project_point(ego, cam: CameraSpec, point) -> tuple[float, float, float] | None:
    """Analytic (column, row, depth) of a world point, or None if behind the camera."""
    view = _View(ego, cam)
    pc = view.to_cam(np.array([point], dtype=np.float64))
    if pc[0, 2] <= NEAR:
        return None
    uv = view.project(pc)[0]
    return float(uv[0]), float(uv[1]), float(pc[0, 2])


def _clip_near(poly: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-space polygon against depth >= NEAR."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ina, inb = a[2] >= NEAR, b[2] >= NEAR
        if ina:
            out.append(a)
        if ina != inb:
            t = (NEAR - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out) if out else np.empty((0, 3))


def _fill_convex(img: np.ndarray, uv: np.ndarray, color) -> None:
    if len(uv) < 3:
        return
    H, W = img.shape[:2]
    u0 = max(int(math.floor(uv[:, 0].min() - 0.5)), 0)
    u1 = min(int(math.ceil(uv[:, 0].max() - 0.5)), W - 1)
    v0 = max(int(math.floor(uv[:, 1].min() - 0.5)), 0)
    v1 = min(int(math.ceil(uv[:, 1].max() - 0.5)), H - 1)
    if u1 < u0 or v1 < v0:
        return
    xs = np.arange(u0, u1 + 1) + 0.5
    ys = np.arange(v0, v1 + 1)[:, None] + 0.5
    area = 0.0
    for i in range(len(uv)):
        a, b = uv[i], uv[(i + 1) % len(uv)]
        area += a[0] * b[1] - b[0] * a[1]
    if abs(area) < 1e-12:
        return
    sgn = 1.0 if area > 0 else -1.0
    mask = np.ones((len(ys), len(xs)), dtype=bool)
    for i in range(len(uv)):
        a, b = uv[i], uv[(i + 1) % len(uv)]
        cr = (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])
        mask &= sgn * cr >= 0
    img[v0:v1 + 1, u0:u1 + 1][mask] = color


def _fill_world_polygon(img, view: _View, pts3: np.ndarray, color) -> None:
    cp = _clip_near(view.to_cam(pts3))
    if len(cp) >= 3:
        _fill_convex(img, view.project(cp), color)


def _fill_disc(img, u, v, r, color) -> None:
    H, W = img.shape[:2]
    u0, u1 = max(int(math.floor(u - r)), 0), min(int(math.ceil(u + r)), W - 1)
    v0, v1 = max(int(math.floor(v - r)), 0), min(int(math.ceil(v + r)), H - 1)
    if u1 < u0 or v1 < v0:
        return
    xs = np.arange(u0, u1 + 1) + 0.5
    ys = np.arange(v0, v1 + 1)[:, None] + 0.5
    mask = (xs - u) ** 2 + (ys - v) ** 2 <= r * r
    img[v0:v1 + 1, u0:u1 + 1][mask] = color


def _draw_markings(img: np.ndarray, view: _View, line: np.ndarray, color, half_tan: float) -> None:
    """Scanline rasterization of a ground polyline of width MARKING_WIDTH.

    With zero camera pitch every image row below the horizon sees the ground at
    one depth, so each row is the cross-section of the line at that depth.
    """
    H, W = img.shape[:2]
    cam = view.to_cam(np.column_stack([line, np.zeros(len(line))]))
    r, d = cam[:, 0], cam[:, 2]
    rows = np.arange(H) + 0.5
    below = rows > view.cy
    if not below.any():
        return
    vr = np.nonzero(below)[0]
    zr = view.h * view.f / (rows[vr] - view.cy)
    d0, d1 = d[:-1], d[1:]
    dlo, dhi = np.minimum(d0, d1), np.maximum(d0, d1)
    reach = np.maximum(np.abs(r[:-1]), np.abs(r[1:])) - 2.0
    keep = (dhi >= zr.min()) & (dlo <= zr.max()) & (dhi > dlo) & (reach < dhi * half_tan + 1.0)
    if not keep.any():
        return
    d0, d1, r0, r1 = d0[keep], d1[keep], r[:-1][keep], r[1:][keep]
    dd = d1 - d0
    seglen = np.hypot(r1 - r0, dd)
    t = (zr[:, None] - d0[None, :]) / dd[None, :]
    hit = (t >= 0.0) & (t < 1.0)
    if not hit.any():
        return
    lat = r0[None, :] + t * (r1 - r0)[None, :]
    half_lat = np.minimum(0.5 * MARKING_WIDTH * seglen / np.abs(dd), 0.5 * seglen + MARKING_WIDTH)
    u = view.cx + view.f * lat / zr[:, None]
    half_px = view.f * half_lat[None, :] / zr[:, None]
    ri, si = np.nonzero(hit)
    cols = np.arange(W) + 0.5
    cover = np.abs(cols[None, :] - u[ri, si][:, None]) <= half_px[ri, si][:, None]
    mask = np.zeros((len(vr), W), dtype=bool)
    np.logical_or.at(mask, ri, cover)
    sub = img[vr]
    sub[mask] = color
    img[vr] = sub


def _coarse_boundary(route, side: float) -> np.ndarray:
    key = ("_render_boundary", side)
    cache = route.__dict__.setdefault("_render_cache", {})
    if key not in cache:
        line = route.boundary(side)
        idx = list(range(0, len(line), 2))
        if idx[-1] != len(line) - 1:
            idx.append(len(line) - 1)
        cache[key] = line[idx]
    return cache[key]


def _box_faces(x, y, heading, length, width, height):
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    base = [(x + c * lx - s * ly, y + s * lx + c * ly) for lx, ly in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))]
    bottom = np.array([[bx, by, 0.0] for bx, by in base])
    top = np.array([[bx, by, height] for bx, by in base])
    faces = [bottom, top]
    for i in range(4):
        j = (i + 1) % 4
        faces.append(np.array([bottom[i], bottom[j], top[j], top[i]]))
    return faces


def render_frame(world, ego, cam: CameraSpec) -> Frame:
    """Sky, ground, stop bands, lane markings, then obstacles and signal heads far-to-near."""
    H, W = cam.height, cam.width
    view = _View(ego, cam)
    img = np.empty((H, W, 3), dtype=np.uint8)
    rows = np.arange(H) + 0.5
    sky = rows < view.cy
    img[sky] = SKY
    img[~sky] = GROUND
    route = world.route
    for z in route.stop_zones:
        poly = route.zone_polygon(z.start_s, z.start_s + z.length)
        _fill_world_polygon(img, view, np.column_stack([poly, np.zeros(4)]), STOP_BAND)
    half_tan = math.tan(0.5 * cam.hfov)
    for side, color in ((-1.0, WHITE), (1.0, YELLOW)):
        _draw_markings(img, view, _coarse_boundary(route, side), color, half_tan)

    items = []
    for ob, (x, y, h) in world.obstacle_states():
        d = view.to_cam(np.array([[x, y, 0.0]]))[0]
        items.append((float(np.hypot(d[0], d[2])), "box", (ob, x, y, h)))
    for zone, red in world.signal_states():
        p, _ = route.point_at(zone.stop_s)
        d = view.to_cam(np.array([[p[0], p[1], SIGNAL_HEIGHT]]))[0]
        items.append((float(np.hypot(d[0], d[2])), "disc", (d, red)))
    items.sort(key=lambda it: -it[0])
    for _, kind, payload in items:
        if kind == "box":
            ob, x, y, h = payload
            for face in _box_faces(x, y, h, ob.extent[0], ob.extent[1], ob.height):
                _fill_world_polygon(img, view, face, OBSTACLE_COLORS[ob.kind])
        else:
            d, red = payload
            if d[2] > NEAR:
                uv = view.project(d[None, :])[0]
                _fill_disc(img, uv[0], uv[1], view.f * SIGNAL_RADIUS / d[2], SIGNAL_RED if red else SIGNAL_GREEN)
    return Frame(img)


def render_rig(world, ego, rig: CameraRig | None = None) -> list[Frame]:
    rig = rig or default_rig()
    return [render_frame(world, ego, cam) for cam in rig.cameras]


def dump_frames(out_dir, step: int, frames) -> list[str]:
    """Write "<step>_<camera>.ppm" per camera and return the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, fr in zip(CAMERA_NAMES, frames):
        paths.append(os.path.join(out_dir, f"{step}_{name}.ppm"))
        save_ppm(fr, paths[-1])
    return paths
