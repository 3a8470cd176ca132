"""Camera attack operators: blur (Poltergeist), bounded ghost patches (SNAL), coloured strips (ESIA)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .imaging import Frame, convolve, gaussian_kernel, motion_kernel, quantize, to_planes

KINDS = ("poltergeist", "snal", "esia")
SEVERITIES = ("low", "med", "high")
TEMPLATE_BANK_VERSION = 1
TEMPLATE_BANK_SEED = 0x5EED_0001
TEMPLATE_BASE_SIZE = 32


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic generator for (seed, keys...); the same tuple always yields the same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, keys)])))


@dataclass(frozen=True)
class PoltergeistParams:
    sigma: float = 3.0
    ksize: int = 13
    motion_len: int = 9
    # None draws a fresh angle per attack event; a float fixes it (radians)
    motion_angle: float | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.ksize < 1 or self.ksize % 2 == 0:
            raise ValueError(f"ksize must be odd, got {self.ksize}")
        if self.motion_len < 0:
            raise ValueError(f"motion_len must be >= 0, got {self.motion_len}")


@dataclass(frozen=True)
class SnalParams:
    epsilon: int = 8
    n_patches_range: tuple[int, int] = (3, 8)
    patch_size_range: tuple[int, int] = (8, 24)
    n_templates: int = 16

    def __post_init__(self):
        if int(self.epsilon) != self.epsilon or self.epsilon < 1:
            raise ValueError(f"epsilon must be an integer >= 1, got {self.epsilon}")
        for name in ("n_patches_range", "patch_size_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
        object.__setattr__(self, "n_patches_range", tuple(self.n_patches_range))
        object.__setattr__(self, "patch_size_range", tuple(self.patch_size_range))

    @property
    def template_bank(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return template_bank(self.n_templates)


# severity -> (n_strips, strip_height, channel_offset, saturate)
ESIA_TABLE = {
    "low": (2, 4, 64, False),
    "med": (4, 8, 128, False),
    "high": (8, 12, 128, True),
}


@dataclass(frozen=True)
class EsiaParams:
    severity: str = "med"

    def __post_init__(self):
        if self.severity not in ESIA_TABLE:
            raise ValueError(f"severity must be one of {SEVERITIES}, got {self.severity!r}")

    def derived(self, height: int) -> tuple[int, int, int, bool]:
        """Strip layout for an image of `height` rows.

        The strip count is reduced until every strip fits without overlap.
        """
        n, sh, off, sat = ESIA_TABLE[self.severity]
        if sh > height:
            raise ValueError(f"strip height {sh} does not fit in {height} rows")
        return min(n, height // sh), sh, off, sat


_PARAM_TYPES = {"poltergeist": PoltergeistParams, "snal": SnalParams, "esia": EsiaParams}


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    interval_d: int = 1
    phase: int = 0
    seed: int = 0
    params: PoltergeistParams | SnalParams | EsiaParams | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.interval_d < 1:
            raise ValueError(f"interval_d must be >= 1, got {self.interval_d}")
        if self.phase < 0:
            raise ValueError(f"phase must be >= 0, got {self.phase}")
        expected = _PARAM_TYPES[self.kind]
        if self.params is None:
            object.__setattr__(self, "params", expected())
        elif not isinstance(self.params, expected):
            raise ValueError(f"{self.kind} attack needs {expected.__name__}, got {type(self.params).__name__}")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "interval_d": self.interval_d,
            "phase": self.phase,
            "seed": self.seed,
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.params).items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttackConfig":
        allowed = {"kind", "interval_d", "phase", "seed", "params"}
        unknown = sorted(set(obj) - allowed)
        if unknown:
            raise ValueError(f"unknown attack keys: {unknown}")
        kind = obj.get("kind")
        if kind not in KINDS:
            raise ValueError(f"unknown attack kind {kind!r}; expected one of {KINDS}")
        ptype = _PARAM_TYPES[kind]
        raw = dict(obj.get("params") or {})
        names = set(ptype.__dataclass_fields__)
        bad = sorted(set(raw) - names)
        if bad:
            raise ValueError(f"unknown {kind} params: {bad}")
        for key in ("n_patches_range", "patch_size_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(
            kind=kind,
            interval_d=int(obj.get("interval_d", 1)),
            phase=int(obj.get("phase", 0)),
            seed=int(obj.get("seed", 0)),
            params=ptype(**raw),
        )


def is_attack_step(t: int, cfg: AttackConfig) -> bool:
    if t < 0:
        raise ValueError(f"timestep must be >= 0, got {t}")
    return t >= cfg.phase and (t - cfg.phase) % cfg.interval_d == 0


def attack_count(T: int, cfg: AttackConfig) -> int:
    """Closed form for the number of attacked steps in [0, T)."""
    if cfg.phase >= T:
        return 0
    return math.ceil((T - cfg.phase) / cfg.interval_d)


# -- Poltergeist -----------------------------------------------------------

def poltergeist(frame: Frame, p: PoltergeistParams, rng: np.random.Generator) -> Frame:
    if p.ksize > min(frame.width, frame.height):
        raise ValueError(f"blur kernel {p.ksize} exceeds image {frame.width}x{frame.height}")
    angle = rng.uniform(0.0, math.pi) if p.motion_angle is None else p.motion_angle
    planes = to_planes(frame)
    if p.ksize > 1:
        planes = convolve(planes, gaussian_kernel(p.sigma, p.ksize))
    if p.motion_len > 1:
        mk = motion_kernel(p.motion_len, angle)
        if mk.size <= min(frame.width, frame.height):
            planes = convolve(planes, mk)
    return quantize(planes)


# -- SNAL ------------------------------------------------------------------

def _make_template(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """A vehicle-like rounded rectangle with a two-tone body/window texture."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    w = rng.uniform(0.55, 0.95) * size
    h = rng.uniform(0.35, 0.8) * size
    cx, cy = size / 2.0, size / 2.0
    rad = rng.uniform(0.1, 0.35) * min(w, h)
    dx = np.maximum(np.abs(xx - cx) - (w / 2 - rad), 0.0)
    dy = np.maximum(np.abs(yy - cy) - (h / 2 - rad), 0.0)
    mask = dx * dx + dy * dy <= rad * rad
    dark = rng.uniform(0, 60, size=3)
    bright = rng.uniform(170, 255, size=3)
    body, window = (dark, bright) if rng.random() < 0.5 else (bright, dark)
    img = np.empty((size, size, 3))
    img[:] = body
    top = cy - h / 2
    band = (yy > top + 0.15 * h) & (yy < top + 0.45 * h) & (np.abs(xx - cx) < 0.35 * w)
    img[band] = window
    # wheels
    for wx in (cx - 0.3 * w, cx + 0.3 * w):
        wheel = (xx - wx) ** 2 + (yy - (cy + h / 2)) ** 2 <= (0.12 * w) ** 2
        img[wheel & mask] = window
    return img, mask


_BANK_CACHE: dict[int, list] = {}


def template_bank(n: int = 16) -> list[tuple[np.ndarray, np.ndarray]]:
    if n not in _BANK_CACHE:
        rng = make_rng(TEMPLATE_BANK_SEED, TEMPLATE_BANK_VERSION)
        _BANK_CACHE[n] = [_make_template(rng, TEMPLATE_BASE_SIZE) for _ in range(n)]
    return _BANK_CACHE[n]


def _resize_nearest(arr: np.ndarray, size: int) -> np.ndarray:
    idx = (np.arange(size) * arr.shape[0] // size).astype(int)
    return arr[idx][:, idx]


def snal(frame: Frame, p: SnalParams, rng: np.random.Generator) -> Frame:
    orig = to_planes(frame)
    target = orig.copy()
    H, W = frame.height, frame.width
    bank = p.template_bank
    n = int(rng.integers(p.n_patches_range[0], p.n_patches_range[1] + 1))
    for _ in range(n):
        img, mask = bank[int(rng.integers(len(bank)))]
        s = int(rng.integers(p.patch_size_range[0], p.patch_size_range[1] + 1))
        timg, tmask = _resize_nearest(img, s), _resize_nearest(mask, s)
        # top-left may hang off any edge; the patch is clipped to the image
        y0 = int(rng.integers(-(s // 2), H - s // 2))
        x0 = int(rng.integers(-(s // 2), W - s // 2))
        ys, xs = max(y0, 0), max(x0, 0)
        ye, xe = min(y0 + s, H), min(x0 + s, W)
        if ye <= ys or xe <= xs:
            continue
        sub_img = timg[ys - y0:ye - y0, xs - x0:xe - x0]
        sub_mask = tmask[ys - y0:ye - y0, xs - x0:xe - x0]
        region = target[ys:ye, xs:xe]
        region[sub_mask] = sub_img[sub_mask]
    eps = float(p.epsilon)
    delta = np.clip(target - orig, -eps, eps)
    return quantize(orig + delta)


# -- ESIA ------------------------------------------------------------------

def esia_bands(height: int, p: EsiaParams, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Non-overlapping [start, stop) row bands, one per equal-height slot."""
    n, sh, _, _ = p.derived(height)
    slot = height // n
    bands = []
    for i in range(n):
        start = i * slot + int(rng.integers(0, slot - sh + 1))
        bands.append((start, start + sh))
    return bands


def esia(frame: Frame, p: EsiaParams, rng: np.random.Generator) -> Frame:
    _, _, offset, saturate = p.derived(frame.height)
    out = frame.data.copy()
    for start, stop in esia_bands(frame.height, p, rng):
        ch = int(rng.integers(3))
        sign = 1 if rng.random() < 0.5 else -1
        band = out[start:stop].astype(np.int16)
        band[..., ch] = np.clip(band[..., ch] + sign * offset, 0, 255)
        if saturate:
            other = (ch + 1 + int(rng.integers(2))) % 3
            band[..., other] = 255 if rng.random() < 0.5 else 0
        out[start:stop] = band.astype(np.uint8)
    return Frame(out)


_OPERATORS = {"poltergeist": poltergeist, "snal": snal, "esia": esia}


def perturb(frame: Frame, cfg: AttackConfig, rng: np.random.Generator) -> Frame:
    return _OPERATORS[cfg.kind](frame, cfg.params, rng)


def apply(frames: Frame | Sequence[Frame], cfg: AttackConfig, t: int,
          rng: np.random.Generator | None = None):
    """Apply the configured attack to every camera frame of timestep `t` if scheduled.

    Returns (frames, attacked). A single Frame in gives a single Frame out.
    Without an explicit rng, the stream is derived from (cfg.seed, t).
    """
    single = isinstance(frames, Frame)
    seq = [frames] if single else list(frames)
    if not is_attack_step(t, cfg):
        return (seq[0] if single else seq), False
    if rng is None:
        rng = make_rng(cfg.seed, t)
    out = [perturb(f, cfg, rng) for f in seq]
    return (out[0] if single else out), True
