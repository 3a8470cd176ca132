"""Frames, binary PPM I/O and the small set of filters shared by attacks and baselines."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class DecodeError(ValueError):
    """Raised when a PPM file cannot be decoded."""


@dataclass(frozen=True)
class Frame:
    """One RGB image, stored as an (height, width, 3) uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.dtype != np.uint8 or d.ndim != 3 or d.shape[2] != 3:
            raise ValueError(f"frame data must be uint8 (H, W, 3), got {d.dtype} {d.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_bytes(cls, width: int, height: int, payload: bytes) -> "Frame":
        if len(payload) != width * height * 3:
            raise ValueError(f"expected {width * height * 3} samples, got {len(payload)}")
        arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
        return cls(arr)

    @classmethod
    def blank(cls, width: int, height: int, value: int = 0) -> "Frame":
        return cls(np.full((height, width, 3), value, dtype=np.uint8))

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.data).tobytes()

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.data.shape, self.tobytes()))


@dataclass(frozen=True)
class Kernel2D:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got shape {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


IDENTITY = Kernel2D(np.ones((1, 1)))
LAPLACIAN_MASK = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def quantize(planes: np.ndarray) -> Frame:
    """Round half up, clamp to [0, 255] and pack as a Frame."""
    q = np.floor(np.asarray(planes, dtype=np.float64) + 0.5)
    return Frame(np.clip(q, 0, 255).astype(np.uint8))


def to_planes(frame: Frame) -> np.ndarray:
    return frame.data.astype(np.float64)


def luminance(frame: Frame | np.ndarray) -> np.ndarray:
    """Mean of the RGB channels as a float64 (H, W) plane."""
    arr = frame.data if isinstance(frame, Frame) else frame
    return arr.astype(np.float64).mean(axis=2)


# -- PPM -------------------------------------------------------------------

def encode_ppm(frame: Frame) -> bytes:
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode("ascii")
    return header + frame.tobytes()


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DecodeError(f"unexpected end of header at offset {start}")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> Frame:
    if len(buf) < 2 or buf[:2] != b"P6":
        raise DecodeError("missing P6 magic at offset 0")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise DecodeError(f"malformed header field {tok!r} at offset {pos - len(tok)}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise DecodeError(f"maxval {maxval} != 255 at offset {pos - len(str(maxval))}")
    if width <= 0 or height <= 0:
        raise DecodeError(f"non-positive dimensions {width}x{height} at offset 2")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DecodeError(f"missing whitespace after header at offset {pos}")
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise DecodeError(f"truncated payload at offset {pos + len(payload)}: need {need} bytes, have {len(payload)}")
    return Frame.from_bytes(width, height, payload)


def save_ppm(frame: Frame, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(frame))


def load_ppm(path: str | os.PathLike) -> Frame:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


# -- filtering -------------------------------------------------------------

def convolve(frame: Frame | np.ndarray, kernel: Kernel2D) -> np.ndarray:
    """Convolve each channel independently with border replication.

    Accepts a Frame or an (H, W) / (H, W, C) real array and returns float64
    planes with the input's spatial shape.
    """
    planes = to_planes(frame) if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    h, w = planes.shape[:2]
    if kernel.size > min(h, w):
        raise ValueError(f"kernel size {kernel.size} exceeds image {w}x{h}")
    if kernel.size == 1:
        return planes * kernel.weights[0, 0]
    if planes.ndim == 2:
        return ndimage.convolve(planes, kernel.weights, mode="nearest")
    out = np.empty_like(planes)
    for c in range(planes.shape[2]):
        out[..., c] = ndimage.convolve(planes[..., c], kernel.weights, mode="nearest")
    return out


def laplacian(frame: Frame | np.ndarray) -> np.ndarray:
    planes = to_planes(frame) if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    if planes.shape[0] < 3 or planes.shape[1] < 3:
        raise ValueError(f"laplacian needs at least 3x3, got {planes.shape[1]}x{planes.shape[0]}")
    return convolve(planes, Kernel2D(LAPLACIAN_MASK))


def gaussian_kernel(sigma: float, size: int) -> Kernel2D:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if size < 1 or size % 2 == 0:
        raise ValueError(f"size must be a positive odd integer, got {size}")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return Kernel2D(g / g.sum())


def motion_kernel(length: int, angle: float) -> Kernel2D:
    """Normalized line kernel of `length` pixels at `angle` radians."""
    if length <= 1:
        return IDENTITY
    size = length if length % 2 == 1 else length + 1
    r = size // 2
    k = np.zeros((size, size))
    # supersample the segment so every angle gets a connected line
    ts = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, 8 * length)
    cols = np.rint(r + ts * np.cos(angle)).astype(int)
    rows = np.rint(r - ts * np.sin(angle)).astype(int)
    k[rows, cols] = 1.0
    return Kernel2D(k / k.sum())
