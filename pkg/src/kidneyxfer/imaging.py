"""Raster types, ROI geometry, integral images, resampling and PGM I/O."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

CANONICAL_SIZE = 32


class PgmError(ValueError):
    """Raised for malformed or unsupported PGM data."""


@dataclass(frozen=True)
class Roi:
    """Axis-aligned rectangle; (x, y) is the top-left pixel."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"ROI extent must be positive, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def fits(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class Image:
    """Single-channel raster with values in [0, 1] and isotropic spacing (mm/pixel)."""

    pixels: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("image must be a non-empty 2-D array")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class IntegralImage:
    """(height+1) x (width+1) table; entry [i, j] sums pixels with row < i and col < j."""

    table: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1


def dice(a: Roi, b: Roi) -> float:
    """Dice overlap of two pixel rectangles."""
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    return 2.0 * ix * iy / (a.area + b.area)


def dice_many(rois: np.ndarray, b: Roi) -> np.ndarray:
    """Vectorized dice of an (n, 4) array of (x, y, w, h) rows against one ROI."""
    rois = np.asarray(rois)
    x, y, w, h = rois[:, 0], rois[:, 1], rois[:, 2], rois[:, 3]
    ix = np.clip(np.minimum(x + w, b.x + b.w) - np.maximum(x, b.x), 0, None)
    iy = np.clip(np.minimum(y + h, b.y + b.h) - np.maximum(y, b.y), 0, None)
    return 2.0 * ix * iy / (w * h + b.area)


def integral(img: Image | np.ndarray) -> IntegralImage:
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    table = np.zeros((px.shape[0] + 1, px.shape[1] + 1))
    np.cumsum(np.cumsum(px, axis=0), axis=1, out=table[1:, 1:])
    return IntegralImage(table)


def rect_sum(ii: IntegralImage, r: Roi | tuple[int, int, int, int]) -> float:
    """Sum over a rectangle in four lookups.

    ``r`` may also be a plain ``(x, y, w, h)`` tuple, which allows zero
    extents (summing to 0).
    """
    x, y, w, h = r.as_tuple() if isinstance(r, Roi) else (int(v) for v in r)
    if w < 0 or h < 0 or x < 0 or y < 0 or x + w > ii.width or y + h > ii.height:
        raise ValueError(f"rectangle {(x, y, w, h)} outside {ii.width}x{ii.height} integral image")
    t = ii.table
    return float(t[y + h, x + w] - t[y, x + w] - t[y + h, x] + t[y, x])


def _bilinear_axis(n_in: int, n_out: int):
    # corner-aligned: output sample 0 -> input 0, last -> last
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.intp), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resample_array(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of the trailing two axes of ``px``."""
    in_h, in_w = px.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return px.copy()
    r0, r1, fr = _bilinear_axis(in_h, out_h)
    c0, c1, fc = _bilinear_axis(in_w, out_w)
    top = px[..., r0, :] * (1 - fr)[:, None] + px[..., r1, :] * fr[:, None]
    out = top[..., c0] * (1 - fc) + top[..., c1] * fc
    return out


def resample(img: Image, out_w: int, out_h: int) -> Image:
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    out = np.clip(resample_array(img.pixels, out_h, out_w), 0.0, 1.0)
    # keep physical extent: spacing scales with the horizontal factor
    spacing = img.spacing * img.width / out_w
    return Image(out, spacing)


def crop(img: Image, r: Roi) -> Image:
    if not r.fits(img.width, img.height):
        raise ValueError(f"{r} outside {img.width}x{img.height} image")
    return Image(img.pixels[r.y : r.y + r.h, r.x : r.x + r.w], img.spacing)


def quantize(img: Image) -> Image:
    """Round pixels to the 8-bit grid used by PGM files."""
    return Image(np.round(np.clip(img.pixels, 0, 1) * 255) / 255, img.spacing)


def write_pgm(img: Image) -> bytes:
    data = np.round(np.clip(img.pixels, 0.0, 1.0) * 255).astype(np.uint8)
    header = f"P5\n# spacing={img.spacing!r}\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + data.tobytes()


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
_SPACING = re.compile(rb"#\s*spacing=([0-9.eE+-]+)")


def read_pgm(data: bytes, spacing: float | None = None) -> Image:
    """Parse a binary (P5) 8-bit PGM.

    Pixel spacing is taken from a ``# spacing=<mm>`` header comment when
    present (as written by :func:`write_pgm`); an explicit ``spacing``
    argument overrides it. Without either, spacing defaults to 1 mm.
    """
    if data[:2] != b"P5":
        raise PgmError(f"unsupported PGM magic {data[:2]!r}; only P5 is accepted")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PgmError("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise PgmError(f"malformed PGM header fields {fields!r}") from None
    if width <= 0 or height <= 0:
        raise PgmError("PGM dimensions must be positive")
    if maxval != 255:
        raise PgmError(f"unsupported maxval {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PgmError("missing whitespace after PGM header")
    pos += 1
    payload = data[pos : pos + width * height]
    if len(payload) < width * height:
        raise PgmError(f"truncated PGM payload: {len(payload)} of {width * height} bytes")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width) / 255.0
    if spacing is None:
        m = _SPACING.search(data, 0, pos)
        spacing = float(m.group(1)) if m else 1.0
    return Image(px, spacing)


def load_pgm(path, spacing: float | None = None) -> Image:
    with open(path, "rb") as fh:
        return read_pgm(fh.read(), spacing)


def save_pgm(path, img: Image) -> None:
    with open(path, "wb") as fh:
        fh.write(write_pgm(img))


def draw_roi(img: Image, r: Roi, value: float = 1.0) -> Image:
    """Burn a one-pixel rectangle border into a copy of ``img``."""
    px = img.pixels.copy()
    x0, y0 = r.x, r.y
    x1, y1 = min(r.x + r.w, img.width) - 1, min(r.y + r.h, img.height) - 1
    px[y0, x0 : x1 + 1] = value
    px[y1, x0 : x1 + 1] = value
    px[y0 : y1 + 1, x0] = value
    px[y0 : y1 + 1, x1] = value
    return Image(px, img.spacing)
