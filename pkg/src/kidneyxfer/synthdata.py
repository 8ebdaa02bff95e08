"""Synthetic ultrasound-like kidney phantoms and the shape-classification source task.

All randomness comes from ``numpy.random.default_rng`` (PCG64) seeded
explicitly, so every sample is a pure function of ``(seed, params)``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import CANONICAL_SIZE, Image, Roi, load_pgm, save_pgm

MANIFEST_HEADER = ["path", "x", "y", "w", "h", "seed", "split"]

# intensities of the noiseless phantom
BACKGROUND = 0.35
CORTEX = 0.18
CAPSULE = 0.8
SINUS = 0.72
DISTRACTOR = 0.85


@dataclass(frozen=True)
class PhantomParams:
    width: int = 128
    height: int = 128
    spacing: float = 1.25
    length_mm: tuple[float, float] = (75.0, 140.0)
    width_mm: tuple[float, float] = (35.0, 70.0)
    orientation_deg: tuple[float, float] = (-25.0, 15.0)
    speckle_shape: float = 4.0
    speckle_amplitude: float = 1.0
    texture_amplitude: float = 0.15
    distractors: tuple[int, int] = (0, 2)

    def __post_init__(self):
        for name in ("length_mm", "width_mm", "orientation_deg", "distractors"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.length_mm[0] <= self.width_mm[1]:
            raise ValueError("kidney length range must lie strictly above the width range")
        if self.width_mm[0] <= 0:
            raise ValueError("kidney widths must be positive")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("phantom images must be at least 8x8")
        if not self.speckle_shape > 0:
            raise ValueError("speckle shape must be positive")
        if not 0 <= self.texture_amplitude <= 1 or not 0 <= self.speckle_amplitude <= 1:
            raise ValueError("amplitudes must lie in [0, 1]")
        if self.distractors[0] < 0:
            raise ValueError("distractor counts must be non-negative")


@dataclass(frozen=True)
class KidneyGeometry:
    """Ellipse in pixel units; angle in degrees, positive = counter-clockwise on screen."""

    cx: float
    cy: float
    semi_major: float
    semi_minor: float
    angle_deg: float
    length_mm: float
    width_mm: float


@dataclass(frozen=True)
class Sample:
    image: Image
    gt: Roi
    seed: int
    geometry: KidneyGeometry | None = None


@dataclass
class ManifestEntry:
    path: str
    roi: Roi
    seed: int


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    root: str = "."

    def __len__(self):
        return len(self.entries)

    def image_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)

    def load(self, entry: ManifestEntry) -> Image:
        return load_pgm(self.image_path(entry))

    def samples(self):
        """Yield ``(image, gt)`` pairs in manifest order."""
        for e in self.entries:
            yield self.load(e), e.roi


def ellipse_extents(semi_major: float, semi_minor: float, angle_deg: float) -> tuple[float, float]:
    """Half-width and half-height of a rotated ellipse's bounding box."""
    t = np.deg2rad(angle_deg)
    ex = np.sqrt((semi_major * np.cos(t)) ** 2 + (semi_minor * np.sin(t)) ** 2)
    ey = np.sqrt((semi_major * np.sin(t)) ** 2 + (semi_minor * np.cos(t)) ** 2)
    return float(ex), float(ey)


def bounding_roi(geom: KidneyGeometry) -> Roi:
    ex, ey = ellipse_extents(geom.semi_major, geom.semi_minor, geom.angle_deg)
    # pixel centres sit at integer coordinates; a pixel k is covered when k in [c-e, c+e]
    x0 = int(np.ceil(geom.cx - ex - 0.5))
    x1 = int(np.floor(geom.cx + ex + 0.5))
    y0 = int(np.ceil(geom.cy - ey - 0.5))
    y1 = int(np.floor(geom.cy + ey + 0.5))
    return Roi(x0, y0, x1 - x0, y1 - y0)


def speckle_field(rng: np.random.Generator, shape, shape_param: float, amplitude: float = 1.0) -> np.ndarray:
    """Unit-mean multiplicative gamma speckle, blended toward 1 by ``amplitude``."""
    if amplitude == 0:
        return np.ones(shape)
    g = rng.gamma(shape_param, 1.0 / shape_param, size=shape)
    return 1.0 + amplitude * (g - 1.0)


def _smooth_texture(rng, shape, sigma):
    t = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return t / (np.abs(t).max() + 1e-12)


def _kidney_intensity(xx, yy, geom: KidneyGeometry) -> tuple[np.ndarray, np.ndarray]:
    t = np.deg2rad(geom.angle_deg)
    dx, dy = xx - geom.cx, yy - geom.cy
    # screen y points down, so counter-clockwise rotation flips the sign of dy
    u = dx * np.cos(t) - dy * np.sin(t)
    v = dx * np.sin(t) + dy * np.cos(t)
    rho = np.sqrt((u / geom.semi_major) ** 2 + (v / geom.semi_minor) ** 2)
    inside = rho <= 1.0
    rim = np.clip(1.0 - geom.semi_minor * (1.0 - rho) / 3.0, 0.0, 1.0)  # ~3 px capsule
    val = CORTEX + (CAPSULE - CORTEX) * rim
    rho_s = np.sqrt((u / (0.55 * geom.semi_major)) ** 2 + (v / (0.35 * geom.semi_minor)) ** 2)
    sinus = np.exp(-2.0 * rho_s**2)
    val = np.maximum(val, CORTEX + (SINUS - CORTEX) * sinus)
    return np.where(inside, val, np.nan), inside


def _distractor_arc(rng, xx, yy, width, height):
    # large-radius circle arc entering from outside the field, diaphragm/liver-boundary like
    radius = rng.uniform(0.6, 1.4) * max(width, height)
    ang = rng.uniform(0, 2 * np.pi)
    dist = radius + rng.uniform(-0.35, 0.35) * min(width, height)
    cx = width / 2 + dist * np.cos(ang)
    cy = height / 2 + dist * np.sin(ang)
    thick = rng.uniform(1.5, 3.0)
    d = np.abs(np.hypot(xx - cx, yy - cy) - radius)
    return np.exp(-0.5 * (d / thick) ** 2)


def sample_geometry(rng: np.random.Generator, p: PhantomParams) -> KidneyGeometry:
    length = rng.uniform(*p.length_mm)
    wid = rng.uniform(*p.width_mm)
    angle = rng.uniform(*p.orientation_deg)
    a, b = length / (2 * p.spacing), wid / (2 * p.spacing)
    ex, ey = ellipse_extents(a, b, angle)
    margin = 1.0
    if 2 * (ex + margin) > p.width or 2 * (ey + margin) > p.height:
        raise ValueError(
            f"kidney of {length:.1f}x{wid:.1f} mm does not fit a {p.width}x{p.height} field at {p.spacing} mm/px"
        )
    cx = rng.uniform(ex + margin, p.width - 1 - ex - margin) if p.width - 1 - 2 * (ex + margin) > 0 else (p.width - 1) / 2
    cy = rng.uniform(ey + margin, p.height - 1 - ey - margin) if p.height - 1 - 2 * (ey + margin) > 0 else (p.height - 1) / 2
    return KidneyGeometry(cx, cy, a, b, angle, length, wid)


def generate_phantom(seed: int, p: PhantomParams = PhantomParams()) -> Sample:
    """Render one speckled kidney phantom and its axis-aligned ground truth."""
    # the largest kidney at the most oblique angle must fit, regardless of what this seed draws
    for ang in p.orientation_deg:
        ex, ey = ellipse_extents(p.length_mm[1] / (2 * p.spacing), p.width_mm[1] / (2 * p.spacing), ang)
        if 2 * ex + 2 > p.width or 2 * ey + 2 > p.height:
            raise ValueError("kidney size range does not fit the field of view at this spacing")
    rng = np.random.default_rng(seed)
    geom = sample_geometry(rng, p)
    yy, xx = np.mgrid[0 : p.height, 0 : p.width].astype(np.float64)

    img = np.full((p.height, p.width), BACKGROUND)
    if p.texture_amplitude > 0:
        img += p.texture_amplitude * BACKGROUND * _smooth_texture(rng, img.shape, 3.0)
    n_arcs = int(rng.integers(p.distractors[0], p.distractors[1] + 1))
    for _ in range(n_arcs):
        arc = _distractor_arc(rng, xx, yy, p.width, p.height)
        img = img + (DISTRACTOR - img) * arc
    kid, inside = _kidney_intensity(xx, yy, geom)
    img = np.where(inside, kid, img)
    img = img * speckle_field(rng, img.shape, p.speckle_shape, p.speckle_amplitude)
    img = np.clip(img, 0.0, 1.0)
    gt = bounding_roi(geom)
    gt = Roi(max(gt.x, 0), max(gt.y, 0), min(gt.w, p.width - max(gt.x, 0)), min(gt.h, p.height - max(gt.y, 0)))
    return Sample(Image(img, p.spacing), gt, seed, geom)


def write_manifest(path: str, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            w.writerow([e.path, *e.roi.as_tuple(), e.seed, manifest.split])


def read_manifest(path: str) -> DatasetManifest:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
    entries, splits = [], set()
    for row in rows[1:]:
        if len(row) != len(MANIFEST_HEADER):
            raise ValueError(f"{path}: malformed row {row!r}")
        entries.append(ManifestEntry(row[0], Roi(*map(int, row[1:5])), int(row[5])))
        splits.add(row[6])
    if len(splits) > 1:
        raise ValueError(f"{path}: mixed split tags {sorted(splits)}")
    if len({e.path for e in entries}) != len(entries):
        raise ValueError(f"{path}: duplicate image paths")
    return DatasetManifest(splits.pop() if splits else "", entries, os.path.dirname(os.path.abspath(path)))


def generate_dataset(n: int, seed: int, p: PhantomParams, split: str, out_dir: str) -> DatasetManifest:
    """Write ``n`` phantoms (seeds ``seed .. seed+n-1``) plus ``<split>.csv`` into ``out_dir``."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest(split, [], os.path.abspath(out_dir))
    for s in range(seed, seed + n):
        sample = generate_phantom(s, p)
        name = f"{split}_{s:06d}.pgm"
        save_pgm(os.path.join(out_dir, name), sample.image)
        manifest.entries.append(ManifestEntry(name, sample.gt, s))
    write_manifest(os.path.join(out_dir, f"{split}.csv"), manifest)
    return manifest


SOURCE_CLASSES = ("ellipse", "rectangle", "triangle", "grating")


def _render_shape(rng, kind: int, size: int, ss: int = 2) -> np.ndarray:
    n = size * ss
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / ss - size / 2
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    ox, oy = rng.uniform(-3, 3, size=2)
    u = (xx - ox) * c + (yy - oy) * s
    v = -(xx - ox) * s + (yy - oy) * c
    scale = rng.uniform(0.45, 0.8) * size / 2
    if kind == 0:
        mask = (u / scale) ** 2 + (v / (scale * rng.uniform(0.4, 0.8))) ** 2 <= 1
    elif kind == 1:
        mask = (np.abs(u) <= scale) & (np.abs(v) <= scale * rng.uniform(0.3, 0.7))
    elif kind == 2:
        # equilateral-ish triangle: three half-planes
        mask = np.ones_like(u, dtype=bool)
        for k in range(3):
            phi = 2 * np.pi * k / 3
            mask &= (u * np.cos(phi) + v * np.sin(phi)) <= scale / 2
    else:
        period = rng.uniform(4, 9)
        mask = (np.sin(2 * np.pi * u / period) > 0) & (u**2 + v**2 <= (1.3 * scale) ** 2)
    fg, bg = rng.uniform(0.6, 1.0), rng.uniform(0.0, 0.3)
    img = np.where(mask, fg, bg)
    return img.reshape(size, ss, size, ss).mean(axis=(1, 3))


def generate_source_task(n: int, seed: int, classes: int = len(SOURCE_CLASSES), size: int = CANONICAL_SIZE):
    """Noiseless shape-classification patches standing in for the pretraining domain.

    Returns ``(patches, labels)`` with ``patches`` of shape ``(n, size, size)``;
    label ``i % classes`` keeps the class histogram balanced to within one.
    """
    if not 2 <= classes <= len(SOURCE_CLASSES):
        raise ValueError(f"classes must be in [2, {len(SOURCE_CLASSES)}]")
    if n < 2 * classes:
        raise ValueError("need at least two patches per class")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    patches = np.stack([_render_shape(rng, int(k), size) for k in labels])
    return patches, labels
