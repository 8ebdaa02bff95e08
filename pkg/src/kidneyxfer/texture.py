"""Haar-like rectangle features over integral images.

The bank enumerates five template families on a 4 px grid with window
sides drawn from {8, 12, 16, 24, 32}:

* ``h2`` / ``v2``: two halves, +1 on the left (top) half, -1 on the other;
* ``h3`` / ``v3``: whole window +1, middle third -3 (window side divisible by 3);
* ``c4``: whole window +1, the two diagonal quadrants -2 each.

Enumeration order is family, then window height, window width, y, x. For a
32x32 patch this gives 1848 features. Every weight set sums to zero over
the covered area, so constant patches respond with exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import CANONICAL_SIZE, Image, IntegralImage, Roi, integral, rect_sum

SCALES = (8, 12, 16, 24, 32)
STRIDE = 4
FAMILIES = ("h2", "v2", "h3", "v3", "c4")


@dataclass(frozen=True)
class HaarFeature:
    family: str
    rects: tuple[tuple[Roi, float], ...]

    @property
    def window(self) -> Roi:
        return self.rects[0][0] if self.family in ("h3", "v3", "c4") else _union(self.rects)


def _union(rects) -> Roi:
    x0 = min(r.x for r, _ in rects)
    y0 = min(r.y for r, _ in rects)
    x1 = max(r.x + r.w for r, _ in rects)
    y1 = max(r.y + r.h for r, _ in rects)
    return Roi(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class HaarBank:
    features: tuple[HaarFeature, ...]
    size: int

    def __len__(self):
        return len(self.features)

    def corner_matrix(self) -> np.ndarray:
        """Map flattened (size+1)^2 integral tables to area-normalized responses.

        Each column holds the signed four-corner coefficients of one feature,
        so ``table.ravel() @ M`` evaluates the whole bank.
        """
        return _corner_matrix(self)


def _templates(family: str, x: int, y: int, w: int, h: int):
    if family == "h2":
        return [(Roi(x, y, w // 2, h), 1.0), (Roi(x + w // 2, y, w // 2, h), -1.0)]
    if family == "v2":
        return [(Roi(x, y, w, h // 2), 1.0), (Roi(x, y + h // 2, w, h // 2), -1.0)]
    if family == "h3":
        return [(Roi(x, y, w, h), 1.0), (Roi(x + w // 3, y, w // 3, h), -3.0)]
    if family == "v3":
        return [(Roi(x, y, w, h), 1.0), (Roi(x, y + h // 3, w, h // 3), -3.0)]
    if family == "c4":
        hw, hh = w // 2, h // 2
        return [(Roi(x, y, w, h), 1.0), (Roi(x + hw, y, hw, hh), -2.0), (Roi(x, y + hh, hw, hh), -2.0)]
    raise ValueError(family)


def _sides(family: str, axis: str, size: int):
    thirds = (family == "h3" and axis == "w") or (family == "v3" and axis == "h")
    return [s for s in SCALES if s <= size and (s % 3 == 0 if thirds else s % 2 == 0)]


def build_bank(size: int = CANONICAL_SIZE) -> HaarBank:
    feats = []
    for fam in FAMILIES:
        for h in _sides(fam, "h", size):
            for w in _sides(fam, "w", size):
                for y in range(0, size - h + 1, STRIDE):
                    for x in range(0, size - w + 1, STRIDE):
                        feats.append(HaarFeature(fam, tuple(_templates(fam, x, y, w, h))))
    return HaarBank(tuple(feats), size)


_BANK_CACHE: dict[int, tuple[HaarBank, np.ndarray]] = {}


def default_bank(size: int = CANONICAL_SIZE) -> HaarBank:
    if size not in _BANK_CACHE:
        bank = build_bank(size)
        _BANK_CACHE[size] = (bank, _corner_matrix(bank))
    return _BANK_CACHE[size][0]


def _corner_matrix(bank: HaarBank) -> np.ndarray:
    cached = _BANK_CACHE.get(bank.size)
    if cached is not None and cached[0] is bank:
        return cached[1]
    n = bank.size + 1
    m = np.zeros((n * n, len(bank)))
    for j, f in enumerate(bank.features):
        norm = 1.0 / f.window.area
        for r, wt in f.rects:
            c = wt * norm
            m[(r.y + r.h) * n + r.x + r.w, j] += c
            m[r.y * n + r.x + r.w, j] -= c
            m[(r.y + r.h) * n + r.x, j] -= c
            m[r.y * n + r.x, j] += c
    return m


def _centered(px: np.ndarray) -> np.ndarray:
    # features are offset-invariant; removing one pixel value makes constant patches exactly zero
    return px - px[..., :1, :1]


def extract_integral(ii: IntegralImage, bank: HaarBank) -> np.ndarray:
    """Evaluate every feature by four-corner rectangle sums on ``ii``."""
    if (ii.width, ii.height) != (bank.size, bank.size):
        raise ValueError(f"integral image is {ii.width}x{ii.height}, bank expects {bank.size}x{bank.size}")
    out = np.empty(len(bank))
    for j, f in enumerate(bank.features):
        out[j] = sum(wt * rect_sum(ii, r) for r, wt in f.rects) / f.window.area
    return out


def extract(patch: Image | np.ndarray, bank: HaarBank) -> np.ndarray:
    """Feature vector of one canonical-size patch."""
    px = np.asarray(getattr(patch, "pixels", patch), dtype=np.float64)
    if px.shape != (bank.size, bank.size):
        raise ValueError(f"patch is {px.shape}, bank expects {bank.size}x{bank.size}")
    return extract_integral(integral(_centered(px)), bank)


def extract_batch(patches: np.ndarray, bank: HaarBank) -> np.ndarray:
    """Vectorized :func:`extract` over ``(n, size, size)`` patches."""
    px = np.asarray(patches, dtype=np.float64)
    if px.ndim != 3 or px.shape[1:] != (bank.size, bank.size):
        raise ValueError(f"expected (n, {bank.size}, {bank.size}) patches, got {px.shape}")
    n = bank.size + 1
    tables = np.zeros((px.shape[0], n, n))
    np.cumsum(np.cumsum(_centered(px), axis=1), axis=2, out=tables[:, 1:, 1:])
    return tables.reshape(px.shape[0], -1) @ bank.corner_matrix()
