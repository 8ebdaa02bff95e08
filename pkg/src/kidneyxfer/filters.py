"""Hand-engineered reference filters: Gaussian Hessians, Frangi vesselness, phase congruency."""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .convnet import ConvNet, response_maps
from .imaging import Image, resample_array, save_pgm

INTERIOR_MARGIN = 5
# Hessian norms below this are rounding noise (intensities live in [0, 1])
STRUCTURE_FLOOR = 1e-10


def dft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2-D DFT, ``X[u, v] = sum x[m, n] exp(-2j pi (um/M + vn/N))``."""
    return np.fft.fft2(np.asarray(x))


def idft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft2` (carries the ``1/(MN)`` factor)."""
    return np.fft.ifft2(np.asarray(spectrum))


# -- Gaussian derivatives -------------------------------------------------


def gaussian_kernels(sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampled correlation kernels for smoothing, first and second derivative.

    Moments are fixed exactly on the integer grid: the smoother sums to 1,
    the first-derivative kernel has zero sum and unit first moment, the
    second-derivative kernel has zero sum and second moment 2, so linear
    and quadratic ramps are differentiated exactly.
    """
    radius = int(np.ceil(4 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (k / sigma) ** 2)
    g /= g.sum()
    d1 = k * g / sigma**2
    d1 /= (k * d1).sum()
    d2 = (k**2 / sigma**2 - 1) * g / sigma**2
    d2 -= d2.sum() * g
    d2 *= 2.0 / (k**2 * d2).sum()
    return g, d1, d2


def gaussian_hessian(image, sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scale-normalized (sigma^2) second derivatives ``(Lxx, Lxy, Lyy)``; x runs along columns."""
    px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if sigma > min(px.shape) / 2:
        raise ValueError(f"sigma {sigma} too large for a {px.shape[1]}x{px.shape[0]} image")
    g, d1, d2 = gaussian_kernels(sigma)

    def sep(row_kernel, col_kernel):
        tmp = ndimage.correlate1d(px, col_kernel, axis=1, mode="reflect")
        return ndimage.correlate1d(tmp, row_kernel, axis=0, mode="reflect")

    s2 = sigma**2
    return s2 * sep(g, d2), s2 * sep(d1, d1), s2 * sep(d2, g)


def gaussian_smooth(image, sigma: float) -> np.ndarray:
    px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    g = gaussian_kernels(sigma)[0]
    return ndimage.correlate1d(ndimage.correlate1d(px, g, axis=1, mode="reflect"), g, axis=0, mode="reflect")


# -- Frangi ---------------------------------------------------------------


@dataclass(frozen=True)
class FrangiConfig:
    scales: tuple[float, ...] = (1.0, 2.0, 4.0)
    beta: float = 0.5
    c: float | None = None  # None: half the largest Hessian norm at each scale
    bright: bool = True

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if not self.beta > 0 or (self.c is not None and not self.c > 0):
            raise ValueError("beta and c must be positive")


def hessian_eigenvalues(lxx, lxy, lyy):
    """Eigenvalues ordered so that ``|l1| <= |l2|``."""
    root = np.sqrt((lxx - lyy) ** 2 + 4 * lxy**2)
    mu1 = 0.5 * (lxx + lyy + root)
    mu2 = 0.5 * (lxx + lyy - root)
    swap = np.abs(mu1) > np.abs(mu2)
    return np.where(swap, mu2, mu1), np.where(swap, mu1, mu2)


def frangi(image, cfg: FrangiConfig = FrangiConfig()) -> np.ndarray:
    """Multi-scale vesselness; bright ridges on a dark background by default."""
    px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    out = np.zeros_like(px)
    for sigma in cfg.scales:
        l1, l2 = hessian_eigenvalues(*gaussian_hessian(px, sigma))
        s = np.sqrt(l1**2 + l2**2)
        c = cfg.c if cfg.c is not None else 0.5 * s.max()
        if c <= STRUCTURE_FLOOR:
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            rb = np.where(l2 != 0, l1 / l2, 0.0)
        v = np.exp(-(rb**2) / (2 * cfg.beta**2)) * (1 - np.exp(-(s**2) / (2 * c**2)))
        wrong_polarity = l2 > 0 if cfg.bright else l2 < 0
        v[wrong_polarity | (s <= STRUCTURE_FLOOR)] = 0.0
        np.maximum(out, v, out=out)
    return np.clip(out, 0.0, 1.0)


# -- phase congruency -----------------------------------------------------


@dataclass(frozen=True)
class PhaseCongruencyConfig:
    scales: int = 4
    orientations: int = 6
    min_wavelength: float = 3.0
    mult: float = 2.1
    sigma_onf: float = 0.55
    noise_threshold: float | None = None  # None: estimate from the smallest scale
    noise_k: float = 2.0
    cutoff: float = 0.5
    gain: float = 10.0
    epsilon: float = 1e-4

    def __post_init__(self):
        if self.scales < 2 or self.orientations < 2:
            raise ValueError("need at least 2 scales and 2 orientations")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.noise_threshold is not None and self.noise_threshold < 0:
            raise ValueError("noise threshold must be non-negative")

    @property
    def angular_sigma(self) -> float:
        return np.pi / (2 * self.orientations)


def _log_gabor_bank(shape, cfg: PhaseCongruencyConfig):
    rows, cols = shape
    fy = np.fft.fftfreq(rows)[:, None]
    fx = np.fft.fftfreq(cols)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    radius[0, 0] = 1.0
    theta = np.arctan2(-fy, fx)
    lowpass = 1.0 / (1.0 + (radius / 0.45) ** 30)
    radial = []
    for s in range(cfg.scales):
        fo = 1.0 / (cfg.min_wavelength * cfg.mult**s)
        lg = np.exp(-(np.log(radius / fo) ** 2) / (2 * np.log(cfg.sigma_onf) ** 2)) * lowpass
        lg[0, 0] = 0.0
        radial.append(lg)
    angular = []
    for o in range(cfg.orientations):
        ang = o * np.pi / cfg.orientations
        ds = np.sin(theta) * np.cos(ang) - np.cos(theta) * np.sin(ang)
        dc = np.cos(theta) * np.cos(ang) + np.sin(theta) * np.sin(ang)
        dtheta = np.abs(np.arctan2(ds, dc))
        angular.append(np.exp(-(dtheta**2) / (2 * cfg.angular_sigma**2)))
    return radial, angular


def phase_congruency(image, cfg: PhaseCongruencyConfig = PhaseCongruencyConfig()) -> np.ndarray:
    """Log-Gabor phase congruency summed over orientations, in [0, 1].

    The image is reduced to zero mean and unit RMS before filtering, so with
    a zero noise threshold the map is invariant to contrast scaling and to
    brightness offsets.
    """
    px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    if min(px.shape) < 8:
        raise ValueError("phase congruency needs images of at least 8x8")
    x = px - px.mean()
    rms = np.sqrt(np.mean(x**2))
    if rms > 0:
        x = x / rms
    spectrum = dft2(x)
    radial, angular = _log_gabor_bank(px.shape, cfg)
    eps = cfg.epsilon
    total_energy = np.zeros_like(px)
    total_amp = np.zeros_like(px)
    for spread in angular:
        responses = [idft2(spectrum * (lg * spread)) for lg in radial]
        amps = [np.abs(eo) for eo in responses]
        sum_e = sum(eo.real for eo in responses)
        sum_o = sum(eo.imag for eo in responses)
        sum_an = sum(amps)
        max_an = np.maximum.reduce(amps)
        norm = np.sqrt(sum_e**2 + sum_o**2) + eps
        mean_e, mean_o = sum_e / norm, sum_o / norm
        energy = np.zeros_like(px)
        for eo in responses:
            e, o = eo.real, eo.imag
            energy += e * mean_e + o * mean_o - np.abs(e * mean_o - o * mean_e)
        if cfg.noise_threshold is None:
            tau = np.median(amps[0]) / np.sqrt(np.log(4))
            total_tau = tau * (1 - (1 / cfg.mult) ** cfg.scales) / (1 - 1 / cfg.mult)
            t = total_tau * np.sqrt(np.pi / 2) + cfg.noise_k * total_tau * np.sqrt((4 - np.pi) / 2)
        else:
            t = cfg.noise_threshold
        energy = np.maximum(energy - t, 0.0)
        width = (sum_an / (max_an + eps) - 1) / (cfg.scales - 1)
        weight = 1.0 / (1.0 + np.exp((cfg.cutoff - width) * cfg.gain))
        total_energy += weight * energy
        total_amp += sum_an
    return np.clip(total_energy / (total_amp + eps), 0.0, 1.0)


# -- comparison with network responses -----------------------------------


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """Correlation of two flattened maps, or ``None`` if either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    da, db = np.sqrt(a @ a), np.sqrt(b @ b)
    if da == 0 or db == 0:
        return None
    return float(np.clip(a @ b / (da * db), -1.0, 1.0))


@dataclass
class ResponseComparison:
    maps: dict[str, np.ndarray]
    correlations: list[tuple[str, str, float | None]]

    def correlation(self, a: str, b: str) -> float | None:
        for x, y, r in self.correlations:
            if {x, y} == {a, b}:
                return r
        raise KeyError((a, b))


def _interior(m: np.ndarray, margin: int) -> np.ndarray:
    if min(m.shape) > 2 * margin:
        return m[margin:-margin, margin:-margin]
    return m


def correlation_table(maps: dict[str, np.ndarray], margin: int = INTERIOR_MARGIN):
    names = list(maps)
    return [(a, b, pearson(_interior(maps[a], margin), _interior(maps[b], margin))) for a, b in itertools.combinations(names, 2)]


def compare_responses(
    net: ConvNet,
    patch,
    layer: int,
    frangi_cfg: FrangiConfig = FrangiConfig(),
    pc_cfg: PhaseCongruencyConfig = PhaseCongruencyConfig(),
    margin: int = INTERIOR_MARGIN,
) -> ResponseComparison:
    """Network filter responses of conv layer ``layer`` (0-based) next to Frangi and PC maps.

    All maps are brought to the patch size; correlations skip a ``margin``
    pixel border.
    """
    px = np.asarray(getattr(patch, "pixels", patch), dtype=np.float64)
    h, w = px.shape
    maps = {}
    for j, m in enumerate(response_maps(net, px, layer)):
        maps[f"L{layer + 1}_{j + 1}"] = np.clip(resample_array(m, h, w), 0.0, 1.0)
    maps["frangi"] = frangi(px, frangi_cfg)
    maps["phase_congruency"] = phase_congruency(px, pc_cfg)
    return ResponseComparison(maps, correlation_table(maps, margin))


def write_panel(out_dir: str, comparison: ResponseComparison, prefix: str = "") -> list[str]:
    """Write one PGM per map and return the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, m in comparison.maps.items():
        path = os.path.join(out_dir, f"{prefix}{name}.pgm")
        save_pgm(path, Image(np.clip(m, 0.0, 1.0)))
        paths.append(path)
    return paths


def write_correlations(path: str, comparison: ResponseComparison) -> None:
    """CSV ``name_a,name_b,pearson``; undefined correlations leave the field empty."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name_a,name_b,pearson\n")
        for a, b, r in comparison.correlations:
            fh.write(f"{a},{b},{'' if r is None else repr(r)}\n")
