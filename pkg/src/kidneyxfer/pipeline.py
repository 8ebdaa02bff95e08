"""Candidate sweep, DSC labeling, likelihood-argmax detection, hybrid fusion and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import convnet, gbm, texture
from .imaging import CANONICAL_SIZE, Image, Roi, crop, dice, dice_many, draw_roi, resample, save_pgm

log = logging.getLogger(__name__)

FAILURE_DICE = 0.80
POSITIVE_DICE = 0.80
METHODS = ("haar", "cnn_fa", "cnn_pa", "cnn_na", "hybrid")
REPORT_HEADER = ["image", "gt_x", "gt_y", "gt_w", "gt_h", "det_x", "det_y", "det_w", "det_h", "likelihood", "confident", "dice"]


class EmptySweepError(ValueError):
    """No admissible candidate size fits the field of view."""


@dataclass(frozen=True)
class SweepConfig:
    length_mm: tuple[float, float] = (75.0, 140.0)
    width_mm: tuple[float, float] = (35.0, 70.0)
    stride: int = 4
    size_steps: int = 4

    def __post_init__(self):
        if self.stride < 1 or self.size_steps < 1:
            raise ValueError("stride and size steps must be at least 1")
        for lo, hi in (self.length_mm, self.width_mm):
            if not 0 < lo <= hi:
                raise ValueError("size ranges must be positive and non-empty")

    @property
    def aspect_bounds(self) -> tuple[float, float]:
        return self.length_mm[0] / self.width_mm[1], self.length_mm[1] / self.width_mm[0]


def _axis_sizes(lo_mm, hi_mm, spacing, steps) -> list[int]:
    lo, hi = math.ceil(lo_mm / spacing - 1e-9), math.floor(hi_mm / spacing + 1e-9)
    if lo > hi:
        return []
    return sorted({int(round(v)) for v in np.linspace(lo, hi, steps)})


def candidate_sizes(image: Image, cfg: SweepConfig) -> list[tuple[int, int]]:
    """``(w, h)`` pairs in pixels: lengths run horizontally, widths vertically."""
    ws = _axis_sizes(*cfg.length_mm, image.spacing, cfg.size_steps)
    hs = _axis_sizes(*cfg.width_mm, image.spacing, cfg.size_steps)
    return [(w, h) for w in ws for h in hs if w <= image.width and h <= image.height]


def sweep_rois(image: Image, cfg: SweepConfig = SweepConfig()) -> np.ndarray:
    """Candidate ROIs as an ``(n, 4)`` int array of ``(x, y, w, h)``.

    Order: position row-major on the stride grid, then size.
    """
    sizes = candidate_sizes(image, cfg)
    if not sizes:
        raise EmptySweepError(f"no kidney-sized candidate fits a {image.width}x{image.height} image at {image.spacing} mm/px")
    min_w = min(w for w, _ in sizes)
    min_h = min(h for _, h in sizes)
    rows = []
    for y in range(0, image.height - min_h + 1, cfg.stride):
        for x in range(0, image.width - min_w + 1, cfg.stride):
            for w, h in sizes:
                if x + w <= image.width and y + h <= image.height:
                    rows.append((x, y, w, h))
    return np.array(rows, dtype=np.int64).reshape(-1, 4)


def extract_patches(image: Image, rois: np.ndarray, size: int = CANONICAL_SIZE) -> np.ndarray:
    """Bilinear ``size`` x ``size`` resampling of every ROI (corner-aligned), vectorized per ROI size."""
    px = image.pixels
    rois = np.asarray(rois)
    out = np.empty((len(rois), size, size))
    dims = rois[:, 2:4]
    for w, h in np.unique(dims, axis=0):
        sel = np.nonzero((dims[:, 0] == w) & (dims[:, 1] == h))[0]
        ry = np.arange(size) * ((h - 1) / (size - 1)) if size > 1 else np.zeros(1)
        rx = np.arange(size) * ((w - 1) / (size - 1)) if size > 1 else np.zeros(1)
        y0f, x0f = np.floor(ry).astype(np.intp), np.floor(rx).astype(np.intp)
        fy, fx = ry - y0f, rx - x0f
        y1f, x1f = np.minimum(y0f + 1, h - 1), np.minimum(x0f + 1, w - 1)
        ys = rois[sel, 1][:, None]
        xs = rois[sel, 0][:, None]
        r0, r1 = (ys + y0f)[:, :, None], (ys + y1f)[:, :, None]
        c0, c1 = (xs + x0f)[:, None, :], (xs + x1f)[:, None, :]
        top = px[r0, c0] * (1 - fx) + px[r0, c1] * fx
        bot = px[r1, c0] * (1 - fx) + px[r1, c1] * fx
        out[sel] = top * (1 - fy)[:, None] + bot * fy[:, None]
    return np.clip(out, 0.0, 1.0)


@dataclass
class Candidate:
    roi: Roi
    patch: Image
    likelihood: float | None = None
    label: int | None = None


def sweep(image: Image, cfg: SweepConfig = SweepConfig()) -> list[Candidate]:
    """Candidates with their canonical-size patches, in sweep order."""
    rois = sweep_rois(image, cfg)
    patches = extract_patches(image, rois)
    return [Candidate(Roi(*r), Image(p, image.spacing * r[2] / CANONICAL_SIZE)) for r, p in zip(rois, patches)]


def candidate_patch(image: Image, roi: Roi) -> Image:
    """Reference (unvectorized) crop-then-resample path for a single ROI."""
    return resample(crop(image, roi), CANONICAL_SIZE, CANONICAL_SIZE)


# -- labeling -------------------------------------------------------------


@dataclass(frozen=True)
class LabelConfig:
    threshold: float = POSITIVE_DICE
    negative_ratio: float = 3.0  # negatives kept per positive; <= 0 keeps all
    max_positives: int = 12  # per image; <= 0 keeps all
    hard_fraction: float = 0.5  # share of negatives drawn from near misses
    hard_dice: float = 0.6  # near miss: hard_dice <= dice < threshold

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")
        if not 0 <= self.hard_fraction <= 1:
            raise ValueError("hard_fraction must lie in [0, 1]")
        if self.hard_fraction > 0 and not 0 <= self.hard_dice < self.threshold:
            raise ValueError("hard_dice must lie below the positive threshold")


def label_rois(rois: np.ndarray, gt: Roi, threshold: float = POSITIVE_DICE) -> np.ndarray:
    """``Y = 1`` iff ``dice(roi, gt) >= threshold``."""
    return (dice_many(rois, gt) >= threshold).astype(np.int64)


def label_candidates(cands: Sequence[Candidate], gt: Roi, threshold: float = POSITIVE_DICE) -> list[Candidate]:
    for c in cands:
        c.label = int(dice(c.roi, gt) >= threshold)
    return list(cands)


def select_training(dices: np.ndarray, cfg: LabelConfig, rng: np.random.Generator) -> np.ndarray:
    """Indices kept for training, in sweep order.

    Positives are capped at ``max_positives``. Negatives number
    ``negative_ratio`` per kept positive; ``hard_fraction`` of them come from
    near misses (``hard_dice <= dice < threshold``) and the rest from the
    remaining negatives. Uniform random negatives are almost all far from
    the kidney, which teaches nothing about tight versus loose boxes.
    """
    dices = np.asarray(dices, dtype=np.float64)
    positive = dices >= cfg.threshold
    pos = np.nonzero(positive)[0]
    neg = np.nonzero(~positive)[0]
    if cfg.max_positives > 0 and len(pos) > cfg.max_positives:
        pos = rng.choice(pos, cfg.max_positives, replace=False)
    if cfg.negative_ratio > 0:
        k = int(round(cfg.negative_ratio * max(len(pos), 1)))
        if cfg.hard_fraction > 0:
            near = ~positive & (dices >= cfg.hard_dice)
            hard, easy = np.nonzero(near)[0], np.nonzero(~positive & ~near)[0]
            kh = min(len(hard), int(round(cfg.hard_fraction * k)))
            neg = np.concatenate([rng.choice(hard, kh, replace=False), rng.choice(easy, min(len(easy), k - kh), replace=False)])
        else:
            neg = rng.choice(neg, min(len(neg), k), replace=False)
    return np.sort(np.concatenate([pos, neg]))


# -- featurizers and scoring ---------------------------------------------

Featurizer = Callable[[np.ndarray, np.ndarray], np.ndarray]


class HaarFeaturizer:
    name = "haar"

    def __init__(self, bank: texture.HaarBank | None = None):
        self.bank = bank or texture.default_bank()

    def __call__(self, patches: np.ndarray, rois: np.ndarray | None = None) -> np.ndarray:
        out = np.empty((len(patches), len(self.bank)))
        for i in range(0, len(patches), 2048):
            out[i : i + 2048] = texture.extract_batch(patches[i : i + 2048], self.bank)
        return out


class CnnFeaturizer:
    def __init__(self, net: convnet.ConvNet, name: str = "cnn"):
        self.net = net
        self.name = name

    def __call__(self, patches: np.ndarray, rois: np.ndarray | None = None) -> np.ndarray:
        return convnet.extract_features(self.net, patches)


@dataclass
class Likelihoods:
    """Per-candidate likelihoods ``l`` with their complements ``q = 1 - l``.

    ``q`` is computed directly from the model score, so candidates whose ``l``
    rounds to 1.0 still rank correctly.
    """

    l: np.ndarray
    q: np.ndarray

    def __len__(self):
        return len(self.l)

    @classmethod
    def from_scores(cls, f: np.ndarray) -> "Likelihoods":
        f = np.asarray(f, dtype=np.float64)
        return cls(gbm.sigmoid(f), gbm.sigmoid(-f))

    @classmethod
    def from_values(cls, lik) -> "Likelihoods":
        lik = np.asarray(lik, dtype=np.float64)
        return cls(lik, 1.0 - lik)


def likelihoods(model, features: np.ndarray) -> Likelihoods:
    """``L`` for every row: a :class:`gbm.GbmModel` or any callable returning likelihoods."""
    if isinstance(model, gbm.GbmModel):
        return Likelihoods.from_scores(model.decision_function(features))
    return Likelihoods.from_values(model(features))


def fuse(a, b):
    """Average two likelihood tables over the same candidates."""
    if isinstance(a, Likelihoods) or isinstance(b, Likelihoods):
        a, b = _as_table(a), _as_table(b)
        return Likelihoods((a.l + b.l) / 2.0, (a.q + b.q) / 2.0)
    return (np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)) / 2.0


def _as_table(lik) -> Likelihoods:
    return lik if isinstance(lik, Likelihoods) else Likelihoods.from_values(lik)


@dataclass
class DetectionResult:
    roi: Roi
    likelihood: float
    confident: bool
    rois: np.ndarray = field(repr=False)
    likelihoods: np.ndarray = field(repr=False)


def select_detection(rois: np.ndarray, lik) -> DetectionResult:
    """Argmax of ``L`` over candidates with ``L >= 0.5``; over all candidates when none qualifies.

    Ties resolve to the earliest candidate in sweep order.
    """
    table = _as_table(lik)
    if len(rois) == 0:
        raise EmptySweepError("no candidates to choose from")
    if len(table) != len(rois):
        raise ValueError(f"{len(table)} likelihoods for {len(rois)} candidates")
    positive = table.l >= 0.5
    confident = bool(positive.any())
    pool = np.nonzero(positive)[0] if confident else np.arange(len(rois))
    # highest l, then lowest q, then earliest
    order = np.lexsort((pool, table.q[pool], -table.l[pool]))
    i = int(pool[order[0]])
    return DetectionResult(Roi(*rois[i]), float(table.l[i]), confident, np.asarray(rois), table.l)


def detect(image: Image, cfg: SweepConfig, featurizer: Featurizer, model) -> DetectionResult:
    rois = sweep_rois(image, cfg)
    patches = extract_patches(image, rois)
    return select_detection(rois, likelihoods(model, featurizer(patches, rois)))


def hybrid_detect(image: Image, cfg: SweepConfig, a: tuple[Featurizer, object], b: tuple[Featurizer, object]) -> DetectionResult:
    """Detect on the average of two likelihood tables over the same sweep."""
    rois = sweep_rois(image, cfg)
    patches = extract_patches(image, rois)
    la = likelihoods(a[1], a[0](patches, rois))
    lb = likelihoods(b[1], b[0](patches, rois))
    return select_detection(rois, fuse(la, lb))


# -- evaluation -----------------------------------------------------------


@dataclass
class ImageResult:
    image: str
    gt: Roi
    detected: Roi
    likelihood: float
    confident: bool
    dice: float


@dataclass
class DetectionReport:
    method: str
    results: list[ImageResult]

    @property
    def dices(self) -> np.ndarray:
        return np.array([r.dice for r in self.results])

    @property
    def average_dice(self) -> float:
        return float(self.dices.mean()) if self.results else 0.0

    @property
    def failures(self) -> int:
        return int(np.sum(self.dices < FAILURE_DICE))

    def summary(self) -> str:
        return f"avg_dice={self.average_dice!r},failures={self.failures}"


def evaluate(detections: Sequence, gts: Sequence[Roi], method: str = "", names: Sequence[str] | None = None) -> DetectionReport:
    """Average Dice and failure count (Dice strictly below 0.80)."""
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detections for {len(gts)} ground truths")
    names = names or [str(i) for i in range(len(gts))]
    results = []
    for name, det, gt in zip(names, detections, gts):
        if isinstance(det, DetectionResult):
            roi, lik, conf = det.roi, det.likelihood, det.confident
        else:
            roi, lik, conf = det, 1.0, True
        results.append(ImageResult(name, gt, roi, lik, conf, dice(roi, gt)))
    return DetectionReport(method, results)


def write_report(path: str, report: DetectionReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.results:
            w.writerow([r.image, *r.gt.as_tuple(), *r.detected.as_tuple(), repr(r.likelihood), int(r.confident), repr(r.dice)])
        fh.write(f"# method={report.method},{report.summary()}\n")


def read_report(path: str) -> DetectionReport:
    method = ""
    results = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split(",") != REPORT_HEADER:
        raise ValueError(f"{path}: not a detection report")
    for line in lines[1:]:
        if line.startswith("#"):
            for part in line[1:].strip().split(","):
                if part.startswith("method="):
                    method = part[len("method=") :]
            continue
        f = next(csv.reader([line]))
        gt, det = Roi(*map(int, f[1:5])), Roi(*map(int, f[5:9]))
        results.append(ImageResult(f[0], gt, det, float(f[9]), f[10] == "1", dice(det, gt)))
    return DetectionReport(method, results)


# -- experiment -----------------------------------------------------------


# single-row leaves let a confidently misfit row take a near-infinite Newton step
EXPERIMENT_GBM = gbm.GbmConfig(min_samples_leaf=10)


@dataclass(frozen=True)
class ExperimentConfig:
    sweep: SweepConfig = SweepConfig()
    labels: LabelConfig = LabelConfig()
    adapt: convnet.TrainConfig = convnet.TrainConfig()
    gbm: gbm.GbmConfig = EXPERIMENT_GBM
    seed: int = 0


def training_set(manifest, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Labeled, subsampled training patches pooled over every image in ``manifest``."""
    xs, ys = [], []
    for i, (img, gt) in enumerate(manifest.samples()):
        rois = sweep_rois(img, cfg.sweep)
        d = dice_many(rois, gt)
        y = (d >= cfg.labels.threshold).astype(np.int64)
        keep = select_training(d, cfg.labels, np.random.default_rng((cfg.seed, i)))
        xs.append(extract_patches(img, rois[keep]))
        ys.append(y[keep])
    return np.concatenate(xs), np.concatenate(ys)


class Experiment:
    """Shared state for comparing methods on one train/validation split.

    Training patches, validation sweeps, adapted networks, fitted models and
    likelihood tables are computed once and reused, so every method (and the
    hybrid) scores the identical candidate sets.
    """

    def __init__(self, train, val, cfg: ExperimentConfig = ExperimentConfig(), source_net: convnet.ConvNet | None = None):
        self.train, self.val, self.cfg, self.source_net = train, val, cfg, source_net
        self._train_set = None
        self._nets: dict[str, convnet.ConvNet] = {}
        self._models: dict[str, gbm.GbmModel] = {}
        self._tables: dict[str, list[np.ndarray]] = {}
        self._haar = HaarFeaturizer()

    def training_set(self):
        if self._train_set is None:
            self._train_set = training_set(self.train, self.cfg)
            x, y = self._train_set
            log.info("training set: %d patches, %d positive", len(y), int(y.sum()))
        return self._train_set

    def network(self, regime: str) -> convnet.ConvNet:
        regime = regime.upper()
        if regime not in self._nets:
            if self.source_net is None:
                raise ValueError("cnn methods need a pretrained source network")
            x, y = self.training_set()
            self._nets[regime] = convnet.adapt(self.source_net, regime, x, y, self.cfg.adapt)
        return self._nets[regime]

    def featurizer(self, method: str):
        if method == "haar":
            return self._haar
        if method.startswith("cnn_"):
            return CnnFeaturizer(self.network(method[4:]), method)
        raise ValueError(f"no featurizer for method {method!r}")

    def model(self, method: str) -> gbm.GbmModel:
        if method not in self._models:
            x, y = self.training_set()
            self._models[method] = gbm.fit(self.featurizer(method)(x), y, self.cfg.gbm)
        return self._models[method]

    def likelihood_tables(self, method: str) -> list[np.ndarray]:
        if method not in self._tables:
            if method == "hybrid":
                self._tables[method] = [fuse(a, b) for a, b in zip(self.likelihood_tables("haar"), self.likelihood_tables("cnn_fa"))]
            else:
                feat, model = self.featurizer(method), self.model(method)
                tables = []
                for img, _ in self.val.samples():
                    rois = sweep_rois(img, self.cfg.sweep)
                    tables.append(likelihoods(model, feat(extract_patches(img, rois), rois)))
                self._tables[method] = tables
        return self._tables[method]

    def detections(self, method: str) -> list[DetectionResult]:
        out = []
        for (img, _), lik in zip(self.val.samples(), self.likelihood_tables(method)):
            out.append(select_detection(sweep_rois(img, self.cfg.sweep), lik))
        return out

    def report(self, method: str) -> DetectionReport:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        dets = self.detections(method)
        gts = [e.roi for e in self.val.entries]
        return evaluate(dets, gts, method, [e.path for e in self.val.entries])


def run_experiment(train, val, method: str, cfg: ExperimentConfig = ExperimentConfig(), source_net: convnet.ConvNet | None = None) -> DetectionReport:
    """Full chain for one method: sweep and label training images, featurize, fit, detect, evaluate."""
    return Experiment(train, val, cfg, source_net).report(method)


def write_overlays(out_dir: str, val, report: DetectionReport) -> list[str]:
    """One PGM per validation image with the detected ROI border burned in at 1.0."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for (img, _), r in zip(val.samples(), report.results):
        path = os.path.join(out_dir, f"{report.method}_{os.path.splitext(os.path.basename(r.image))[0]}.pgm")
        save_pgm(path, draw_roi(img, r.detected))
        paths.append(path)
    return paths
