"""Binary gradient boosting with shallow regression trees and logistic loss."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

MAGIC = b"SDGBM1"
HESSIAN_FLOOR = 1e-12
BASE_RATE_CLIP = 1e-6


@dataclass(frozen=True)
class GbmConfig:
    shrinkage: float = 0.5
    sampling: float = 0.5
    max_depth: int = 2
    iterations: int = 200
    seed: int = 0
    min_samples_leaf: int = 1

    def __post_init__(self):
        if not 0 < self.shrinkage <= 1:
            raise ValueError("shrinkage must lie in (0, 1]")
        if not 0 < self.sampling <= 1:
            raise ValueError("sampling must lie in (0, 1]")
        if self.max_depth < 1 or self.iterations < 1 or self.min_samples_leaf < 1:
            raise ValueError("depth, iterations and min_samples_leaf must be at least 1")


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature[i] < 0`` marks a leaf holding ``value[i]``.

    Samples with ``x[feature] <= threshold`` go to ``left``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        node = np.zeros(x.shape[0], dtype=np.intp)
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                return self.value[node]
            rows = np.nonzero(internal)[0]
            go_left = x[rows, feat[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    @property
    def depth(self) -> int:
        def _d(i):
            return 0 if self.feature[i] < 0 else 1 + max(_d(self.left[i]), _d(self.right[i]))

        return _d(0)


@dataclass
class GbmModel:
    f0: float
    shrinkage: float
    trees: list[RegressionTree] = field(default_factory=list)
    n_features: int = 0
    config: GbmConfig = field(default_factory=GbmConfig)

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        f = np.full(x.shape[0], self.f0)
        for t in self.trees:
            f += self.shrinkage * t.predict(x)
        return f


def sigmoid(f):
    # expit keeps full relative precision in both tails
    return expit(np.asarray(f, dtype=np.float64))


def predict(model: GbmModel, x: np.ndarray) -> np.ndarray | float:
    """Likelihood ``sigmoid(F0 + sum shrinkage * tree(x))``; a 1-D input gives a scalar."""
    p = sigmoid(model.decision_function(x))
    # keep strictly inside (0, 1) even when the score saturates the float grid
    p = np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return float(p[0]) if np.asarray(x).ndim == 1 else p


def log_loss(y: np.ndarray, f: np.ndarray) -> float:
    """Mean logistic loss for scores ``f`` (numerically stable)."""
    return float(np.mean(np.logaddexp(0.0, f) - y * f))


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


@njit(cache=True)
def _scan(xs, order, r, member, min_leaf):
    """One pass over every feature's presorted rows, scoring cuts between distinct member values.

    Returns ``(feature, threshold, gain)``; ``feature == -1`` when no cut is
    admissible. A candidate must beat the incumbent by a relative 1e-12, so
    gains that are equal up to summation-order rounding keep the lowest
    feature, then the lowest threshold.
    """
    d, n = xs.shape
    total = 0.0
    count = 0
    for i in range(n):
        if member[i]:
            total += r[i]
            count += 1
    base = total * total / max(count, 1)
    best_f, best_t, best_g = -1, 0.0, -np.inf
    for f in range(d):
        csum = 0.0
        nl = 0
        prev = 0.0
        for j in range(n):
            row = order[f, j]
            if not member[row]:
                continue
            v = xs[f, j]
            if nl >= min_leaf and count - nl >= min_leaf and v > prev:
                rest = total - csum
                g = csum * csum / nl + rest * rest / (count - nl)
                if best_f < 0 or g > best_g + 1e-12 * abs(best_g):
                    best_f, best_t, best_g = f, 0.5 * (prev + v), g
            csum += r[row]
            nl += 1
            prev = v
    return best_f, best_t, best_g - base, base


def _search(xs, order, r, member, min_leaf) -> Split | None:
    f, t, g, base = _scan(xs, order, r, member, min_leaf)
    if f < 0 or not g > 1e-12 * max(1.0, base):
        return None
    return Split(int(f), float(t), float(g))


def split_search(x: np.ndarray, residuals: np.ndarray, hessians=None, min_samples_leaf: int = 1) -> Split | None:
    """Exhaustive best split by residual variance reduction.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values of every feature. Ties go to the lower feature index, then the
    lower threshold. Returns ``None`` when no split has positive gain (for
    example when every row is identical). ``hessians`` is accepted for
    interface symmetry; leaf values, not split choice, use it.
    """
    xt = np.ascontiguousarray(np.asarray(x, dtype=np.float64).T)
    r = np.ascontiguousarray(residuals, dtype=np.float64)
    if xt.shape[1] < 2:
        return None
    order = np.argsort(xt, axis=1, kind="stable")
    xs = np.take_along_axis(xt, order, axis=1)
    return _search(xs, order, r, np.ones(xt.shape[1], dtype=np.bool_), min_samples_leaf)


def _fit_tree(xt, r, hess, depth, min_leaf, order, xs, rows) -> RegressionTree:
    """Grow one tree on ``rows``.

    ``xt`` is the (d, n) feature matrix, ``order`` its row-wise argsort and
    ``xs`` the correspondingly sorted values.
    """
    n = xt.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(node_rows, level):
        idx = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(r[node_rows].sum() / max(hess[node_rows].sum(), HESSIAN_FLOOR)))
        if level >= depth or len(node_rows) < max(2, 2 * min_leaf):
            return idx
        member = np.zeros(n, dtype=np.bool_)
        member[node_rows] = True
        sp = _search(xs, order, r, member, min_leaf)
        if sp is None:
            return idx
        feature[idx], threshold[idx] = sp.feature, sp.threshold
        mask = xt[sp.feature, node_rows] <= sp.threshold
        left[idx] = grow(node_rows[mask], level + 1)
        right[idx] = grow(node_rows[~mask], level + 1)
        return idx

    grow(np.asarray(rows), 0)
    return RegressionTree(
        np.array(feature, dtype=np.intp),
        np.array(threshold),
        np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp),
        np.array(value),
    )


def subsample_rows(n: int, cfg: GbmConfig, iteration: int) -> np.ndarray:
    """Rows drawn without replacement for one boosting iteration, sorted."""
    k = math.ceil(cfg.sampling * n)
    if k >= n:
        return np.arange(n)
    rng = np.random.default_rng(cfg.seed + iteration)
    return np.sort(rng.choice(n, size=k, replace=False))


def fit(features: np.ndarray, labels: np.ndarray, cfg: GbmConfig = GbmConfig(), monitor=None) -> GbmModel:
    """Logistic-loss boosting with Newton leaf values.

    ``monitor(iteration, train_log_loss)`` is called after every stage when
    given.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be (n, d) with n labels")
    n, d = x.shape
    if d < 1:
        raise ValueError("need at least one feature")
    if n < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary 0/1")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    pbar = min(max(y.mean(), BASE_RATE_CLIP), 1 - BASE_RATE_CLIP)
    f0 = math.log(pbar / (1 - pbar))
    model = GbmModel(f0, cfg.shrinkage, [], d, cfg)
    f = np.full(n, f0)
    xt = np.ascontiguousarray(x.T)
    order = np.argsort(xt, axis=1, kind="stable")
    xs = np.take_along_axis(xt, order, axis=1)
    for it in range(cfg.iterations):
        rows = subsample_rows(n, cfg, it)
        p = sigmoid(f)
        resid = y - p
        hess = p * (1 - p)
        tree = _fit_tree(xt, resid, hess, cfg.max_depth, cfg.min_samples_leaf, order, xs, rows)
        model.trees.append(tree)
        f += cfg.shrinkage * tree.predict(x)
        if monitor is not None:
            monitor(it, log_loss(y, f))
    return model


# -- persistence ----------------------------------------------------------


def dumps(model: GbmModel) -> bytes:
    cfg = model.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<dd3iqi", cfg.shrinkage, cfg.sampling, cfg.max_depth, cfg.iterations, cfg.min_samples_leaf, cfg.seed, 0))
    buf.write(struct.pack("<ddII", model.f0, model.shrinkage, model.n_features, len(model.trees)))
    for t in model.trees:
        buf.write(struct.pack("<I", len(t.feature)))
        buf.write(np.asarray(t.feature, dtype="<i4").tobytes())
        buf.write(np.asarray(t.threshold, dtype="<f8").tobytes())
        buf.write(np.asarray(t.left, dtype="<i4").tobytes())
        buf.write(np.asarray(t.right, dtype="<i4").tobytes())
        buf.write(np.asarray(t.value, dtype="<f8").tobytes())
    return buf.getvalue()


def _take(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("truncated GBM model file")
    return data


def loads(data: bytes) -> GbmModel:
    if data[:5] != MAGIC[:5]:
        raise ValueError("not an SDGBM model file")
    if data[:6] != MAGIC:
        raise ValueError(f"unsupported SDGBM version {data[5:6]!r}")
    buf = io.BytesIO(data[6:])
    shrink, samp, depth, iters, min_leaf, seed, _ = struct.unpack("<dd3iqi", _take(buf, struct.calcsize("<dd3iqi")))
    cfg = GbmConfig(shrink, samp, depth, iters, seed, min_leaf)
    f0, shrinkage, n_features, n_trees = struct.unpack("<ddII", _take(buf, 24))
    trees = []
    for _ in range(n_trees):
        (k,) = struct.unpack("<I", _take(buf, 4))
        feat = np.frombuffer(_take(buf, 4 * k), dtype="<i4").astype(np.intp)
        thr = np.frombuffer(_take(buf, 8 * k), dtype="<f8").astype(np.float64)
        left = np.frombuffer(_take(buf, 4 * k), dtype="<i4").astype(np.intp)
        right = np.frombuffer(_take(buf, 4 * k), dtype="<i4").astype(np.intp)
        val = np.frombuffer(_take(buf, 8 * k), dtype="<f8").astype(np.float64)
        trees.append(RegressionTree(feat, thr, left, right, val))
    if buf.read(1):
        raise ValueError("trailing bytes in GBM model file")
    return GbmModel(f0, shrinkage, trees, n_features, cfg)


def save(path, model: GbmModel) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path) -> GbmModel:
    with open(path, "rb") as fh:
        return loads(fh.read())
