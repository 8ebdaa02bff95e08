"""A small convolutional network in plain numpy.

Each conv layer computes ``G_j = pool(relu(sum_k P_k (*) v_jk + b_j))`` with a
valid correlation, ReLU and 2x2/stride-2 max pooling. The fixed desk-scale
stack is conv(5x5, 8) -> conv(5x5, 16) -> conv(3x3, 32) -> fc_feat(64, ReLU)
-> fc_out(classes). Everything runs in float64.
"""

from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import CANONICAL_SIZE

MAGIC = b"SDNET1"
CONV_NAMES = ("conv1", "conv2", "conv3")
REGIMES = ("FA", "PA", "NA")


@dataclass
class ConvLayer:
    weights: np.ndarray  # (M, N, s1, s2)
    bias: np.ndarray  # (M,)
    frozen: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        m, n, s1, s2 = self.weights.shape
        if m < 1 or n < 1 or s1 % 2 == 0 or s2 % 2 == 0:
            raise ValueError(f"bad conv kernel shape {self.weights.shape}")
        if self.bias.shape != (m,):
            raise ValueError("bias length must equal filter count")

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    relu: bool = True
    frozen: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("dense weights must be (out, in) with matching bias")


@dataclass
class ConvNet:
    convs: list[ConvLayer]
    fc_feat: DenseLayer
    fc_out: DenseLayer
    input_size: int = CANONICAL_SIZE

    def __post_init__(self):
        n, size = 1, self.input_size
        for layer in self.convs:
            m, k, s1, s2 = layer.weights.shape
            if k != n:
                raise ValueError("conv layer input maps do not chain")
            size = (size - s1 + 1) // 2
            if size < 1:
                raise ValueError("input too small for conv stack")
            n = m
        if self.fc_feat.weights.shape[1] != n * size * size:
            raise ValueError("fc_feat input does not match flattened conv output")
        if self.fc_out.weights.shape[1] != self.fc_feat.weights.shape[0]:
            raise ValueError("fc_out input does not match feature dimension")

    @property
    def layers(self) -> list:
        return [*self.convs, self.fc_feat, self.fc_out]

    @property
    def layer_names(self) -> list[str]:
        return [*CONV_NAMES[: len(self.convs)], "fc_feat", "fc_out"]

    @property
    def n_classes(self) -> int:
        return self.fc_out.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.fc_feat.weights.shape[0]

    def frozen_flags(self) -> list[bool]:
        return [layer.frozen for layer in self.layers]

    def set_frozen(self, flags) -> None:
        for layer, f in zip(self.layers, flags):
            layer.frozen = bool(f)

    def params(self):
        """Yield ``(key, array)`` for every parameter array, in a fixed order."""
        for name, layer in zip(self.layer_names, self.layers):
            yield f"{name}.weights", layer.weights
            yield f"{name}.bias", layer.bias

    def copy(self) -> "ConvNet":
        return copy.deepcopy(self)


def init_convnet(seed: int, n_classes: int, feature_dim: int = 64, input_size: int = CANONICAL_SIZE) -> ConvNet:
    """He-normal initialization of the default architecture."""
    rng = np.random.default_rng(seed)
    specs = [(8, 1, 5), (16, 8, 5), (32, 16, 3)]
    convs, size = [], input_size
    for m, n, s in specs:
        w = rng.standard_normal((m, n, s, s)) * np.sqrt(2.0 / (n * s * s))
        convs.append(ConvLayer(w, np.zeros(m)))
        size = (size - s + 1) // 2
    flat = specs[-1][0] * size * size
    fc_feat = DenseLayer(rng.standard_normal((feature_dim, flat)) * np.sqrt(2.0 / flat), np.zeros(feature_dim), relu=True)
    fc_out = _init_head(rng, n_classes, feature_dim)
    return ConvNet(convs, fc_feat, fc_out, input_size)


def _init_head(rng, n_classes, feature_dim) -> DenseLayer:
    w = rng.standard_normal((n_classes, feature_dim)) * np.sqrt(1.0 / feature_dim)
    return DenseLayer(w, np.zeros(n_classes), relu=False)


# -- forward ---------------------------------------------------------------


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid correlation of (B, N, H, W) maps with (M, N, s1, s2) kernels -> (B, M, H', W')."""
    win = sliding_window_view(x, w.shape[2:], axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.moveaxis(out, 3, 1)


def _maxpool(a: np.ndarray):
    b, m, h, w = a.shape
    h2, w2 = h // 2, w // 2
    blocks = a[:, :, : 2 * h2, : 2 * w2].reshape(b, m, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, m, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    pooled = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def _conv_layer_forward(x, layer: ConvLayer):
    z = _correlate(x, layer.weights) + layer.bias[None, :, None, None]
    a = np.maximum(z, 0.0)
    pooled, idx = _maxpool(a)
    return z, a, pooled, idx


def conv_forward(maps: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Apply one conv layer to ``N`` input maps ``(N, n1, n2)``; returns ``(M, m1, m2)``."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[0] != layer.weights.shape[1]:
        raise ValueError(f"expected ({layer.weights.shape[1]}, n1, n2) input, got {maps.shape}")
    if maps.shape[1] < layer.weights.shape[2] or maps.shape[2] < layer.weights.shape[3]:
        raise ValueError("input smaller than kernel")
    return _conv_layer_forward(maps[None], layer)[2][0]


@dataclass
class Activations:
    """Per-layer cache from a batched forward pass."""

    inputs: list = field(default_factory=list)  # input to each conv layer
    pre_pool: list = field(default_factory=list)  # post-ReLU, pre-pool maps
    pre_act: list = field(default_factory=list)
    pool_idx: list = field(default_factory=list)
    pooled: list = field(default_factory=list)
    flat: np.ndarray | None = None
    feat_pre: np.ndarray | None = None
    features: np.ndarray | None = None
    scores: np.ndarray | None = None


def _as_batch(patches, size: int) -> np.ndarray:
    x = np.asarray(getattr(patches, "pixels", patches), dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1:] != (1, size, size):
        raise ValueError(f"expected {size}x{size} patches, got shape {x.shape[-2:]}")
    return x


def forward(net: ConvNet, patches, upto: str = "fc_out", start: int = 0) -> tuple[np.ndarray | None, Activations]:
    """Run a batch (or a single patch) through the network.

    Returns ``(scores, cache)``; ``scores`` has shape ``(B, classes)``. With
    ``upto="fc_feat"`` the head is skipped and ``scores`` is ``None``.
    ``start > 0`` resumes from the cached input of conv layer ``start``
    (``patches`` are then ``(B, N, h, w)`` maps), which keeps repeated
    evaluations after a late-layer perturbation cheap.
    """
    x = _as_batch(patches, net.input_size) if start == 0 else np.asarray(patches, dtype=np.float64)
    cache = Activations()
    for layer in net.convs[start:]:
        cache.inputs.append(x)
        z, a, x, idx = _conv_layer_forward(x, layer)
        cache.pre_act.append(z)
        cache.pre_pool.append(a)
        cache.pool_idx.append(idx)
        cache.pooled.append(x)
    cache.flat = x.reshape(x.shape[0], -1)
    cache.feat_pre = cache.flat @ net.fc_feat.weights.T + net.fc_feat.bias
    cache.features = np.maximum(cache.feat_pre, 0.0)
    if upto == "fc_feat":
        return None, cache
    cache.scores = cache.features @ net.fc_out.weights.T + net.fc_out.bias
    return cache.scores, cache


def extract_features(net: ConvNet, patches, batch_size: int = 512) -> np.ndarray:
    """Post-ReLU ``fc_feat`` activations; a single patch gives a 1-D vector."""
    x = _as_batch(patches, net.input_size)
    out = np.empty((x.shape[0], net.feature_dim))
    for i in range(0, x.shape[0], batch_size):
        out[i : i + batch_size] = forward(net, x[i : i + batch_size], upto="fc_feat")[1].features
    single = np.asarray(getattr(patches, "pixels", patches)).ndim == 2
    return out[0] if single else out


def predict_classes(net: ConvNet, patches, batch_size: int = 512) -> np.ndarray:
    x = _as_batch(patches, net.input_size)
    return np.concatenate([forward(net, x[i : i + batch_size])[0].argmax(axis=1) for i in range(0, len(x), batch_size)])


# -- loss and backward ----------------------------------------------------


def softmax_xent(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the scores."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = scores.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def _unpool(d_pooled, idx, shape):
    b, m, h, w = shape
    h2, w2 = idx.shape[2:]
    blocks = np.zeros((b, m, h2, w2, 4))
    np.put_along_axis(blocks, idx[..., None], d_pooled[..., None], axis=-1)
    blocks = blocks.reshape(b, m, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, m, 2 * h2, 2 * w2)
    out = np.zeros(shape)
    out[:, :, : 2 * h2, : 2 * w2] = blocks
    return out


def backward(net: ConvNet, patches, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and its gradient for every parameter.

    Frozen layers still receive gradients; freezing is enforced by
    :func:`sgd_step`.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if labels.min() < 0 or labels.max() >= net.n_classes:
        raise ValueError(f"labels must lie in [0, {net.n_classes})")
    scores, c = forward(net, patches)
    if len(labels) != scores.shape[0]:
        raise ValueError("label count does not match batch size")
    loss, ds = softmax_xent(scores, labels)
    grads = {}
    grads["fc_out.weights"] = ds.T @ c.features
    grads["fc_out.bias"] = ds.sum(axis=0)
    dfeat = (ds @ net.fc_out.weights) * (c.feat_pre > 0)
    grads["fc_feat.weights"] = dfeat.T @ c.flat
    grads["fc_feat.bias"] = dfeat.sum(axis=0)
    d = (dfeat @ net.fc_feat.weights).reshape(c.pooled[-1].shape)
    for i in range(len(net.convs) - 1, -1, -1):
        layer, name = net.convs[i], CONV_NAMES[i]
        da = _unpool(d, c.pool_idx[i], c.pre_pool[i].shape)
        dz = da * (c.pre_act[i] > 0)
        win = sliding_window_view(c.inputs[i], layer.weights.shape[2:], axis=(2, 3))
        grads[f"{name}.weights"] = np.tensordot(dz, win, axes=([0, 2, 3], [0, 2, 3]))
        grads[f"{name}.bias"] = dz.sum(axis=(0, 2, 3))
        if i > 0:
            s1, s2 = layer.weights.shape[2:]
            dzp = np.pad(dz, ((0, 0), (0, 0), (s1 - 1, s1 - 1), (s2 - 1, s2 - 1)))
            flipped = layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            d = _correlate(dzp, flipped)
    return loss, grads


def loss_value(net: ConvNet, patches, labels, start: int = 0) -> float:
    scores, _ = forward(net, patches, start=start)
    return softmax_xent(scores, np.asarray(labels, dtype=np.intp))[0]


# -- optimisation ---------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    momentum: float = 0.5
    weight_decay: float = 5e-4
    learning_rate: float = 0.01
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def sgd_step(net: ConvNet, grads: dict, cfg: TrainConfig, velocity: dict | None = None, lr: float | None = None) -> dict:
    """In-place momentum SGD with L2 weight decay; returns the velocity state.

    ``v <- momentum * v - lr * (g + decay * w); w <- w + v``. Parameters and
    velocities of frozen layers are left untouched.
    """
    lr = cfg.learning_rate if lr is None else lr
    velocity = {} if velocity is None else velocity
    for name, layer in zip(net.layer_names, net.layers):
        if layer.frozen:
            continue
        for attr in ("weights", "bias"):
            key = f"{name}.{attr}"
            w = getattr(layer, attr)
            v = velocity.get(key)
            if v is None:
                v = np.zeros_like(w)
            v = cfg.momentum * v - lr * (grads[key] + cfg.weight_decay * w)
            velocity[key] = v
            w += v
    return velocity


def train(net: ConvNet, patches, labels, cfg: TrainConfig, lr: float | None = None):
    """Mini-batch SGD over seeded shuffles; mutates and returns ``net`` plus per-epoch mean loss.

    ``lr`` overrides ``cfg.learning_rate`` (it may be 0, which leaves the
    weights untouched).
    """
    x = _as_batch(patches, net.input_size)
    y = np.asarray(labels, dtype=np.intp)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(y) != len(x):
        raise ValueError("patch and label counts differ")
    rng = np.random.default_rng(cfg.seed)
    velocity: dict = {}
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for i in range(0, len(x), cfg.batch_size):
            sel = order[i : i + cfg.batch_size]
            loss, grads = backward(net, x[sel], y[sel])
            total += loss * len(sel)
            velocity = sgd_step(net, grads, cfg, velocity, lr)
        history.append(total / len(x))
    return net, history


def adapt(pretrained: ConvNet, regime: str, patches=None, labels=None, cfg: TrainConfig = TrainConfig(), n_classes: int = 2) -> ConvNet:
    """Transfer a pretrained network to the target task.

    FA fine-tunes every layer, PA freezes conv1 and conv2, NA freezes
    everything and skips training. The output head is re-initialized from
    ``cfg.seed`` for ``n_classes`` in every regime.
    """
    regime = regime.upper()
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    net = pretrained.copy()
    net.fc_out = _init_head(np.random.default_rng(cfg.seed), n_classes, net.feature_dim)
    n = len(net.layers)
    if regime == "FA":
        net.set_frozen([False] * n)
    elif regime == "PA":
        net.set_frozen([True, True] + [False] * (n - 2))
    else:
        net.set_frozen([True] * n)
        return net
    if patches is None or labels is None:
        raise ValueError(f"regime {regime} needs target patches and labels")
    train(net, patches, labels, cfg)
    return net


def accuracy(net: ConvNet, patches, labels) -> float:
    return float(np.mean(predict_classes(net, patches) == np.asarray(labels)))


# -- interpretability -----------------------------------------------------


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant maps become all-zero."""
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)


def response_maps(net: ConvNet, patch, layer: int) -> list[np.ndarray]:
    """Normalized pre-pool (post-ReLU) response of every filter of conv layer ``layer`` (0-based)."""
    if not 0 <= layer < len(net.convs):
        raise IndexError(f"conv layer index {layer} out of range 0..{len(net.convs) - 1}")
    x = _as_batch(patch, net.input_size)
    for i in range(layer + 1):
        z, a, pooled, _ = _conv_layer_forward(x, net.convs[i])
        x = pooled
    return [normalize_map(m) for m in a[0]]


@dataclass
class FilterChangeReport:
    threshold: float
    changes: dict[str, list[float | None]]  # None marks a zero-norm "before" filter

    def count(self, layer: str) -> int:
        return sum(1 for c in self.changes[layer] if c is not None and c >= self.threshold)

    def undefined(self, layer: str) -> int:
        return sum(1 for c in self.changes[layer] if c is None)

    @property
    def counts(self) -> dict[str, int]:
        return {name: self.count(name) for name in self.changes}

    def mean_change(self, layer: str) -> float:
        vals = [c for c in self.changes[layer] if c is not None]
        return float(np.mean(vals)) if vals else 0.0


def filter_vector(layer: ConvLayer, j: int) -> np.ndarray:
    """Kernel and bias of filter ``j`` concatenated; the unit whose change is measured."""
    return np.concatenate([layer.weights[j].ravel(), layer.bias[j : j + 1]])


def filter_change(before: ConvNet, after: ConvNet, threshold: float = 0.40) -> FilterChangeReport:
    """Relative l2 change ``||v_after - v_before|| / ||v_before||`` of every conv filter."""
    if len(before.convs) != len(after.convs) or any(
        a.weights.shape != b.weights.shape for a, b in zip(before.convs, after.convs)
    ):
        raise ValueError("networks have different conv architectures")
    changes = {}
    for name, lb, la in zip(CONV_NAMES, before.convs, after.convs):
        vals = []
        for j in range(lb.n_filters):
            vb, va = filter_vector(lb, j), filter_vector(la, j)
            nb = np.linalg.norm(vb)
            vals.append(None if nb == 0 else float(np.linalg.norm(va - vb) / nb))
        changes[name] = vals
    return FilterChangeReport(threshold, changes)


# -- persistence ----------------------------------------------------------


def _write_array(buf, arr):
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(buf):
    (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("truncated model file")
    return data


def dumps(net: ConvNet) -> bytes:
    """Serialize to the SDNET1 container (little-endian float64 parameter blocks)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    layers = net.layers
    buf.write(struct.pack("<II", net.input_size, len(layers)))
    for layer in layers:
        kind = 0 if isinstance(layer, ConvLayer) else (1 if layer.relu else 2)
        buf.write(struct.pack("<B", kind))
    for layer in layers:
        _write_array(buf, layer.weights)
        _write_array(buf, layer.bias)
    buf.write(bytes(int(f) for f in net.frozen_flags()))
    return buf.getvalue()


def loads(data: bytes) -> ConvNet:
    if data[:5] != MAGIC[:5]:
        raise ValueError("not an SDNET model file")
    if data[:6] != MAGIC:
        raise ValueError(f"unsupported SDNET version {data[5:6]!r}")
    buf = io.BytesIO(data[6:])
    input_size, n_layers = struct.unpack("<II", _read_exact(buf, 8))
    kinds = list(_read_exact(buf, n_layers))
    if len(kinds) < 3 or kinds[-1] == 0 or kinds[-2] == 0 or any(k != 0 for k in kinds[:-2]):
        raise ValueError("unexpected layer layout in model file")
    arrays = [(_read_array(buf), _read_array(buf)) for _ in range(n_layers)]
    flags = _read_exact(buf, n_layers)
    if buf.read(1):
        raise ValueError("trailing bytes in model file")
    convs = [ConvLayer(w, b) for w, b in arrays[:-2]]
    fc_feat = DenseLayer(*arrays[-2], relu=kinds[-2] == 1)
    fc_out = DenseLayer(*arrays[-1], relu=kinds[-1] == 1)
    net = ConvNet(convs, fc_feat, fc_out, input_size)
    net.set_frozen(flags)
    return net


def save(path, net: ConvNet) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def load(path) -> ConvNet:
    with open(path, "rb") as fh:
        return loads(fh.read())
