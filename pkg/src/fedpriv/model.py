"""Flat-parameter MLP classifier: forward pass, local SGD training, evaluation.

All model parameters live in a single flat float64 vector with an explicit
per-layer layout, so the same vector can be noised, secret-shared, compressed,
and aggregated by the other modules without any knowledge of the network shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")

# layout slot: (name, offset, rows, cols)
LayoutSlot = tuple[str, int, int, int]


class ShapeError(ValueError):
    """Dimension mismatch between data, parameters, and configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    """Layer sizes of the dense encoder/classifier stack.

    ``layer_dims`` runs input -> hidden ... -> classes.  ``activations`` holds
    one entry per hidden layer (defaults to relu everywhere); the final layer
    always emits raw logits, softmax is applied by the loss.
    """

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if any(d < 1 for d in dims):
            raise ValueError("all layer dims must be >= 1")
        acts = tuple(self.activations)
        if not acts:
            acts = ("relu",) * self.n_hidden
        object.__setattr__(self, "activations", acts)
        if len(acts) != self.n_hidden:
            raise ValueError(
                f"expected {self.n_hidden} hidden activations, got {len(acts)}"
            )
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def n_hidden(self) -> int:
        return len(self.layer_dims) - 2

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus its (name, offset, rows, cols) map."""

    values: np.ndarray
    layout: tuple[LayoutSlot, ...]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.layout = tuple(
            (str(n), int(o), int(r), int(c)) for n, o, r, c in self.layout
        )
        pos = 0
        for name, off, rows, cols in self.layout:
            if off != pos:
                raise ShapeError(f"layout slot {name} not contiguous at {off}")
            if rows < 1 or cols < 1:
                raise ShapeError(f"layout slot {name} has empty shape")
            pos += rows * cols
        if pos != self.values.size:
            raise ShapeError(
                f"layout covers {pos} values, vector has {self.values.size}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite parameter values")

    @property
    def size(self) -> int:
        return int(self.values.size)

    def slot(self, name: str) -> np.ndarray:
        for n, off, rows, cols in self.layout:
            if n == name:
                return self.values[off : off + rows * cols].reshape(rows, cols)
        raise KeyError(name)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def scaled(self, c: float) -> "ParamVector":
        return ParamVector(self.values * c, self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        if not self.same_layout(other):
            raise ShapeError("layout mismatch")
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        if not self.same_layout(other):
            raise ShapeError("layout mismatch")
        return ParamVector(self.values - other.values, self.layout)


def zeros_like(params: ParamVector) -> ParamVector:
    return ParamVector(np.zeros(params.size), params.layout)


def layout_for(cfg: EncoderConfig) -> tuple[LayoutSlot, ...]:
    slots: list[LayoutSlot] = []
    off = 0
    for layer in range(1, len(cfg.layer_dims)):
        din, dout = cfg.layer_dims[layer - 1], cfg.layer_dims[layer]
        slots.append((f"W{layer}", off, dout, din))
        off += dout * din
        slots.append((f"b{layer}", off, dout, 1))
        off += dout
    return tuple(slots)


def init_params(cfg: EncoderConfig, seed: int) -> ParamVector:
    """He-style gaussian init for weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    layout = layout_for(cfg)
    total = sum(r * c for _, _, r, c in layout)
    values = np.zeros(total)
    pv = ParamVector(values, layout)
    for layer in range(1, len(cfg.layer_dims)):
        din = cfg.layer_dims[layer - 1]
        w = pv.slot(f"W{layer}")
        w[:] = rng.normal(0.0, 1.0 / np.sqrt(din), size=w.shape)
    return ParamVector(pv.values, layout)


@dataclass
class Dataset:
    """Feature matrix with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.size:
            raise ShapeError("feature rows and labels disagree")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")
        self.n_classes = int(self.n_classes)
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.n_classes
        ):
            raise ValueError("label outside [0, n_classes)")

    @property
    def n(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass
class ClientUpdate:
    """One client's round contribution."""

    client_id: int
    delta: ParamVector
    sample_count: int
    loss_delta: float  # post-train local loss minus pre-train local loss
    staleness: int = 0

    def __post_init__(self) -> None:
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.staleness < 0:
            raise ValueError("staleness must be >= 0")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _layers(params: ParamVector, cfg: EncoderConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    if params.layout != layout_for(cfg):
        raise ShapeError("parameter layout does not match encoder config")
    out = []
    for layer in range(1, len(cfg.layer_dims)):
        out.append((params.slot(f"W{layer}"), params.slot(f"b{layer}")))
    return out


def _forward_batch(
    X: np.ndarray, params: ParamVector, cfg: EncoderConfig
) -> list[np.ndarray]:
    """Per-layer activations for a batch; the last entry holds raw logits."""
    if X.shape[1] != cfg.input_dim:
        raise ShapeError(f"input dim {X.shape[1]} != {cfg.input_dim}")
    outs: list[np.ndarray] = []
    h = X
    n_layers = cfg.n_layers
    for layer, (w, b) in enumerate(_layers(params, cfg), start=1):
        z = h @ w.T + b.ravel()
        h = _act(cfg.activations[layer - 1], z) if layer < n_layers else z
        outs.append(h)
    return outs


def forward_encode(
    x: np.ndarray, params: ParamVector, cfg: EncoderConfig
) -> list[np.ndarray]:
    """Activation h^(l) per layer for a single feature vector (logits last)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != cfg.input_dim:
        raise ShapeError(f"input dim {x.size} != {cfg.input_dim}")
    return [h[0] for h in _forward_batch(x[None, :], params, cfg)]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _mean_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(-_log_softmax(logits)[np.arange(labels.size), labels].mean())


def loss_and_grad(
    params: ParamVector, cfg: EncoderConfig, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the flat vector."""
    layers = _layers(params, cfg)
    n_layers = cfg.n_layers
    hs = [X]
    zs = []
    h = X
    for layer, (w, b) in enumerate(layers, start=1):
        z = h @ w.T + b.ravel()
        zs.append(z)
        h = _act(cfg.activations[layer - 1], z) if layer < n_layers else z
        hs.append(h)
    logits = hs[-1]
    ls = _log_softmax(logits)
    n = X.shape[0]
    loss = float(-ls[np.arange(n), y].mean())
    if not np.isfinite(loss):
        raise ArithmeticError("non-finite training loss")

    grad = np.zeros(params.size)
    gpv = ParamVector(grad, params.layout)
    probs = np.exp(ls)
    dz = probs.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    for layer in range(n_layers, 0, -1):
        w, _ = layers[layer - 1]
        gpv.slot(f"W{layer}")[:] = dz.T @ hs[layer - 1]
        gpv.slot(f"b{layer}")[:] = dz.sum(axis=0)[:, None]
        if layer > 1:
            dh = dz @ w
            dz = dh * _act_grad(cfg.activations[layer - 2], zs[layer - 2], hs[layer - 1])
    return loss, grad


def local_train(
    data: Dataset,
    params: ParamVector,
    cfg: EncoderConfig,
    epochs: int,
    batch: int,
    lr: float,
    clip_c: float | None,
    seed: int,
    client_id: int = 0,
) -> ClientUpdate:
    """Mini-batch SGD on softmax cross-entropy; returns the parameter delta.

    Bit-reproducible for a fixed (seed, data, params, hyperparameters) tuple.
    When ``clip_c`` is set the delta is rescaled so its L2 norm never exceeds
    it.
    """
    if data.n == 0:
        raise ValueError("cannot train on an empty dataset")
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    if clip_c is not None and clip_c <= 0:
        raise ValueError("clip_c must be positive when set")

    rng = np.random.default_rng(seed)
    start = params.copy()
    theta = start.values
    pre_loss = _mean_loss(_forward_batch(data.features, start, cfg)[-1], data.labels)
    work = ParamVector(theta, params.layout)
    for _ in range(epochs):
        order = rng.permutation(data.n)
        for lo in range(0, data.n, batch):
            idx = order[lo : lo + batch]
            _, g = loss_and_grad(work, cfg, data.features[idx], data.labels[idx])
            theta -= lr * g
    post_loss = _mean_loss(_forward_batch(data.features, work, cfg)[-1], data.labels)
    if not np.isfinite(post_loss):
        raise ArithmeticError("non-finite training loss")

    delta = theta - params.values
    if clip_c is not None:
        nrm = float(np.linalg.norm(delta))
        if nrm > clip_c:
            delta *= clip_c / nrm
    return ClientUpdate(
        client_id=client_id,
        delta=ParamVector(delta, params.layout),
        sample_count=data.n,
        loss_delta=post_loss - pre_loss,
    )


def evaluate(params: ParamVector, cfg: EncoderConfig, data: Dataset) -> tuple[float, float]:
    """Accuracy (argmax ties go to the lowest class) and mean cross-entropy."""
    if data.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = _forward_batch(data.features, params, cfg)[-1]
    preds = np.argmax(logits, axis=1)
    accuracy = float(np.mean(preds == data.labels))
    return accuracy, _mean_loss(logits, data.labels)
