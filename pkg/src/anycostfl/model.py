"""Dense-network training core.

Float32 multilayer perceptrons with softmax cross-entropy and plain
mini-batch SGD. Everything is deterministic given a generator: the
initialisation, the batch order within each epoch and the returned update.

A "channel" throughout this package means one output neuron of a layer,
i.e. one weight row together with its bias entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class TrainingDiverged(RuntimeError):
    """Raised when the local loss turns non-finite during training."""


@dataclass(frozen=True)
class ModelArch:
    """Shape of a fully-connected classifier: input -> hidden... -> logits."""

    input_dim: int
    hidden_sizes: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if len(self.hidden_sizes) == 0:
            raise ValueError("hidden_sizes must be non-empty")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_sizes, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_sizes) + 1

    def param_count(self) -> int:
        d = self.dims
        return int(sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1)))

    def flop_count(self) -> int:
        """Multiply-accumulate count of one forward pass on one sample."""
        d = self.dims
        return int(sum(d[i] * d[i + 1] for i in range(len(d) - 1)))


@dataclass
class GlobalModel:
    """Model parameters: weights[l] has shape (out, in), biases[l] shape (out,)."""

    arch: ModelArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: int = 0

    def copy(self) -> "GlobalModel":
        return GlobalModel(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            version=self.version,
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a batch x of shape (n, input_dim)."""
        a = np.asarray(x, dtype=np.float32)
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            a = z if l == last else _activate(z, self.arch.activation)
        return a


@dataclass
class DataShard:
    """One device's slice of the training set."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-d (n, dim)")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels disagree on sample count")

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass
class GradientUpdate:
    """Per-layer update tensors, defined as w_before - w_after."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    learning_rate: float = 0.0

    def norm_sq(self) -> float:
        total = 0.0
        for w, b in zip(self.weights, self.biases):
            total += float(np.sum(np.square(w, dtype=np.float64)))
            total += float(np.sum(np.square(b, dtype=np.float64)))
        return total


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float32)
    t = np.tanh(z)
    return (1.0 - t * t).astype(np.float32)


def init_model(arch: ModelArch, rng: np.random.Generator) -> GlobalModel:
    """Uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    dims = arch.dims
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32)
        weights.append(w)
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return GlobalModel(arch=arch, weights=weights, biases=biases, version=0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cached(model: GlobalModel, x: np.ndarray):
    """Forward pass keeping pre-activations for backprop."""
    acts = [x]
    zs = []
    a = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        zs.append(z)
        a = z if l == last else _activate(z, model.arch.activation)
        acts.append(a)
    return zs, acts


def _batch_gradients(model: GlobalModel, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy gradients for one mini-batch."""
    n = len(y)
    zs, acts = _forward_cached(model, x)
    probs = _softmax(zs[-1])
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta = (delta / np.float32(n)).astype(np.float32)

    g_w = [None] * len(model.weights)
    g_b = [None] * len(model.biases)
    for l in range(len(model.weights) - 1, -1, -1):
        g_w[l] = delta.T @ acts[l]
        g_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * _activate_grad(zs[l - 1], model.arch.activation)

    loss = float(np.mean(-np.log(np.maximum(probs[np.arange(n), y], 1e-30))))
    return g_w, g_b, loss


def local_train(
    model: GlobalModel,
    shard: DataShard,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> GradientUpdate:
    """Run SGD on a copy of ``model`` and return w_before - w_after.

    The shard order is reshuffled once per epoch from ``rng``; with
    ``epochs == 0`` the update is exactly zero. Raises TrainingDiverged if
    the running loss turns non-finite.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if shard.size == 0:
        raise ValueError("shard is empty")
    if shard.features.shape[1] != model.arch.input_dim:
        raise ValueError("shard feature dim does not match the model input dim")

    work = model.copy()
    lr32 = np.float32(lr)
    n = shard.size
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            g_w, g_b, loss = _batch_gradients(work, shard.features[idx], shard.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch offset {start} (lr={lr})"
                )
            for l in range(len(work.weights)):
                work.weights[l] -= lr32 * g_w[l]
                work.biases[l] -= lr32 * g_b[l]

    d_w = [before - after for before, after in zip(model.weights, work.weights)]
    d_b = [before - after for before, after in zip(model.biases, work.biases)]
    return GradientUpdate(weights=d_w, biases=d_b, learning_rate=float(lr))


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float
    n: int


def evaluate(model: GlobalModel, features: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Mean cross-entropy and top-1 accuracy (argmax ties resolve to the lowest class)."""
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise ValueError("cannot evaluate on an empty set")
    logits = model.forward(features)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(len(labels)), labels]))
    pred = logits.argmax(axis=1)
    return EvalResult(loss=loss, accuracy=float(np.mean(pred == labels)), n=len(labels))


def global_loss(losses, sizes) -> float:
    """Aggregate local losses weighted by shard size: sum(|D_i| * F_i) / |D|."""
    losses = np.asarray(losses, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if losses.shape != sizes.shape or losses.ndim != 1 or len(losses) == 0:
        raise ValueError("losses and sizes must be equal-length non-empty vectors")
    if np.any(sizes < 0) or sizes.sum() == 0:
        raise ValueError("sizes must be non-negative with a positive total")
    return float(np.sum(losses * sizes) / np.sum(sizes))
