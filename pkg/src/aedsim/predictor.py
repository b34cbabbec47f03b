"""Port predictor: a small tanh MLP with hand-rolled exact gradients.

The network maps a flattened magnitude window to one logit per port. Hidden
layers use tanh, the output layer is affine, and training minimizes mean
softmax cross-entropy with plain SGD. Gradients (both parameter and input)
are exact backpropagated partials, so they can be checked against finite
differences and consumed directly by gradient-based attacks.

All operations accept a single feature vector or a (batch, dim) matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .channel import Dataset
from .errors import ConfigurationError

CHECKPOINT_VERSION = 1


@dataclass
class PredictorModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]  # weights[l]: (dims[l+1], dims[l])
    biases: list[np.ndarray]  # biases[l]: (dims[l+1],)

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "PredictorModel":
        return PredictorModel(
            layer_dims=self.layer_dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 40
    init_scale: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate", f"must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError("epochs", f"must be >= 1, got {self.epochs}")
        if self.init_scale < 0:
            raise ConfigurationError("init_scale", f"must be >= 0, got {self.init_scale}")


@dataclass
class Gradients:
    """Partials of the mean batch loss, shaped exactly like the model."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


def init_model(dims: tuple[int, ...] | list[int], init_scale: float, seed: int) -> PredictorModel:
    """Uniform[-init_scale, init_scale] weights, zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 3:
        raise ConfigurationError("layer_dims", f"need at least one hidden layer, got {dims}")
    if any(d < 1 for d in dims):
        raise ConfigurationError("layer_dims", f"all dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights = [
        rng.uniform(-init_scale, init_scale, size=(dims[i + 1], dims[i]))
        for i in range(len(dims) - 1)
    ]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    return PredictorModel(layer_dims=dims, weights=weights, biases=biases)


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ValueError(f"input shape {x.shape} incompatible with input dim {dim}")
    return batch, single


def _forward_cached(model: PredictorModel, batch: np.ndarray) -> list[np.ndarray]:
    """Activations [A0..A_L]; A_L are the logits (no output nonlinearity)."""
    acts = [batch]
    a = batch
    last = len(model.weights) - 1
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        a = z if layer == last else np.tanh(z)
        acts.append(a)
    return acts


def forward(model: PredictorModel, x: np.ndarray) -> np.ndarray:
    """Logits for one feature vector or a batch of them."""
    batch, single = _as_batch(x, model.n_inputs)
    logits = _forward_cached(model, batch)[-1]
    return logits[0] if single else logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _check_labels(labels: np.ndarray, n_outputs: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size == 0:
        raise ValueError("batch must be nonempty")
    if labels.min() < 0 or labels.max() >= n_outputs:
        raise ValueError(f"labels must be in [0, {n_outputs}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def _backward(
    model: PredictorModel, acts: list[np.ndarray], labels: np.ndarray
) -> tuple[float, Gradients, np.ndarray]:
    """Mean cross-entropy loss, parameter grads, and input grads."""
    logits = acts[-1]
    n = logits.shape[0]
    probs = softmax(logits)
    ll = logits - logits.max(axis=1, keepdims=True)
    log_probs = ll - np.log(np.exp(ll).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())

    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grad_w: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(model.biases)
    for layer in range(len(model.weights) - 1, -1, -1):
        grad_w[layer] = delta.T @ acts[layer]
        grad_b[layer] = delta.sum(axis=0)
        delta = delta @ model.weights[layer]
        if layer > 0:  # undo the tanh of the upstream hidden activation
            delta = delta * (1.0 - acts[layer] ** 2)
    return loss, Gradients(weights=grad_w, biases=grad_b), delta


def loss_and_grad(
    model: PredictorModel, features: np.ndarray, labels: np.ndarray
) -> tuple[float, Gradients]:
    """Mean softmax cross-entropy over the batch and its exact parameter grads."""
    batch, _ = _as_batch(features, model.n_inputs)
    labels = _check_labels(labels, model.n_outputs)
    if labels.shape[0] != batch.shape[0]:
        raise ValueError("features and labels disagree on batch size")
    loss, grads, _ = _backward(model, _forward_cached(model, batch), labels)
    return loss, grads


def input_grad(model: PredictorModel, x: np.ndarray, label: np.ndarray | int) -> np.ndarray:
    """Gradient of the mean batch loss w.r.t. the input(s); same shape as x."""
    batch, single = _as_batch(x, model.n_inputs)
    labels = _check_labels(label, model.n_outputs)
    if labels.shape[0] != batch.shape[0]:
        raise ValueError("features and labels disagree on batch size")
    _, _, grad_x = _backward(model, _forward_cached(model, batch), labels)
    return grad_x[0] if single else grad_x


def sgd_epoch(
    model: PredictorModel,
    dataset: Dataset,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[PredictorModel, float]:
    """One pass over a seeded shuffle in minibatches of plain SGD.

    Returns the updated model and the sample-weighted mean minibatch loss
    (so with learning_rate 0 it equals the plain evaluation loss).
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    model = model.copy()
    order = rng.permutation(len(dataset))
    total, count = 0.0, 0
    for start in range(0, len(order), train_cfg.batch_size):
        sel = order[start : start + train_cfg.batch_size]
        loss, grads = loss_and_grad(model, dataset.features[sel], dataset.labels[sel])
        for w, gw in zip(model.weights, grads.weights):
            w -= train_cfg.learning_rate * gw
        for b, gb in zip(model.biases, grads.biases):
            b -= train_cfg.learning_rate * gb
        total += loss * len(sel)
        count += len(sel)
    return model, total / count


def fit(
    model: PredictorModel,
    dataset: Dataset,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
) -> PredictorModel:
    """Run train_cfg.epochs SGD epochs; convenience for tests and scripts."""
    for _ in range(train_cfg.epochs):
        model, _ = sgd_epoch(model, dataset, train_cfg, rng)
    return model


def evaluate_loss(model: PredictorModel, dataset: Dataset) -> float:
    loss, _ = loss_and_grad(model, dataset.features, dataset.labels)
    return loss


def evaluate_accuracy(model, dataset: Dataset, input_transform=None) -> float:
    """Fraction of samples whose argmax logit matches the label.

    ``input_transform``, when given, maps (features, labels) to transformed
    features before the forward pass (e.g. an on-the-fly attack).
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    features = dataset.features
    if input_transform is not None:
        features = input_transform(features, dataset.labels)
    preds = np.argmax(forward(model, features), axis=1)
    return float(np.mean(preds == dataset.labels))


def save_checkpoint(model: PredictorModel, path) -> None:
    """Versioned textual dump of dims plus row-major weight/bias arrays.

    Floats are written as hex so the round-trip is bit-exact.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "layer_dims": list(model.layer_dims),
        "weights": [[v.hex() for v in w.reshape(-1)] for w in model.weights],
        "biases": [[v.hex() for v in b] for b in model.biases],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> PredictorModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    dims = tuple(payload["layer_dims"])
    weights = [
        np.array([float.fromhex(v) for v in flat]).reshape(dims[i + 1], dims[i])
        for i, flat in enumerate(payload["weights"])
    ]
    biases = [np.array([float.fromhex(v) for v in flat]) for flat in payload["biases"]]
    return PredictorModel(layer_dims=dims, weights=weights, biases=biases)
