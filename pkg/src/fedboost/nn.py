"""Small dense classifier trained with analytic backprop.

The model is a stack of fully-connected layers with sigmoid activations on all
hidden layers and a softmax output; parameters live in one flat float64 vector
so that whole models and gradients can be exchanged, merged and encrypted as
plain vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import DatasetSplit, LabeledData
from .errors import EmptyDataset, InvalidLayout, NonFiniteInput, ShapeMismatch


@dataclass(frozen=True)
class Layout:
    """Per-layer (fan_in, fan_out) pairs; each layer owns fan_out*fan_in weights
    plus fan_out biases, packed in that order into the flat vector."""

    layers: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.layers:
            raise InvalidLayout("layout has no layers")
        for i, (fan_in, fan_out) in enumerate(self.layers):
            if fan_in < 1 or fan_out < 1:
                raise InvalidLayout(f"layer {i} has non-positive dims ({fan_in}, {fan_out})")
        for (_, out_prev), (in_next, _) in zip(self.layers, self.layers[1:]):
            if out_prev != in_next:
                raise InvalidLayout(f"layer dims do not chain: {self.layers}")

    @property
    def size(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layers)

    @property
    def n_inputs(self) -> int:
        return self.layers[0][0]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1][1]

    def views(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views into ``flat``; writes through to the vector."""
        if flat.shape != (self.size,):
            raise ShapeMismatch(f"expected {self.size} values, got {flat.shape}")
        out, offset = [], 0
        for fan_in, fan_out in self.layers:
            w = flat[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
            offset += fan_in * fan_out
            b = flat[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out


def mlp_layout(n_inputs: int = 2, n_hidden: int = 8, n_outputs: int = 2) -> Layout:
    """Two dense layers; the default (2, 8, 2) vector has 42 entries."""
    return Layout(((n_inputs, n_hidden), (n_hidden, n_outputs)))


@dataclass
class ModelParams:
    """Flat parameter vector plus the layout needed to interpret it."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ShapeMismatch(
                f"layout wants {self.layout.size} values, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("model parameters must be finite")

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.layout)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # "adam" or "sgd"
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")


@dataclass
class TrainReport:
    """Weight delta produced by one local training pass plus the post-training
    mean cross-entropy over the full local training set."""

    gradient: np.ndarray
    training_loss: float


def init_params(seed: int, layout: Layout) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases; seeded."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(layout.size)
    for w, _b in layout.views(flat):
        bound = 1.0 / np.sqrt(w.shape[1])
        w[:] = rng.uniform(-bound, bound, size=w.shape)
    return ModelParams(flat, layout)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward_hidden(params: ModelParams, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Activations of every hidden layer plus the output logits, batched."""
    layers = params.layout.views(params.values)
    hidden = []
    h = x
    for w, b in layers[:-1]:
        h = _sigmoid(h @ w.T + b)
        hidden.append(h)
    w, b = layers[-1]
    return hidden, h @ w.T + b


def forward_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per input row."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("inputs must be finite")
    _, logits = _forward_hidden(params, x)
    return np.exp(_log_softmax(logits))


def forward(params: ModelParams, x) -> np.ndarray:
    """Class probabilities for a single input point."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.layout.n_inputs,):
        raise ShapeMismatch(f"expected input of shape ({params.layout.n_inputs},)")
    return forward_batch(params, x[None, :])[0]


def _loss_and_grad(
    views: list[tuple[np.ndarray, np.ndarray]],
    grad_views: list[tuple[np.ndarray, np.ndarray]],
    x: np.ndarray,
    y: np.ndarray,
) -> float:
    """Mean cross-entropy over the batch; writes the gradient into grad_views."""
    acts = [x]
    h = x
    for w, b in views[:-1]:
        h = _sigmoid(h @ w.T + b)
        acts.append(h)
    w_out, b_out = views[-1]
    logits = h @ w_out.T + b_out
    logp = _log_softmax(logits)
    n = x.shape[0]
    loss = -logp[np.arange(n), y].mean()

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    for layer in range(len(views) - 1, -1, -1):
        gw, gb = grad_views[layer]
        gw[:] = delta.T @ acts[layer]
        gb[:] = delta.sum(axis=0)
        if layer > 0:
            h = acts[layer]
            delta = (delta @ views[layer][0]) * h * (1.0 - h)
    return loss


def evaluate(params: ModelParams, data: LabeledData) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy over a labelled set."""
    if len(data) == 0:
        raise EmptyDataset("cannot evaluate on an empty set")
    _, logits = _forward_hidden(params, data.x)
    logp = _log_softmax(logits)
    loss = -logp[np.arange(len(data)), data.y].mean()
    accuracy = float((logp.argmax(axis=1) == data.y).mean())
    return float(loss), accuracy


def train_local(
    params: ModelParams,
    data: DatasetSplit,
    batch_size: int,
    epochs: int,
    opt: OptimizerConfig,
    seed: int,
) -> TrainReport:
    """Mini-batch cross-entropy training on ``data.train``.

    Batch order is drawn from a generator seeded with ``seed``, so the result is
    bit-reproducible. Returns the total weight delta (trained minus input
    weights) and the mean loss of a final full pass over the training set.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    train = data.train
    n = len(train)
    if n == 0:
        raise EmptyDataset("training set is empty")

    flat = params.values.copy()
    grad = np.zeros_like(flat)
    views = params.layout.views(flat)
    grad_views = params.layout.views(grad)

    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    t = opt.step_count
    eta, b1, b2, eps = opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon

    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            _loss_and_grad(views, grad_views, train.x[idx], train.y[idx])
            if opt.kind == "adam":
                t += 1
                m = b1 * m + (1.0 - b1) * grad
                v = b2 * v + (1.0 - b2) * grad * grad
                m_hat = m / (1.0 - b1**t)
                v_hat = v / (1.0 - b2**t)
                flat -= eta * m_hat / (np.sqrt(v_hat) + eps)
            else:
                flat -= eta * grad

    # The delta is the unit exchanged with the server, so the post-training
    # weights are defined as params + delta; reconstruction is then bit-exact.
    delta = flat - params.values
    final_loss, _ = evaluate(ModelParams(params.values + delta, params.layout), train)
    return TrainReport(gradient=delta, training_loss=final_loss)


def apply_gradient(params: ModelParams, g: np.ndarray) -> ModelParams:
    """New parameters ``params + g``; lengths must match."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != params.values.shape:
        raise ShapeMismatch(f"gradient shape {g.shape} != params shape {params.values.shape}")
    return ModelParams(params.values + g, params.layout)
