"""Backpropagation + minibatch SGD for the gradient-based baselines."""

from dataclasses import dataclass

import numpy as np

from dbcd.model import MlpParams, ShapeMismatch, relu, softmax
from dbcd.numerics import seeded_rng


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    batch_size: int = 128
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def backprop_grad(params, x, y):
    """Gradient of the mean softmax cross-entropy w.r.t. every weight matrix.

    The ReLU derivative at exactly zero is taken as zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    if x.shape[0] != params.weights[0].shape[1] or x.shape[1] != y.shape[0]:
        raise ShapeMismatch(f"batch x {x.shape} / y {y.shape} incompatible with the model")
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    acts = [x]
    pres = []
    h = x
    for w in params.weights[:-1]:
        pre = w @ h
        pres.append(pre)
        h = relu(pre)
        acts.append(h)
    logits = params.weights[-1] @ h
    delta = softmax(logits)
    delta[y, np.arange(n)] -= 1.0
    delta /= n
    grads = [None] * params.n_layers
    for i in range(params.n_layers - 1, -1, -1):
        grads[i] = delta @ acts[i].T
        if i:
            delta = (params.weights[i].T @ delta) * (pres[i - 1] > 0)
    return grads


class TrainingDiverged(FloatingPointError):
    """An SGD step produced non-finite weights; ``params`` holds the last finite ones."""

    def __init__(self, params):
        super().__init__("SGD update produced non-finite weights")
        self.params = params


def sgd_epoch(params, data, cfg, epoch=0):
    """One shuffled pass of minibatch SGD; the shuffle depends on ``(shuffle_seed, epoch)``.

    Raises TrainingDiverged rather than returning non-finite weights.
    """
    if data.n_samples == 0:
        raise ValueError("sgd_epoch needs data")
    rng = seeded_rng(cfg.shuffle_seed * 1_000_003 + epoch)
    order = rng.permutation(data.n_samples)
    weights = [w.copy() for w in params.weights]
    for start in range(0, data.n_samples, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        with np.errstate(over="ignore", invalid="ignore"):
            grads = backprop_grad(MlpParams(weights), data.x[:, idx], data.y[idx])
            stepped = [w - cfg.learning_rate * g for w, g in zip(weights, grads)]
        if not all(np.isfinite(w).all() for w in stepped):
            raise TrainingDiverged(MlpParams(weights))
        weights = stepped
    return MlpParams(weights)
