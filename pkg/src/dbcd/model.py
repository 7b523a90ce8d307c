"""Per-device MLP, three-splitting auxiliary state, losses and the penalized objective.

Conventions: samples are columns. ``weights[i]`` maps layer ``i`` to layer
``i + 1`` (0-based), hidden layers use ReLU and the output layer is linear;
softmax only appears inside the cross-entropy loss.
"""

from dataclasses import dataclass, replace

import numpy as np

from dbcd.numerics import gaussian_matrix

LOSSES = ("cross_entropy", "squared")
COUPLINGS = ("printed", "consistent")
REDUCTIONS = ("sum", "mean")
INIT_SCHEMES = ("he", "orthogonal", "identity")


class ShapeMismatch(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class MlpParams:
    weights: list

    def __post_init__(self):
        if len(self.weights) < 1:
            raise ShapeMismatch("an MLP needs at least one layer")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeMismatch(
                    f"layer {i + 1} expects {self.weights[i].shape[1]} inputs, "
                    f"layer {i} produces {self.weights[i - 1].shape[0]}"
                )

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self):
        return MlpParams([w.copy() for w in self.weights])

    def flat(self):
        return np.concatenate([w.ravel() for w in self.weights])

    @classmethod
    def random(cls, layer_dims, rng, scheme="he"):
        """Random weights for ``layer_dims = [d_0, ..., d_L]``.

        ``"he"`` draws N(0, 2 / fan_in) entries. ``"orthogonal"`` uses
        sqrt(2)-scaled orthogonal matrices. ``"identity"`` starts square hidden
        layers at the identity and uses He draws elsewhere.
        """
        if len(layer_dims) < 2:
            raise ShapeMismatch("layer_dims needs an input and an output size")
        if scheme not in INIT_SCHEMES:
            raise ValueError(f"init scheme must be one of {INIT_SCHEMES}, got {scheme!r}")
        last = len(layer_dims) - 2
        weights = []
        for i, (d_in, d_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            he = gaussian_matrix(d_out, d_in, np.sqrt(2.0 / d_in), rng)
            if scheme == "orthogonal":
                q, r = np.linalg.qr(he if d_out >= d_in else he.T)
                q = q * np.sign(np.diag(r))
                w = np.sqrt(2.0) * (q if d_out >= d_in else q.T)
            elif scheme == "identity" and 0 < i < last and d_in == d_out:
                w = np.eye(d_in, dtype=he.dtype)
            else:
                w = he
            weights.append(w)
        return cls(weights)


@dataclass
class AuxState:
    """``v[i]`` (post-activation) and ``u[i]`` (pre-activation) for layer ``i + 1``."""

    v: list
    u: list

    def copy(self):
        return AuxState([a.copy() for a in self.v], [a.copy() for a in self.u])


@dataclass
class LocalDataset:
    x: np.ndarray  # d_0 x N
    y: np.ndarray  # N integer labels

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        if self.x.ndim != 2 or self.x.shape[1] != self.y.shape[0]:
            raise ShapeMismatch(f"x is {self.x.shape} but there are {self.y.shape[0]} labels")
        if self.y.size and self.y.min() < 0:
            raise LabelOutOfRange("labels must be non-negative")

    @property
    def n_samples(self):
        return self.y.shape[0]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LocalDataset(self.x[:, idx], self.y[idx])

    @staticmethod
    def concat(datasets):
        datasets = [d for d in datasets if d.n_samples]
        return LocalDataset(
            np.concatenate([d.x for d in datasets], axis=1),
            np.concatenate([d.y for d in datasets]),
        )


@dataclass(frozen=True)
class BcdHyper:
    """Penalty weights and solver switches for one BCD run.

    ``coupling="printed"`` uses the update rules exactly as printed (gamma also
    weights the ``u - W v`` fit in the u and W updates); ``"consistent"``
    uses alpha there so every update is a proximal block step on the objective.

    ``loss_reduction="mean"`` weights the data term by ``1 / N``; ``"sum"``
    (default) sums per-sample losses, putting them on the same footing as the
    Frobenius penalties.
    """

    gamma: float = 1.0
    alpha: float = 1.0
    mu: float = 0.01
    lambda_w: float = 0.0
    lambda_v: float = 0.0
    loss: str = "cross_entropy"
    vout_max_iter: int = 50
    vout_tol: float = 1e-8
    coupling: str = "printed"
    loss_reduction: str = "sum"

    def __post_init__(self):
        if not self.gamma > 0 or not self.alpha > 0:
            raise ValueError("gamma and alpha must be strictly positive")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if self.lambda_w < 0 or self.lambda_v < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.loss_reduction not in REDUCTIONS:
            raise ValueError(f"loss_reduction must be one of {REDUCTIONS}, got {self.loss_reduction!r}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}, got {self.coupling!r}")

    @property
    def fit_weight(self):
        """Weight on ``||u - W v||^2`` inside the u and W updates."""
        return self.gamma if self.coupling == "printed" else self.alpha

    def loss_weight(self, n_samples):
        """Per-sample weight of the data term."""
        return 1.0 / n_samples if self.loss_reduction == "mean" else 1.0

    def with_(self, **changes):
        return replace(self, **changes)


def forward(params, x):
    """Logits ``d_L x n`` of the bias-free MLP."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != params.weights[0].shape[1]:
        raise ShapeMismatch(f"input has {x.shape[0]} rows, model expects {params.weights[0].shape[1]}")
    h = x
    for w in params.weights[:-1]:
        h = relu(w @ h)
    return params.weights[-1] @ h


def _check_labels(y, n_classes, n_cols):
    y = np.asarray(y, dtype=np.int64).ravel()
    if y.shape[0] != n_cols:
        raise ShapeMismatch(f"{n_cols} columns but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes - 1}]")
    return y


def log_softmax(z):
    z = z - z.max(axis=0, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def onehot(y, n_classes):
    out = np.zeros((n_classes, y.shape[0]))
    out[y, np.arange(y.shape[0])] = 1.0
    return out


def loss(v, y, kind="cross_entropy"):
    """Mean per-sample loss of output columns ``v`` against integer labels."""
    v = np.asarray(v, dtype=np.float64)
    y = _check_labels(y, v.shape[0], v.shape[1])
    if kind == "cross_entropy":
        return float(-log_softmax(v)[y, np.arange(y.shape[0])].mean())
    if kind == "squared":
        return float(0.5 * ((v - onehot(y, v.shape[0])) ** 2).sum(axis=0).mean())
    raise ValueError(f"unknown loss {kind!r}")


def init_state(params, data):
    """Forward-pass auxiliary state: every coupling penalty is exactly zero."""
    if data.x.shape[0] != params.weights[0].shape[1]:
        raise ShapeMismatch("data dimension does not match the first layer")
    v, u = [], []
    h = data.x
    last = params.n_layers - 1
    for i, w in enumerate(params.weights):
        pre = w @ h
        h = pre if i == last else relu(pre)
        u.append(pre)
        v.append(h.copy())
    return AuxState(v, u)


def objective_terms(params, aux, data, hyper):
    """Components of one device's penalized objective.

    ``activation`` holds ``gamma/2 ||v_i - sigma(u_i)||^2`` summed over layers,
    ``linear`` holds ``alpha/2 ||u_i - W_i v_{i-1}||^2``; the output layer's
    activation is the identity.
    """
    n_layers = params.n_layers
    if len(aux.v) != n_layers or len(aux.u) != n_layers:
        raise ShapeMismatch("auxiliary state depth differs from the model depth")
    act = lin = reg = 0.0
    prev = data.x
    for i, w in enumerate(params.weights):
        v_i, u_i = aux.v[i], aux.u[i]
        if v_i.shape != (w.shape[0], data.n_samples) or u_i.shape != v_i.shape:
            raise ShapeMismatch(f"aux block {i + 1} has shape {v_i.shape}")
        s_u = u_i if i == n_layers - 1 else relu(u_i)
        act += 0.5 * hyper.gamma * float(((v_i - s_u) ** 2).sum())
        lin += 0.5 * hyper.alpha * float(((u_i - w @ prev) ** 2).sum())
        reg += 0.5 * hyper.lambda_w * float((w ** 2).sum()) + 0.5 * hyper.lambda_v * float((v_i ** 2).sum())
        prev = v_i
    data_term = loss(aux.v[-1], data.y, hyper.loss)
    if hyper.loss_reduction == "sum":
        data_term *= data.n_samples
    return {
        "loss": data_term,
        "regularization": reg,
        "activation": act,
        "linear": lin,
    }


def device_objective(params, aux, data, hyper):
    return sum(objective_terms(params, aux, data, hyper).values())


def penalized_objective(devices, hyper):
    """Network-wide objective: sum of ``device_objective`` over ``(params, aux, data)`` triples."""
    return sum(device_objective(p, a, d, hyper) for p, a, d in devices)


def empirical_risk(params, data, kind="cross_entropy"):
    return loss(forward(params, data.x), data.y, kind)
