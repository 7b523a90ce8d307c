"""scikit-learn style classifiers around the BCD solver, the SGD baseline and
the device federation. Features are rows here (``n_samples x n_features``);
internally the package keeps samples as columns.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from dbcd import solver
from dbcd.baselines import SgdConfig, sgd_epoch
from dbcd.config import ExperimentConfig, validate
from dbcd.model import BcdHyper, LocalDataset, MlpParams, forward, init_state, penalized_objective, softmax
from dbcd.network import DeviceGraph, build_random_graph
from dbcd.numerics import seeded_rng
from dbcd.simulator import Federation


def _layer_dims(n_features, n_classes, layers, hidden_dim):
    return [n_features] + [hidden_dim] * (layers - 1) + [n_classes]


class _MlpClassifierBase(ClassifierMixin, BaseEstimator):

    def _encode(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        return X, np.searchsorted(self.classes_, y)

    def _check_X(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X):
        X = self._check_X(X)
        return forward(self.params_, X.T).T

    def predict_proba(self, X):
        return softmax(self.decision_function(X).T).T

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class BCDMLPClassifier(_MlpClassifierBase):
    """ReLU MLP trained by three-splitting block coordinate descent on one dataset.

    ``objective_`` holds the penalized objective after every iteration.
    """

    def __init__(self, layers=4, hidden_dim=128, gamma=1.0, alpha=1.0, lambda_w=0.0, lambda_v=0.0,
                 loss="cross_entropy", loss_reduction="sum", coupling="printed", init="identity",
                 n_iter=50, random_state=0):
        self.layers = layers
        self.hidden_dim = hidden_dim
        self.gamma = gamma
        self.alpha = alpha
        self.lambda_w = lambda_w
        self.lambda_v = lambda_v
        self.loss = loss
        self.loss_reduction = loss_reduction
        self.coupling = coupling
        self.init = init
        self.n_iter = n_iter
        self.random_state = random_state

    def _hyper(self):
        return BcdHyper(gamma=self.gamma, alpha=self.alpha, lambda_w=self.lambda_w, lambda_v=self.lambda_v,
                        loss=self.loss, loss_reduction=self.loss_reduction, coupling=self.coupling)

    def fit(self, X, y):
        X, yi = self._encode(X, y)
        hyper = self._hyper()
        dims = _layer_dims(X.shape[1], len(self.classes_), self.layers, self.hidden_dim)
        params = MlpParams.random(dims, seeded_rng(self.random_state), self.init)
        data = LocalDataset(X.T, yi)
        aux = init_state(params, data)
        self.objective_ = []
        for _ in range(self.n_iter):
            params, aux, _ = solver.device_bcd_iteration(params, aux, data, hyper, track=False)
            self.objective_.append(penalized_objective([(params, aux, data)], hyper))
        self.params_, self.state_ = params, aux
        return self


class SGDMLPClassifier(_MlpClassifierBase):
    """ReLU MLP trained by minibatch SGD on mean softmax cross-entropy."""

    def __init__(self, layers=4, hidden_dim=128, learning_rate=0.05, batch_size=128, n_epochs=50,
                 init="identity", random_state=0):
        self.layers = layers
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.init = init
        self.random_state = random_state

    def fit(self, X, y):
        X, yi = self._encode(X, y)
        dims = _layer_dims(X.shape[1], len(self.classes_), self.layers, self.hidden_dim)
        params = MlpParams.random(dims, seeded_rng(self.random_state), self.init)
        data = LocalDataset(X.T, yi)
        cfg = SgdConfig(self.learning_rate, self.batch_size, shuffle_seed=self.random_state)
        for epoch in range(self.n_epochs):
            params = sgd_epoch(params, data, cfg, epoch)
        self.params_ = params
        return self


class DecentralizedBCDClassifier(_MlpClassifierBase):
    """One personalized model per device, trained by any of the five modes.

    ``fit`` takes a device id per row. ``profiles`` (devices x p) drives the
    similarity weights; ``cost`` (devices x devices, 0 = no link) is the
    communication graph, drawn at random when omitted. ``predict`` routes each
    row to its device's model.
    """

    def __init__(self, mode="dbcd", layers=4, hidden_dim=128, neighbors=5, gamma=1.0, alpha=1.0, mu=0.01,
                 lambda_w=0.0, lambda_v=0.0, loss="cross_entropy", loss_reduction="sum", coupling="printed",
                 init="identity", aggregation="similarity", rounds=50, learning_rate=0.05, batch_size=128,
                 max_degree=50, random_state=0):
        self.mode = mode
        self.layers = layers
        self.hidden_dim = hidden_dim
        self.neighbors = neighbors
        self.gamma = gamma
        self.alpha = alpha
        self.mu = mu
        self.lambda_w = lambda_w
        self.lambda_v = lambda_v
        self.loss = loss
        self.loss_reduction = loss_reduction
        self.coupling = coupling
        self.init = init
        self.aggregation = aggregation
        self.rounds = rounds
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_degree = max_degree
        self.random_state = random_state

    def _config(self):
        names = ["mode", "layers", "hidden_dim", "neighbors", "gamma", "alpha", "mu", "lambda_w", "lambda_v",
                 "loss", "loss_reduction", "coupling", "init", "aggregation", "rounds", "learning_rate",
                 "batch_size"]
        cfg = ExperimentConfig(**{k: getattr(self, k) for k in names}, seed_init=self.random_state,
                               seed_graph=self.random_state, patience=0)
        return validate(cfg)

    def fit(self, X, y, devices, profiles=None, cost=None):
        X, yi = self._encode(X, y)
        devices = np.asarray(devices)
        if devices.shape != (X.shape[0],):
            raise ValueError("devices must give one id per row of X")
        if devices.min() < 0 or not np.issubdtype(devices.dtype, np.integer):
            raise ValueError("device ids must be non-negative integers")
        n_dev = int(devices.max()) + 1
        cfg = self._config()
        profiles = np.ones((n_dev, 1)) if profiles is None else check_array(profiles, dtype=np.float64)
        if profiles.shape[0] != n_dev:
            raise ValueError(f"profiles has {profiles.shape[0]} rows, expected {n_dev}")
        if cost is None:
            graph = build_random_graph(n_dev, self.max_degree, seeded_rng(self.random_state))
        else:
            graph = DeviceGraph(np.asarray(cost, dtype=np.float64))
            if graph.cost.shape[0] != n_dev:
                raise ValueError(f"cost is for {graph.cost.shape[0]} devices, expected {n_dev}")
        train = [LocalDataset(X[devices == a].T, yi[devices == a]) for a in range(n_dev)]
        fedn = Federation(cfg, train, profiles, graph, X.shape[1], len(self.classes_))
        for _ in range(self.rounds):
            fedn.step()
        self.federation_ = fedn
        self.n_devices_ = n_dev
        self.params_ = [fedn.params_for_device(a) for a in range(n_dev)]
        return self

    def decision_function(self, X, devices=None):
        X = self._check_X(X)
        if devices is None:
            if self.n_devices_ != 1 and len({id(p) for p in self.params_}) != 1:
                raise ValueError("devices is required for personalized models")
            devices = np.zeros(X.shape[0], dtype=int)
        devices = np.asarray(devices)
        if devices.shape != (X.shape[0],) or devices.min(initial=0) < 0 or devices.max(initial=0) >= self.n_devices_:
            raise ValueError(f"devices must give one id in [0, {self.n_devices_}) per row")
        out = np.empty((X.shape[0], len(self.classes_)))
        for a in np.unique(devices):
            rows = devices == a
            out[rows] = forward(self.params_[a], X[rows].T).T
        return out

    def predict_proba(self, X, devices=None):
        return softmax(self.decision_function(X, devices).T).T

    def predict(self, X, devices=None):
        scores = self.decision_function(X, devices)
        return self.classes_[np.argmax(scores, axis=1)]
