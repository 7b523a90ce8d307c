import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dbcd.data import gen_blobs
from dbcd.estimators import BCDMLPClassifier, DecentralizedBCDClassifier, SGDMLPClassifier


@pytest.fixture(scope="module")
def blobs():
    fed = gen_blobs(4, 80, dims=5, classes=3, seed=3, separation=5.0)
    X = np.concatenate([d.train.x.T for d in fed.devices])
    y = np.concatenate([d.train.y for d in fed.devices])
    dev = np.concatenate([np.full(d.train.n_samples, a) for a, d in enumerate(fed.devices)])
    return X, y, dev, fed.profiles


def test_bcd_classifier_learns_and_descends(blobs):
    X, y, _, _ = blobs
    clf = BCDMLPClassifier(hidden_dim=16, n_iter=30, loss="squared").fit(X, y)
    assert clf.score(X, y) > 0.8
    assert np.all(np.diff(clf.objective_) <= 1e-9 * (1 + np.abs(clf.objective_[:-1])))
    proba = clf.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)


def test_string_labels_roundtrip(blobs):
    X, y, _, _ = blobs
    names = np.array(["cat", "dog", "eel"])[y]
    clf = SGDMLPClassifier(hidden_dim=16, n_epochs=10).fit(X, names)
    assert set(clf.predict(X)) <= set(names)
    assert list(clf.classes_) == ["cat", "dog", "eel"]


def test_get_params_and_clone():
    clf = BCDMLPClassifier(gamma=0.5, hidden_dim=7)
    assert clf.get_params()["gamma"] == 0.5
    c2 = clone(clf)
    assert c2.get_params() == clf.get_params() and c2 is not clf


def test_unfitted_and_bad_inputs(blobs):
    X, y, _, _ = blobs
    with pytest.raises(NotFittedError):
        BCDMLPClassifier().predict(X)
    with pytest.raises(ValueError):
        BCDMLPClassifier(n_iter=1, hidden_dim=4).fit(X, np.zeros(len(y)))
    clf = BCDMLPClassifier(n_iter=1, hidden_dim=4).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :3])
    with pytest.raises(ValueError):
        BCDMLPClassifier().fit(X[:3], y[:2])


def test_decentralized_personalized(blobs):
    X, y, dev, prof = blobs
    clf = DecentralizedBCDClassifier(hidden_dim=16, rounds=15, neighbors=2, mu=0.1, gamma=0.1, alpha=0.1)
    clf.fit(X, y, devices=dev, profiles=prof)
    assert clf.n_devices_ == 4 and len(clf.params_) == 4
    assert (clf.predict(X, devices=dev) == y).mean() > 0.75
    with pytest.raises(ValueError):
        clf.predict(X)
    with pytest.raises(ValueError):
        clf.predict(X, devices=np.full(len(X), 9))


def test_decentralized_centralized_mode_needs_no_devices(blobs):
    X, y, dev, _ = blobs
    clf = DecentralizedBCDClassifier(mode="cbcd", hidden_dim=8, rounds=3).fit(X, y, devices=dev)
    assert clf.predict(X).shape == y.shape


def test_decentralized_input_checks(blobs):
    X, y, dev, _ = blobs
    with pytest.raises(ValueError):
        DecentralizedBCDClassifier(rounds=1).fit(X, y, devices=dev[:-1])
    with pytest.raises(ValueError):
        DecentralizedBCDClassifier(rounds=1).fit(X, y, devices=dev, profiles=np.ones((2, 1)))
    with pytest.raises(ValueError):
        DecentralizedBCDClassifier(rounds=1, gamma=-1.0).fit(X, y, devices=dev)
    cost = np.zeros((4, 4))
    cost[0, 1] = cost[1, 0] = 1.0
    clf = DecentralizedBCDClassifier(rounds=1, hidden_dim=4, neighbors=3).fit(X, y, devices=dev, cost=cost)
    assert clf.federation_.neighbors[0] == [1] and clf.federation_.neighbors[2] == []
