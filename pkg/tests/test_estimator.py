import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fusenet.data import synthetic_splits
from fusenet.estimator import FusionClassifier


@pytest.fixture(scope="module")
def blobs():
    train, val, test = synthetic_splits(seed=3, size=32, n_train=48, n_val=12, n_test=12)
    return train, val, test


def small(**kw):
    params = dict(feature_dim=8, hidden=16, epochs=4, batch_size=8, seed=0)
    params.update(kw)
    return FusionClassifier(**params)


def test_params_roundtrip():
    est = small(kinds=("residual", "shuffle"))
    params = est.get_params()
    assert params["kinds"] == ("residual", "shuffle") and params["feature_dim"] == 8
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_unfitted_raises(blobs):
    with pytest.raises(NotFittedError):
        small().predict(blobs[0].images)


def test_fit_predict_transform(blobs):
    train, val, test = blobs
    labels = np.where(train.labels == 1, "covid", "other")
    val_labels = np.where(val.labels == 1, "covid", "other")
    est = small().fit(train.images[:, 0], labels, X_val=val.images, y_val=val_labels)
    assert list(est.classes_) == ["covid", "other"]
    pred = est.predict(test.images)
    assert set(pred) <= {"covid", "other"} and len(pred) == len(test)
    proba = est.predict_proba(test.images)
    assert proba.shape == (len(test), 2) and np.allclose(proba.sum(axis=1), 1.0)
    assert est.transform(test.images).shape == (len(test), 3 * 8)
    assert 1 <= est.best_epoch_ <= 4
    assert 0.0 <= est.score(test.images, np.where(test.labels == 1, "covid", "other")) <= 1.0


def test_fit_is_deterministic(blobs):
    train, _, test = blobs
    a = small(epochs=2).fit(train.images, train.labels).predict_proba(test.images)
    b = small(epochs=2).fit(train.images, train.labels).predict_proba(test.images)
    assert np.array_equal(a, b)


def test_rejects_multiclass_and_bad_shapes(blobs):
    train = blobs[0]
    y = np.arange(len(train)) % 3
    with pytest.raises(ValueError):
        small().fit(train.images, y)
    with pytest.raises(ValueError):
        small().fit(np.zeros((4, 2, 8, 8)), [0, 1, 0, 1])
    with pytest.raises(ValueError):
        small().fit(train.images, train.labels[:-1])


def test_evaluate_returns_report(blobs):
    train, _, test = blobs
    est = small(epochs=2).fit(train.images, train.labels)
    cm, report, scores = est.evaluate(test.images, test.labels)
    assert cm.total == len(test) and report.auc is not None and len(scores) == len(test)
