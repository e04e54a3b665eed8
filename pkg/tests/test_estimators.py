import numpy as np
import pytest
from sklearn.base import clone

from elastictrain.estimators import ElasticLogisticClassifier, ElasticSGDRegressor


def regression_data(n=512, d=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = X @ np.arange(1.0, d + 1) + 0.5 + 0.01 * rng.normal(size=n)
    return X, y


def test_regressor_fits():
    X, y = regression_data()
    est = ElasticSGDRegressor(n_workers=3, batch_size=32, epochs=10, eta=0.05).fit(X, y)
    assert est.score(X, y) > 0.99
    assert np.allclose(est.coef_, [1, 2, 3, 4], atol=0.05)
    assert est.intercept_ == pytest.approx(0.5, abs=0.05)
    assert est.predict(X).shape == (len(X),)


def test_regressor_under_scaling_scenario():
    X, y = regression_data()
    sc = {"events": [{"batch": 20, "action": "scale_out", "n": 2},
                     {"batch": 60, "action": "scale_in", "n": 3}]}
    a = ElasticSGDRegressor(n_workers=3, batch_size=32, epochs=6, scenario=sc).fit(X, y)
    b = ElasticSGDRegressor(n_workers=3, batch_size=32, epochs=6).fit(X, y)
    assert b.n_iter_ == 6 * 512 // 32
    # epoch ends can split a mini-batch once shards are spread over more workers
    assert a.n_iter_ >= b.n_iter_
    per_epoch = {}
    for r in a.assignment_log_.records:
        per_epoch.setdefault(r.epoch, []).extend(r.samples)
    assert len(per_epoch) == 6
    assert all(sorted(ids) == list(range(512)) for ids in per_epoch.values())
    assert a.score(X, y) > 0.99


def test_classifier():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(400, 2))
    y = np.where(X[:, 0] - X[:, 1] > 0, "pos", "neg")
    clf = ElasticLogisticClassifier(n_workers=2, batch_size=40, epochs=20, eta=0.5).fit(X, y)
    assert list(clf.classes_) == ["neg", "pos"]
    assert clf.score(X, y) > 0.95
    proba = clf.predict_proba(X)
    assert np.allclose(proba.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        clf.fit(X, np.zeros(len(X)))


def test_sklearn_protocol():
    est = ElasticSGDRegressor(n_workers=2, eta=0.1)
    c = clone(est)
    assert c.get_params() == est.get_params()
    c.set_params(epochs=2)
    assert c.epochs == 2
    with pytest.raises(Exception):
        c.predict(np.zeros((1, 4)))
    X, y = regression_data(n=128)
    c.fit(X, y)
    with pytest.raises(ValueError):
        c.predict(np.zeros((1, 3)))
