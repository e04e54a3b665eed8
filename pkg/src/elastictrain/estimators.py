"""scikit-learn style estimators that train with the elastic runtime.

``fit`` runs a full simulated elastic job over the given arrays, optionally
under a scenario of scaling and failure events, so the fitted model is the
one the distributed run produced.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datapipeline import ArrayDataset
from .runtime.config import CONSISTENT, RunConfig
from .runtime.job import ElasticJob
from .runtime.scenario import ScenarioRunner
from .trainer import LEAST_SQUARES, LOGISTIC, loss


class _ElasticSGD(BaseEstimator):
    _model = LEAST_SQUARES

    def __init__(self, n_workers: int = 4, batch_size: int = 64, eta: float = 0.05,
                 epochs: int = 5, fit_intercept: bool = True, scenario: Optional[dict] = None,
                 recovery: str = CONSISTENT, max_workers: int = 16, num_tensors: int = 2,
                 context_prep: float = 2.0, seed: int = 0):
        self.n_workers = n_workers
        self.batch_size = batch_size
        self.eta = eta
        self.epochs = epochs
        self.fit_intercept = fit_intercept
        self.scenario = scenario
        self.recovery = recovery
        self.max_workers = max_workers
        self.num_tensors = num_tensors
        self.context_prep = context_prep
        self.seed = seed

    def _design(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.fit_intercept:
            X = np.hstack([X, np.ones((len(X), 1))])
        return X

    def _fit(self, X, y):
        A = self._design(X)
        cfg = RunConfig(n_workers=self.n_workers, batch_size=min(self.batch_size, len(A)),
                        n_samples=len(A), n_features=A.shape[1], model=self._model,
                        eta=self.eta, epochs=self.epochs, num_tensors=self.num_tensors,
                        max_workers=self.max_workers, context_prep=self.context_prep,
                        recovery=self.recovery, seed=self.seed)
        job = ElasticJob(cfg, dataset=ArrayDataset(A, y))
        runner = ScenarioRunner(job, self.scenario or {"events": []})
        runner.install()
        job.run()
        w = job.params
        if self.fit_intercept:
            self.coef_, self.intercept_ = w[:-1].copy(), float(w[-1])
        else:
            self.coef_, self.intercept_ = w.copy(), 0.0
        self.n_features_in_ = X.shape[1]
        self.n_iter_ = job.t_cur
        self.loss_ = loss(w, A, y, self._model)
        self.assignment_log_ = job.log
        self.recoveries_ = list(job.recoveries)
        return self

    def _decision(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_ + self.intercept_


class ElasticSGDRegressor(RegressorMixin, _ElasticSGD):
    """Least-squares linear regression trained by elastic synchronous SGD."""

    _model = LEAST_SQUARES

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        return self._fit(X, y.astype(np.float64))

    def predict(self, X):
        return self._decision(X)


class ElasticLogisticClassifier(ClassifierMixin, _ElasticSGD):
    """Binary logistic regression trained by elastic synchronous SGD."""

    _model = LOGISTIC

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"need exactly two classes, got {len(self.classes_)}")
        return self._fit(X, (y == self.classes_[1]).astype(np.float64))

    def decision_function(self, X):
        return self._decision(X)

    def predict_proba(self, X):
        z = self._decision(X)
        p1 = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return self.classes_[(self._decision(X) > 0).astype(int)]
