"""scikit-learn compatible classifiers.

These take the usual ``(n_samples, n_features)`` arrays, validate them with
scikit-learn's helpers and delegate to the column-major core in
:mod:`collabrep.crc`, :mod:`collabrep.dictlearn` and :mod:`collabrep.metrics`.
They work with ``clone``, ``Pipeline``, ``GridSearchCV`` and friends.

Example
-------
>>> from sklearn.pipeline import make_pipeline
>>> from sklearn.preprocessing import Normalizer
>>> clf = make_pipeline(Normalizer(), CRCL2Classifier(lam=1e-3))  # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .crc import DEFAULT_LAMBDA, batch_classify, fit_crc_l1, fit_crc_l2
from .dataset import LabeledDataset
from .dictlearn import DlConfig, DlnscrModel, fit_dlnscr
from .metrics import MpdModel

__all__ = ["CRCL2Classifier", "CRCL1Classifier", "DLNSCRClassifier", "MPDClassifier"]


class _ResidualClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit/predict plumbing; subclasses implement ``_build(train)``."""

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, ids = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        train = LabeledDataset(X.T, ids + 1, tuple(str(c) for c in self.classes_))
        self.model_ = self._build(train)
        return self

    def _queries(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X.T

    def residuals(self, X):
        """Per-class residual (smaller is better), shape ``(n_samples, n_classes)``."""
        Q = self._queries(X)
        preds = self.model_.classify_many(Q)
        return np.vstack([p.residuals for p in preds])

    def decision_function(self, X):
        return -self.residuals(X)

    def predict(self, X):
        Q = self._queries(X)
        preds = self.model_.classify_many(Q)
        return self.classes_[np.array([p.label for p in preds]) - 1]

    def score_batch(self, X, y):
        """Accuracy plus the raw per-sample predictions."""
        Q = self._queries(X)
        ids = np.searchsorted(self.classes_, y) + 1
        test = LabeledDataset(Q, ids, tuple(str(c) for c in self.classes_))
        return batch_classify(self.model_, test)


class CRCL2Classifier(_ResidualClassifier):
    """Ridge-coded collaborative representation with normalized residuals.

    Parameters
    ----------
    lam : float, default=1e-4
        Ridge weight. 0.5 suits person re-identification style data.
    """

    def __init__(self, lam=DEFAULT_LAMBDA):
        self.lam = lam

    def _build(self, train):
        return fit_crc_l2(train, self.lam)


class CRCL1Classifier(_ResidualClassifier):
    """Lasso-coded (sparse) collaborative representation, i.e. SRC."""

    def __init__(self, lam=DEFAULT_LAMBDA, tol=1e-6, max_iter=20000):
        self.lam = lam
        self.tol = tol
        self.max_iter = max_iter

    def _build(self, train):
        return fit_crc_l1(train, self.lam, self.tol, self.max_iter)


class DLNSCRClassifier(_ResidualClassifier):
    """Learned class-block dictionary with ridge coding.

    Parameters
    ----------
    lam : float, default=1e-4
        Coefficient weight used for fitting (and classification unless
        ``classify_lam`` is set).
    n_atoms : int or sequence of int, default=5
        Atoms per class block; a sequence gives one size per class in
        ``classes_`` order.
    max_iter, rel_tol : stopping rule for the alternating fit.
    a_step : {"exact", "stacked"}
    extrapolate : bool
    set_rule : {"energy", "normalized"}
        Residual used by :meth:`predict_set`.
    random_state : int
        Seeds the padding atoms when a class has fewer samples than atoms.

    Attributes
    ----------
    dictionary_ : BlockDictionary
    trace_ : FitTrace
    """

    def __init__(self, lam=DEFAULT_LAMBDA, n_atoms=5, max_iter=50, rel_tol=1e-6,
                 a_step="exact", extrapolate=True, set_rule="energy",
                 classify_lam=None, random_state=0):
        self.lam = lam
        self.n_atoms = n_atoms
        self.max_iter = max_iter
        self.rel_tol = rel_tol
        self.a_step = a_step
        self.extrapolate = extrapolate
        self.set_rule = set_rule
        self.classify_lam = classify_lam
        self.random_state = random_state

    def _build(self, train):
        sizes = self.n_atoms
        if np.isscalar(sizes):
            sizes = (int(sizes),) * train.n_classes
        cfg = DlConfig(self.lam, tuple(sizes), self.max_iter, self.rel_tol,
                       self.random_state or 0, self.a_step, self.extrapolate)
        self.dictionary_, self.coef_, self.trace_ = fit_dlnscr(train, cfg)
        lam = self.lam if self.classify_lam is None else self.classify_lam
        return DlnscrModel(self.dictionary_, lam, self.set_rule)

    def predict_set(self, X):
        """One label for the whole set of rows in ``X``."""
        Q = self._queries(X)
        p = self.model_.classify_set(Q)
        return self.classes_[p.label - 1]


class MPDClassifier(_ResidualClassifier):
    """Minimum point-wise distance (nearest training sample per class)."""

    def _build(self, train):
        return MpdModel(train)

    def predict_set(self, X):
        Q = self._queries(X)
        p = self.model_.classify_set(Q)
        return self.classes_[p.label - 1]
