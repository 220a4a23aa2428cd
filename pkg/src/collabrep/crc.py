"""Collaborative-representation classifiers.

``CRC_l2`` codes a query with ridge regression over the whole training matrix
(one precomputed projector) and scores class ``i`` by the normalized residual
``||y - X_i a_i||^2 / ||a_i||``.  ``CRC_l1`` (SRC) codes with the lasso and
scores by the plain residual ``||y - X_i a_i||^2``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import LabeledDataset
from .exceptions import ConvergenceWarning
from .solvers import RidgeProjector, lasso_prox, ridge_projector, spectral_norm_sq

__all__ = [
    "Prediction",
    "BatchResult",
    "CrcL2Model",
    "CrcL1Model",
    "fit_crc_l2",
    "fit_crc_l1",
    "classify_crc_l2",
    "classify_crc_l1",
    "batch_classify",
    "pick_label",
    "DEFAULT_LAMBDA",
    "REID_LAMBDA",
]

DEFAULT_LAMBDA = 1e-4
REID_LAMBDA = 0.5
NORM_GUARD = 1e-12
TIE_RTOL = 1e-10


def pick_label(residuals) -> int:
    """1-based argmin; values within ``TIE_RTOL`` of the minimum count as ties
    and the lowest class id wins."""
    r = np.asarray(residuals, dtype=float)
    lo = r.min()
    return int(np.flatnonzero(r <= lo + TIE_RTOL * abs(lo))[0]) + 1


@dataclass
class Prediction:
    label: int
    residuals: np.ndarray
    block_norms: np.ndarray
    converged: bool = True

    def ranking(self):
        """Class ids ordered from most to least likely (stable on ties)."""
        return np.argsort(self.residuals, kind="stable") + 1


def _block_scores(X, labels, n_classes, Y, A, normalize):
    """Residuals and coefficient block norms for every column of ``Y``.

    Returns two ``(n_classes, m)`` arrays.
    """
    m = Y.shape[1]
    res = np.empty((n_classes, m))
    norms = np.empty((n_classes, m))
    for i in range(n_classes):
        sel = labels == i + 1
        Ai = A[sel]
        E = Y - X[:, sel] @ Ai
        res[i] = np.einsum("ij,ij->j", E, E)
        norms[i] = np.linalg.norm(Ai, axis=0)
    if normalize:
        res = res / np.maximum(norms, NORM_GUARD)
    return res, norms


def _check_query(y, d):
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != d:
        raise ValueError(f"query must be a vector of length {d}, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("query contains non-finite entries")
    return y


@dataclass(frozen=True, eq=False)
class CrcL2Model:
    train: LabeledDataset
    projector: RidgeProjector
    lam: float

    def codes(self, Y):
        return self.projector.matrix @ Y

    def classify(self, y) -> Prediction:
        return classify_crc_l2(self, y)

    def classify_many(self, Y):
        Y = np.asarray(Y, dtype=float)
        tr = self.train
        res, norms = _block_scores(tr.features, tr.labels, tr.n_classes, Y,
                                   self.codes(Y), normalize=True)
        return [Prediction(pick_label(res[:, j]), res[:, j], norms[:, j])
                for j in range(Y.shape[1])]


def fit_crc_l2(train: LabeledDataset, lam: float = DEFAULT_LAMBDA) -> CrcL2Model:
    return CrcL2Model(train, ridge_projector(train.features, lam), float(lam))


def classify_crc_l2(model: CrcL2Model, y) -> Prediction:
    y = _check_query(y, model.train.dim)
    return model.classify_many(y[:, None])[0]


@dataclass(frozen=True, eq=False)
class CrcL1Model:
    """Training data plus the lasso design quantities reused across queries."""

    train: LabeledDataset
    lam: float
    tol: float = 1e-6
    max_iter: int = 20000
    gram: np.ndarray = field(default=None, repr=False)
    lipschitz: float = field(default=None, repr=False)

    def classify(self, y) -> Prediction:
        return classify_crc_l1(self.train, y, self.lam, self.tol, self.max_iter,
                               gram=self.gram, lipschitz=self.lipschitz)

    def classify_many(self, Y):
        return [self.classify(Y[:, j]) for j in range(Y.shape[1])]


def fit_crc_l1(train: LabeledDataset, lam: float = DEFAULT_LAMBDA, tol: float = 1e-6,
               max_iter: int = 20000) -> CrcL1Model:
    if not lam > 0:
        raise ValueError("lambda must be positive")
    X = train.features
    return CrcL1Model(train, float(lam), tol, max_iter, X.T @ X, spectral_norm_sq(X))


def classify_crc_l1(train: LabeledDataset, y, lam=DEFAULT_LAMBDA, tol=1e-6,
                    max_iter=20000, *, gram=None, lipschitz=None) -> Prediction:
    """Sparse coding over the full training matrix, then per-class residual.

    A lasso run that hits ``max_iter`` still yields a label from the best
    iterate; the prediction is flagged ``converged=False``.
    """
    y = _check_query(y, train.dim)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        sol = lasso_prox(train.features, y, lam, tol, max_iter,
                         gram=gram, lipschitz=lipschitz)
    if not sol.converged:
        warnings.warn(f"CRC_l1 coding did not converge (residual "
                      f"{sol.optimality_residual:.2e}); label is best-effort",
                      ConvergenceWarning, stacklevel=2)
    res, norms = _block_scores(train.features, train.labels, train.n_classes,
                               y[:, None], sol.coef[:, None], normalize=False)
    return Prediction(pick_label(res[:, 0]), res[:, 0], norms[:, 0], sol.converged)


@dataclass
class BatchResult:
    predictions: list
    truths: np.ndarray
    accuracy: float
    residuals: np.ndarray  # (m, L), input for rank-k curves

    @property
    def labels(self):
        return np.array([p.label for p in self.predictions])


def batch_classify(model, test: LabeledDataset) -> BatchResult:
    """Classify every column of ``test`` with ``model`` (anything exposing
    ``classify_many`` or ``classify``); order is preserved."""
    if test is None or test.n_samples == 0:
        raise ValueError("empty test set")
    if hasattr(model, "classify_many"):
        preds = model.classify_many(test.features)
    else:
        preds = [model.classify(test.features[:, j]) for j in range(test.n_samples)]
    truths = np.asarray(test.labels)
    correct = np.array([p.label for p in preds]) == truths
    return BatchResult(preds, truths, float(correct.mean()),
                       np.vstack([p.residuals for p in preds]))
