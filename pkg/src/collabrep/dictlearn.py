"""DL-NSCR: dictionary learning for non-sparse collaborative representation.

The learned dictionary ``D = [D_1, ..., D_L]`` (one column block per class)
and coefficients ``A`` minimize::

    ||X - D A||^2 + sum_i ||X_i - D_i A_i^i||^2
                  + sum_i sum_{j != i} ||D_i A_j^i||^2 + lam ||A||^2

where ``A_j^i`` is the row block of sub-dictionary ``i`` restricted to the
columns of class ``j``.  Fitting alternates a closed-form coefficient step
with one sweep of closed-form sub-dictionary updates.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crc import NORM_GUARD, Prediction, pick_label
from .dataset import LabeledDataset
from .exceptions import NumericalError
from .solvers import ridge_projector, ridge_solve_gram, lstsq_right

__all__ = [
    "BlockDictionary",
    "CoeffMatrix",
    "DlConfig",
    "FitTrace",
    "DlnscrModel",
    "objective",
    "init_dictionary_pca",
    "update_coefficients",
    "update_subdictionary",
    "fit_dlnscr",
    "classify_sample",
    "classify_set",
    "save_dictionary",
    "load_dictionary",
]


def _offsets(block_sizes):
    return np.concatenate([[0], np.cumsum(block_sizes)]).astype(int)


@dataclass(frozen=True, eq=False)
class BlockDictionary:
    """``d x K`` dictionary whose columns are grouped into class blocks."""

    matrix: np.ndarray
    block_sizes: tuple

    def __post_init__(self):
        D = np.array(self.matrix, dtype=float)
        sizes = tuple(int(k) for k in self.block_sizes)
        if D.ndim != 2:
            raise ValueError("dictionary must be 2-D")
        if any(k < 1 for k in sizes):
            raise ValueError("every block size must be >= 1")
        if sum(sizes) != D.shape[1]:
            raise ValueError(f"block sizes sum to {sum(sizes)}, dictionary has "
                             f"{D.shape[1]} columns")
        if not np.all(np.isfinite(D)):
            raise ValueError("dictionary contains non-finite entries")
        D.setflags(write=False)
        object.__setattr__(self, "matrix", D)
        object.__setattr__(self, "block_sizes", sizes)

    @property
    def n_classes(self):
        return len(self.block_sizes)

    @property
    def offsets(self):
        return _offsets(self.block_sizes)

    def cols(self, i):
        """Column slice of block ``i`` (1-based)."""
        off = self.offsets
        return slice(off[i - 1], off[i])

    def block(self, i):
        return self.matrix[:, self.cols(i)]


@dataclass(frozen=True, eq=False)
class CoeffMatrix:
    """``K x n`` coefficients; row blocks follow the dictionary blocks."""

    matrix: np.ndarray
    block_sizes: tuple

    def rows(self, i):
        off = _offsets(self.block_sizes)
        return slice(off[i - 1], off[i])

    def row_block(self, i):
        return self.matrix[self.rows(i)]


@dataclass
class DlConfig:
    """Fit settings.

    ``a_step`` selects the coefficient update: ``"exact"`` minimizes the full
    objective over ``A``; ``"stacked"`` solves the reduced stacked system in
    which the cross-class term is ``||sum_{j != i} D_j A_i^j||^2``.  The two
    coincide for two classes.  ``extrapolate`` enables a safeguarded
    extrapolation of ``D`` (accepted only when it lowers the objective).
    """

    lam: float
    block_sizes: tuple
    max_iters: int = 50
    rel_tol: float = 1e-6
    seed: int = 0
    a_step: str = "exact"
    extrapolate: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        self.block_sizes = tuple(int(k) for k in self.block_sizes)
        if not self.block_sizes or any(k < 1 for k in self.block_sizes):
            raise ValueError("block sizes must be positive integers")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.a_step not in ("exact", "stacked"):
            raise ValueError(f"unknown a_step {self.a_step!r}")


@dataclass
class FitTrace:
    objective: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    fallbacks: int = 0
    extrapolations: int = 0

    def record(self, step, value):
        self.steps.append(step)
        self.objective.append(float(value))

    def is_monotone(self, rtol=1e-10):
        f = np.asarray(self.objective)
        return bool(np.all(f[1:] <= f[:-1] + rtol * np.abs(f[:-1])))

    def to_dict(self):
        return {
            "objective": self.objective,
            "steps": self.steps,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "fallbacks": self.fallbacks,
            "extrapolations": self.extrapolations,
        }


def _raw(obj):
    return obj.matrix if hasattr(obj, "matrix") else np.asarray(obj, dtype=float)


def _check_shapes(X, D, A, block_sizes):
    d, n = X.features.shape
    if D.shape[0] != d:
        raise ValueError(f"dictionary has {D.shape[0]} rows, data has {d}")
    if len(block_sizes) != X.n_classes:
        raise ValueError(f"{len(block_sizes)} dictionary blocks for {X.n_classes} classes")
    if A is not None and A.shape != (D.shape[1], n):
        raise ValueError(f"coefficients have shape {A.shape}, expected {(D.shape[1], n)}")


def objective(X: LabeledDataset, D, A, lam, block_sizes=None) -> float:
    """Full training objective (fidelity terms plus ``lam * ||A||_F^2``)."""
    Dm, Am = _raw(D), _raw(A)
    sizes = block_sizes if block_sizes is not None else D.block_sizes
    _check_shapes(X, Dm, Am, sizes)
    Xm, lab = X.features, X.labels
    off = _offsets(sizes)
    total = np.sum((Xm - Dm @ Am) ** 2)
    for i in range(len(sizes)):
        sl = slice(off[i], off[i + 1])
        own = lab == i + 1
        DA = Dm[:, sl] @ Am[sl]          # D_i A^i over all samples
        total += np.sum((Xm[:, own] - DA[:, own]) ** 2)
        total += np.sum(DA[:, ~own] ** 2)
    return float(total + lam * np.sum(Am ** 2))


def init_dictionary_pca(train: LabeledDataset, block_sizes, seed=0) -> BlockDictionary:
    """Top left singular vectors of each ``X_i`` (no centering).

    Blocks wider than ``rank(X_i)`` are padded with random unit vectors.
    """
    sizes = tuple(int(k) for k in block_sizes)
    if len(sizes) != train.n_classes:
        raise ValueError(f"need {train.n_classes} block sizes, got {len(sizes)}")
    if any(k < 1 for k in sizes):
        raise ValueError("block sizes must be >= 1")
    rng = np.random.default_rng(seed)
    d = train.dim
    blocks = []
    for i, k in enumerate(sizes, start=1):
        Xi = train.class_block(i)
        U, s, _ = np.linalg.svd(Xi, full_matrices=False)
        rank = int(np.sum(s > s[0] * max(Xi.shape) * np.finfo(float).eps)) if s[0] > 0 else 0
        take = min(k, rank)
        fill = rng.standard_normal((d, k - take))
        fill /= np.linalg.norm(fill, axis=0)
        blocks.append(np.hstack([U[:, :take], fill]))
    return BlockDictionary(np.hstack(blocks), sizes)


def _coefficient_step(Xm, lab, Dm, sizes, lam, a_step):
    off = _offsets(sizes)
    G = Dm.T @ Dm
    R = Dm.T @ Xm
    L = len(sizes)
    if a_step == "exact":
        # one system for every class: G + blockdiag(G_11, ..., G_LL)
        M = G.copy()
        for i in range(L):
            sl = slice(off[i], off[i + 1])
            M[sl, sl] += G[sl, sl]
            # own-block rows of own-class columns get D_i^T X_i twice
            R[sl] *= np.where(lab == i + 1, 2.0, 1.0)
        return ridge_solve_gram(M, R, lam)

    A = np.empty((Dm.shape[1], Xm.shape[1]))
    K = Dm.shape[1]
    for i in range(L):
        inside = np.zeros(K, dtype=bool)
        inside[off[i]:off[i + 1]] = True
        Gin = np.where(np.outer(inside, inside), G, 0.0)
        Gout = np.where(np.outer(~inside, ~inside), G, 0.0)
        own = lab == i + 1
        rhs = R[:, own]
        rhs[inside] *= 2.0
        A[:, own] = ridge_solve_gram(G + Gin + Gout, rhs, lam)
    return A


def update_coefficients(X: LabeledDataset, D, lam, a_step="exact") -> CoeffMatrix:
    """Closed-form coefficient step for a fixed dictionary.

    Classes are independent sub-problems; the block selections are applied
    structurally (masks on ``D^T D``) rather than with selector matrices.
    """
    sizes = D.block_sizes
    Dm = D.matrix
    _check_shapes(X, Dm, None, sizes)
    A = _coefficient_step(X.features, X.labels, Dm, sizes, lam, a_step)
    return CoeffMatrix(A, sizes)


def update_subdictionary(X: LabeledDataset, D, A, i, eps=None, block_sizes=None):
    """Least-squares update of block ``i`` (1-based) with the others fixed.

    Returns ``(D_i, fallback)``; ``fallback`` is True when the regularized
    route was needed because ``V_i V_i^T`` was singular.
    """
    Dm, Am = _raw(D), _raw(A)
    sizes = block_sizes or getattr(D, "block_sizes", None) or A.block_sizes
    off = _offsets(sizes)
    sl = slice(off[i - 1], off[i])
    rest = np.ones(Dm.shape[1], dtype=bool)
    rest[sl] = False
    Xm = X.features
    own = X.labels == i
    Ai = Am[sl]
    U = np.hstack([Xm - Dm[:, rest] @ Am[rest], Xm[:, own],
                   np.zeros((Xm.shape[0], int((~own).sum())))])
    V = np.hstack([Ai, Ai[:, own], Ai[:, ~own]])
    return lstsq_right(U, V, eps)


def _sweep(X, Dm, Am, sizes):
    off = _offsets(sizes)
    Dm = Dm.copy()
    fallbacks = 0
    for i in range(1, len(sizes) + 1):
        Di, fb = update_subdictionary(X, Dm, Am, i, block_sizes=sizes)
        Dm[:, off[i - 1]:off[i]] = Di
        fallbacks += fb
    return Dm, fallbacks


def fit_dlnscr(train: LabeledDataset, config: DlConfig, init=None):
    """Alternate coefficient steps and dictionary sweeps until the relative
    objective change over one iteration drops below ``config.rel_tol``.

    Returns ``(BlockDictionary, CoeffMatrix, FitTrace)``.  The trace holds the
    objective after every half-step, starting from the initial dictionary with
    zero coefficients.
    """
    sizes = config.block_sizes
    if len(sizes) != train.n_classes:
        raise ValueError(f"need {train.n_classes} block sizes, got {len(sizes)}")
    D0 = init if init is not None else init_dictionary_pca(train, sizes, config.seed)
    Dm = np.array(D0.matrix)
    Xm, lab, lam = train.features, train.labels, config.lam
    Am = np.zeros((Dm.shape[1], train.n_samples))

    def f(Dx, Ax):
        with np.errstate(over="ignore", invalid="ignore"):
            v = objective(train, Dx, Ax, lam, sizes)
        if not np.isfinite(v):
            raise NumericalError("objective became non-finite; input is numerically "
                                 "degenerate (check scaling and lambda)")
        return v

    trace = FitTrace()
    f_prev = f(Dm, Am)
    trace.record("init", f_prev)
    D_last = None
    beta = 1.0
    for it in range(1, config.max_iters + 1):
        Am = _coefficient_step(Xm, lab, Dm, sizes, lam, config.a_step)
        fa = f(Dm, Am)
        if config.extrapolate and D_last is not None:
            De = Dm + beta * (Dm - D_last)
            Ae = _coefficient_step(Xm, lab, De, sizes, lam, config.a_step)
            fe = f(De, Ae)
            if fe < fa:
                Dm, Am, fa = De, Ae, fe
                trace.extrapolations += 1
                beta = min(1.5 * beta, 8.0)
            else:
                beta = max(0.5 * beta, 0.125)
        trace.record("A", fa)
        D_last = Dm
        Dm, fb = _sweep(train, Dm, Am, sizes)
        trace.fallbacks += fb
        fd = f(Dm, Am)
        trace.record("D", fd)
        trace.n_iter = it
        if abs(f_prev - fd) <= config.rel_tol * max(abs(fd), np.finfo(float).tiny):
            trace.converged = True
            break
        f_prev = fd

    return BlockDictionary(Dm, sizes), CoeffMatrix(Am, sizes), trace


@dataclass(frozen=True, eq=False)
class DlnscrModel:
    """Learned dictionary plus the ridge projector used to code queries."""

    dictionary: BlockDictionary
    lam: float
    set_rule: str = "energy"

    def __post_init__(self):
        if self.set_rule not in ("energy", "normalized"):
            raise ValueError(f"unknown set rule {self.set_rule!r}")
        object.__setattr__(self, "_proj", ridge_projector(self.dictionary.matrix, self.lam))

    def codes(self, Y):
        return self._proj.matrix @ Y

    def classify(self, y):
        return classify_sample(self, self.lam, y)

    def classify_many(self, Y):
        Y = np.asarray(Y, dtype=float)
        D = self.dictionary
        A = self.codes(Y)
        L = D.n_classes
        res = np.empty((L, Y.shape[1]))
        norms = np.empty((L, Y.shape[1]))
        for i in range(1, L + 1):
            Ai = A[D.cols(i)]
            E = Y - D.block(i) @ Ai
            res[i - 1] = np.einsum("ij,ij->j", E, E)
            norms[i - 1] = np.linalg.norm(Ai, axis=0)
        res /= np.maximum(norms, NORM_GUARD)
        return [Prediction(pick_label(res[:, j]), res[:, j], norms[:, j])
                for j in range(Y.shape[1])]

    def classify_set(self, Y):
        return classify_set(self, self.lam, Y, self.set_rule)


def _as_model(D, lam):
    if isinstance(D, DlnscrModel) and D.lam == lam:
        return D
    if isinstance(D, DlnscrModel):
        D = D.dictionary
    return DlnscrModel(D, float(lam))


def _query(Y, d):
    Y = np.asarray(Y, dtype=float)
    if Y.shape[0] != d:
        raise ValueError(f"query has {Y.shape[0]} rows, dictionary has {d}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("query contains non-finite entries")
    return Y


def classify_sample(D, lam, y) -> Prediction:
    """Ridge-code ``y`` over ``D`` and score blocks by ``||y - D_i a_i||^2 / ||a_i||``."""
    model = _as_model(D, lam)
    y = _query(y, model.dictionary.matrix.shape[0])
    if y.ndim != 1:
        raise ValueError("classify_sample expects a single vector")
    return model.classify_many(y[:, None])[0]


def classify_set(D, lam, Y, rule="energy") -> Prediction:
    """Classify the columns of ``Y`` jointly.

    ``rule="energy"``: ``||Y - D_i A^i||^2 + sum_{j != i} ||D_j A^j||^2``.
    ``rule="normalized"``: ``||Y - D_i A^i||^2 / ||A^i||``.
    """
    model = _as_model(D, lam)
    Dict = model.dictionary
    Y = _query(Y, Dict.matrix.shape[0])
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[1] < 1:
        raise ValueError("empty query set")
    A = model.codes(Y)
    L = Dict.n_classes
    own_err = np.empty(L)
    energy = np.empty(L)
    norms = np.empty(L)
    for i in range(1, L + 1):
        Ai = A[Dict.cols(i)]
        DA = Dict.block(i) @ Ai
        own_err[i - 1] = np.sum((Y - DA) ** 2)
        energy[i - 1] = np.sum(DA ** 2)
        norms[i - 1] = np.linalg.norm(Ai)
    if rule == "energy":
        res = own_err + (energy.sum() - energy)
    elif rule == "normalized":
        res = own_err / np.maximum(norms, NORM_GUARD)
    else:
        raise ValueError(f"unknown set rule {rule!r}")
    return Prediction(pick_label(res), res, norms)


_FORMAT = "collabrep-dictionary"


def save_dictionary(path, dictionary: BlockDictionary, lam, meta=None):
    """Write a self-describing JSON container; float data is stored as raw
    little-endian float64 bytes (base64) so reloads are bit-exact."""
    D = np.ascontiguousarray(dictionary.matrix, dtype="<f8")
    doc = {
        "format": _FORMAT,
        "version": 1,
        "shape": list(D.shape),
        "dtype": "<f8",
        "block_sizes": list(dictionary.block_sizes),
        "lambda1": float(lam),
        "data": base64.b64encode(D.tobytes(order="C")).decode("ascii"),
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, path)


def load_dictionary(path):
    """Inverse of :func:`save_dictionary`; returns ``(dictionary, lam, meta)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _FORMAT:
        raise ValueError(f"{path} is not a {_FORMAT} file")
    raw = base64.b64decode(doc["data"])
    D = np.frombuffer(raw, dtype=doc["dtype"]).reshape(doc["shape"]).astype(float)
    return BlockDictionary(D, tuple(doc["block_sizes"])), doc["lambda1"], doc["meta"]
