"""Evaluation and regularizer pre-selection.

The minimum point-wise distance (MPD) classifier measures how discriminative a
feature space is; its accuracy relative to chance (FDR), scaled by the ratio
of feature dimension to training-set size, gives a score that predicts
whether l2 (non-sparse) coding will beat l1 (sparse) coding.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np
from scipy.spatial.distance import cdist

from .crc import Prediction, batch_classify, fit_crc_l1, fit_crc_l2, pick_label
from .dataset import LabeledDataset

__all__ = [
    "DEFAULT_THRESHOLD",
    "MpdModel",
    "SelectionReport",
    "TrendFit",
    "mpd_classify",
    "accuracy",
    "rank_k_accuracy",
    "err",
    "fdr",
    "selection_score",
    "selection_scores",
    "recommend",
    "report_from_values",
    "build_selection_report",
    "fit_trend",
    "load_reference_table",
    "table_rows",
    "write_table_csv",
]

DEFAULT_THRESHOLD = 5.0


def _min_class_distances(train: LabeledDataset, Q):
    """(L, m) matrix of min distance from each query column to each class."""
    dist = cdist(Q.T, train.features.T)
    out = np.empty((train.n_classes, Q.shape[1]))
    for i, cols in enumerate(train.class_index):
        out[i] = dist[:, cols].min(axis=1)
    return out


def mpd_classify(train: LabeledDataset, query) -> Prediction:
    """Nearest class by minimum Euclidean distance between any query column
    and any training column of the class."""
    Q = np.asarray(query, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
    if Q.shape[0] != train.dim:
        raise ValueError(f"query has dimension {Q.shape[0]}, training data {train.dim}")
    if Q.shape[1] < 1:
        raise ValueError("empty query")
    r = _min_class_distances(train, Q).min(axis=1)
    return Prediction(pick_label(r), r, np.zeros_like(r))


@dataclass(frozen=True, eq=False)
class MpdModel:
    train: LabeledDataset

    def classify(self, y):
        return mpd_classify(self.train, y)

    def classify_many(self, Y):
        Y = np.asarray(Y, dtype=float)
        if Y.shape[0] != self.train.dim:
            raise ValueError("query dimension mismatch")
        D = _min_class_distances(self.train, Y)
        zeros = np.zeros(self.train.n_classes)
        return [Prediction(pick_label(D[:, j]), D[:, j], zeros) for j in range(Y.shape[1])]

    def classify_set(self, Y):
        return mpd_classify(self.train, Y)


def accuracy(predictions, truths) -> float:
    pred = np.asarray([getattr(p, "label", p) for p in predictions])
    truths = np.asarray(truths)
    if pred.shape != truths.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions, "
                         f"{truths.shape[0]} truths")
    if pred.size == 0:
        raise ValueError("no predictions")
    return float(np.mean(pred == truths))


def rank_k_accuracy(residuals, truths, k) -> float:
    """Fraction of queries whose true class is among the ``k`` smallest residuals.

    ``residuals`` is ``(m, L)``; ``truths`` holds 1-based class ids.
    """
    R = np.asarray(residuals, dtype=float)
    truths = np.asarray(truths)
    if R.ndim != 2 or R.shape[0] != truths.shape[0]:
        raise ValueError("residuals must be (m, L) with one row per truth")
    L = R.shape[1]
    if not 1 <= k <= L:
        raise ValueError(f"k must be in [1, {L}]")
    order = np.argsort(R, axis=1, kind="stable")[:, :k] + 1
    return float(np.mean(np.any(order == truths[:, None], axis=1)))


def err(acc_l1, acc_l2) -> float:
    """Error reduction rate of l2 coding over l1 coding.

    ``(acc_l2 - acc_l1) / (1 - acc_l1)``; undefined when ``acc_l1 == 1``.
    """
    if acc_l1 >= 1.0:
        raise ValueError("ERR is undefined when the l1 accuracy is 1")
    return (acc_l2 - acc_l1) / (1.0 - acc_l1)


def fdr(mpd_accuracy, n_classes) -> float:
    """MPD accuracy divided by chance accuracy ``1 / L``."""
    if n_classes < 2:
        raise ValueError("FDR needs at least two classes")
    return mpd_accuracy * n_classes


def selection_scores(fdr_value, d, n) -> dict:
    if d < 1 or n < 1:
        raise ValueError("d and n must be >= 1")
    return {
        "fdr_d": fdr_value * d,
        "fdr_over_n": fdr_value / n,
        "score": fdr_value * d / n,
    }


def selection_score(fdr_value, d, n) -> float:
    return selection_scores(fdr_value, d, n)["score"]


def recommend(score, threshold=DEFAULT_THRESHOLD) -> str:
    """``"non-sparse"`` when ``score >= threshold``, else ``"sparse"``."""
    return "non-sparse" if score >= threshold else "sparse"


@dataclass
class SelectionReport:
    d: int
    n: int
    n_classes: int
    mpd_accuracy: float
    fdr: float
    score_fdr_d: float
    score_fdr_over_n: float
    score: float
    threshold: float
    recommendation: str
    err: float = None
    acc_l1: float = None
    acc_l2: float = None

    def to_dict(self):
        return asdict(self)


def report_from_values(d, n, n_classes, mpd_accuracy, acc_l1=None, acc_l2=None,
                       threshold=DEFAULT_THRESHOLD) -> SelectionReport:
    """Assemble a report from already-measured accuracies."""
    f = fdr(mpd_accuracy, n_classes)
    s = selection_scores(f, d, n)
    e = None
    if acc_l1 is not None and acc_l2 is not None:
        e = err(acc_l1, acc_l2)
    return SelectionReport(int(d), int(n), int(n_classes), float(mpd_accuracy), f,
                           s["fdr_d"], s["fdr_over_n"], s["score"], float(threshold),
                           recommend(s["score"], threshold), e, acc_l1, acc_l2)


def build_selection_report(train: LabeledDataset, test: LabeledDataset, *,
                           lam_l1=1e-4, lam_l2=1e-4, with_err=False, tol=1e-6,
                           max_iter=20000, threshold=DEFAULT_THRESHOLD) -> SelectionReport:
    """Run MPD on ``test`` for FDR and, with ``with_err``, both CRC models for ERR."""
    acc_mpd = batch_classify(MpdModel(train), test).accuracy
    acc_l1 = acc_l2 = None
    if with_err:
        acc_l1 = batch_classify(fit_crc_l1(train, lam_l1, tol, max_iter), test).accuracy
        acc_l2 = batch_classify(fit_crc_l2(train, lam_l2), test).accuracy
        if acc_l1 >= 1.0:
            # ERR undefined; keep the accuracies, leave err empty
            rep = report_from_values(train.dim, train.n_samples, train.n_classes,
                                     acc_mpd, threshold=threshold)
            rep.acc_l1, rep.acc_l2 = acc_l1, acc_l2
            return rep
    return report_from_values(train.dim, train.n_samples, train.n_classes, acc_mpd,
                              acc_l1, acc_l2, threshold)


@dataclass
class TrendFit:
    slope: float
    intercept: float
    sse: float


def fit_trend(scores, errs) -> TrendFit:
    """Least-squares line ``err ~ slope * score + intercept``."""
    x = np.asarray(scores, dtype=float)
    y = np.asarray(errs, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("scores and errs must be 1-D and of equal length")
    if x.size < 2:
        raise ValueError("need at least two points")
    if np.ptp(x) == 0:
        raise ValueError("all scores identical; slope is undetermined")
    design = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ np.array([slope, intercept])
    return TrendFit(float(slope), float(intercept), float(resid @ resid))


_INT_FIELDS = ("d", "C", "n")
_FLOAT_FIELDS = ("mpd", "fdr", "fdr_d", "fdr_over_n", "score", "crc_l1", "crc_l2", "err")


def _parse_table(text):
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {"dataset": rec["dataset"], "starred": rec.get("starred", "0") in ("1", "true", "True"),
               "n_i": rec.get("n_i", "")}
        for k in _INT_FIELDS:
            row[k] = int(rec[k])
        for k in _FLOAT_FIELDS:
            v = rec.get(k, "")
            row[k] = float(v) if v not in ("", None) else None
        rows.append(row)
    return rows


def load_reference_table(path=None):
    """Raw statistics and published derived columns for 13 benchmark settings.

    With ``path`` a user file in the same CSV layout is read instead.
    """
    if path is None:
        text = resources.files("collabrep").joinpath("data/reference_table.csv").read_text()
    else:
        with open(path, newline="") as fh:
            text = fh.read()
    return _parse_table(text)


def table_rows(rows, threshold=DEFAULT_THRESHOLD):
    """Recompute every derived column from the raw ones.

    Returns one dict per row holding the raw inputs plus ``report``.
    """
    out = []
    for r in rows:
        rep = report_from_values(r["d"], r["n"], r["C"], r["mpd"],
                                 r.get("crc_l1"), r.get("crc_l2"), threshold)
        out.append({"dataset": r["dataset"], "starred": r["starred"],
                    "n_i": r["n_i"], "report": rep})
    return out


TABLE_HEADER = ["Dataset", "d", "C", "n_i", "n", "MPD", "FDR", "FDR*d", "FDR/n",
                "FDR*d/n", "CRC_l1", "CRC_l2", "ERR"]


def write_table_csv(computed, fh):
    """Emit rows from :func:`table_rows` in the statistics / prediction /
    actual-performance column order."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for row in computed:
        r = row["report"]
        name = row["dataset"] + ("*" if row["starred"] else "")

        def fmt(v, spec):
            return "" if v is None else format(v, spec)

        w.writerow([name, r.d, r.n_classes, row["n_i"], r.n, fmt(r.mpd_accuracy, ".3f"),
                    fmt(r.fdr, ".2f"), fmt(r.score_fdr_d, ".0f"),
                    fmt(r.score_fdr_over_n, ".4f"), fmt(r.score, ".2f"),
                    fmt(r.acc_l1, ".3f"), fmt(r.acc_l2, ".3f"), fmt(r.err, ".3f")])
