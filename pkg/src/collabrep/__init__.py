"""Sparse and non-sparse collaborative representation for classification."""

__version__ = "0.1.0"

from .crc import (
    Prediction,
    batch_classify,
    classify_crc_l1,
    classify_crc_l2,
    fit_crc_l1,
    fit_crc_l2,
)
from .dataset import (
    LabeledDataset,
    SynthSpec,
    load_csv,
    normalize_samples,
    save_csv,
    split,
    synth_gaussian,
)
from .dictlearn import (
    BlockDictionary,
    DlConfig,
    DlnscrModel,
    classify_sample,
    classify_set,
    fit_dlnscr,
)
from .estimators import CRCL1Classifier, CRCL2Classifier, DLNSCRClassifier, MPDClassifier
from .metrics import (
    build_selection_report,
    err,
    fdr,
    fit_trend,
    mpd_classify,
    recommend,
    selection_score,
)
