"""Command-line harness: ``collabrep {synth,eval,select,compare,fit-dict}``.

Every command prints a JSON report (also written to ``--out`` when given).
Settings may come from ``--config file.json``; explicit flags win.  Wall-clock
numbers live under ``"timing"`` keys so the rest of a report is
byte-identical across reruns with the same settings.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 data/I-O error.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .crc import DEFAULT_LAMBDA, REID_LAMBDA, batch_classify, fit_crc_l1, fit_crc_l2
from .dataset import (LabeledDataset, SynthSpec, load_csv, normalize_samples, save_csv,
                      split_indices, synth_gaussian)
from .dictlearn import DlConfig, DlnscrModel, fit_dlnscr, save_dictionary
from .exceptions import ConvergenceWarning, DatasetError, NumericalError
from .metrics import (DEFAULT_THRESHOLD, MpdModel, accuracy, build_selection_report,
                      fit_trend, load_reference_table, rank_k_accuracy, table_rows,
                      write_table_csv)

log = logging.getLogger("collabrep")

EXIT_USAGE, EXIT_NUMERIC, EXIT_DATA = 2, 3, 4
MODELS = ("mpd", "crc-l1", "crc-l2", "dl-nscr")

DEFAULTS = {
    "data": None,
    "label_column": "label",
    "normalize": False,
    "synth_classes": None,
    "synth_dim": None,
    "synth_per_class": None,
    "synth_separation": None,
    "synth_seed": 0,
    "train_per_class": None,
    "splits": 10,
    "seed": 0,
    "model": None,
    "models": None,
    "lam": None,
    "reid": False,
    "block_size": None,
    "max_iters": 50,
    "rel_tol": 1e-6,
    "classify_lam": None,
    "a_step": "exact",
    "extrapolate": True,
    "set_size": 1,
    "set_rule": "energy",
    "rank_k": None,
    "lasso_tol": 1e-6,
    "lasso_max_iter": 20000,
    "threshold": DEFAULT_THRESHOLD,
    "from_table": None,
    "with_err": False,
    "include_starred": False,
    "out": None,
    "csv": None,
    "trend_csv": None,
    "dict_out": None,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parsing

def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="CSV file (header row, one sample per row)")
    g.add_argument("--label-column")
    g.add_argument("--normalize", action="store_const", const=True,
                   help="scale every sample to unit l2 norm")
    g.add_argument("--synth-classes", type=int)
    g.add_argument("--synth-dim", type=int)
    g.add_argument("--synth-per-class", type=int)
    g.add_argument("--synth-separation", type=float)
    g.add_argument("--synth-seed", type=int)


def _add_split_args(p):
    g = p.add_argument_group("splits")
    g.add_argument("--train-per-class", type=int,
                   help="default: half the smallest class")
    g.add_argument("--splits", type=int)
    g.add_argument("--seed", type=int, help="split i uses seed + i")


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--lam", type=float, help=f"regularizer (default {DEFAULT_LAMBDA})")
    g.add_argument("--reid", action="store_const", const=True,
                   help=f"use the re-identification default lambda {REID_LAMBDA}")
    g.add_argument("--block-size", help="DL atoms per class: N or N1,N2,...")
    g.add_argument("--max-iters", type=int)
    g.add_argument("--rel-tol", type=float)
    g.add_argument("--classify-lam", type=float,
                   help="DL coding lambda at test time (default: fit lambda)")
    g.add_argument("--a-step", choices=("exact", "stacked"))
    g.add_argument("--no-extrapolate", dest="extrapolate", action="store_const", const=False)
    g.add_argument("--set-size", type=int, help="classify test samples in same-class sets")
    g.add_argument("--set-rule", choices=("energy", "normalized"))
    g.add_argument("--rank-k", type=int)
    g.add_argument("--lasso-tol", type=float)
    g.add_argument("--lasso-max-iter", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="collabrep", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with default settings")
        p.add_argument("--out", help="write the JSON report here")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a Gaussian-cluster dataset CSV")
    common(p)
    _add_data_args(p)

    p = sub.add_parser("eval", help="evaluate one model over seeded splits")
    common(p)
    _add_data_args(p)
    _add_split_args(p)
    p.add_argument("--model", choices=MODELS)
    _add_model_args(p)

    p = sub.add_parser("select", help="sparse vs non-sparse pre-selection report")
    common(p)
    _add_data_args(p)
    _add_split_args(p)
    _add_model_args(p)
    p.add_argument("--from-table", nargs="?", const="builtin",
                   help="use raw statistics from a table CSV (default: bundled table)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--with-err", action="store_const", const=True,
                   help="also run both CRC models to measure ERR")
    p.add_argument("--include-starred", action="store_const", const=True,
                   help="keep starred rows in the trend fits")
    p.add_argument("--csv", help="write the table layout CSV here")
    p.add_argument("--trend-csv", help="write plot-ready score/ERR points here")

    p = sub.add_parser("compare", help="compare several models on identical splits")
    common(p)
    _add_data_args(p)
    _add_split_args(p)
    p.add_argument("--models", help="comma-separated subset of " + ",".join(MODELS))
    _add_model_args(p)
    p.add_argument("--csv", help="write the comparison table here")

    p = sub.add_parser("fit-dict", help="learn a DL-NSCR dictionary")
    common(p)
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--dict-out", help="dictionary container path")
    return parser


def resolve_config(args):
    """Defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DatasetError(f"no such config file: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        for k, v in loaded.items():
            key = k.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {k!r}")
            cfg[key] = v
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            cfg[k] = v
    cfg["command"] = args.command
    return cfg


# ---------------------------------------------------------------- helpers

def _synth_spec(cfg):
    fields = ("synth_classes", "synth_dim", "synth_per_class", "synth_separation")
    if any(cfg[f] is None for f in fields):
        return None
    try:
        return SynthSpec(cfg["synth_classes"], cfg["synth_dim"], cfg["synth_per_class"],
                         cfg["synth_separation"], cfg["synth_seed"])
    except ValueError as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None


def _load_dataset(cfg) -> LabeledDataset:
    spec = _synth_spec(cfg)
    if cfg["data"] and spec:
        raise UsageError("give either --data or the --synth-* flags, not both")
    if cfg["data"]:
        ds = load_csv(cfg["data"], cfg["label_column"])
    elif spec:
        ds = synth_gaussian(spec)
    else:
        raise UsageError("no dataset: pass --data or all of --synth-classes/-dim/"
                         "-per-class/-separation")
    return normalize_samples(ds) if cfg["normalize"] else ds


def _lam(cfg):
    if cfg["lam"] is not None:
        return float(cfg["lam"])
    return REID_LAMBDA if cfg["reid"] else DEFAULT_LAMBDA


def _block_sizes(cfg, n_classes):
    raw = cfg["block_size"]
    if raw is None:
        raise UsageError("dl-nscr needs --block-size")
    if isinstance(raw, int):
        sizes = (raw,) * n_classes
    else:
        parts = [int(s) for s in str(raw).split(",") if s.strip()]
        sizes = tuple(parts * n_classes) if len(parts) == 1 else tuple(parts)
    if len(sizes) != n_classes or any(k < 1 for k in sizes):
        raise UsageError(f"--block-size must give 1 or {n_classes} positive sizes")
    return sizes


def _splits(cfg, ds):
    tpc = cfg["train_per_class"]
    if tpc is None:
        tpc = max(1, int(ds.class_sizes.min()) // 2)
    if not 1 <= tpc < ds.class_sizes.min():
        raise UsageError(f"--train-per-class must be in [1, {ds.class_sizes.min() - 1}]")
    if cfg["splits"] < 1:
        raise UsageError("--splits must be >= 1")
    out = []
    for k in range(cfg["splits"]):
        seed = cfg["seed"] + k
        tr, te = split_indices(ds, tpc, seed)
        h = hashlib.sha256(tr.astype("<i8").tobytes() + b"|" + te.astype("<i8").tobytes())
        out.append((seed, ds.subset(tr), ds.subset(te), h.hexdigest()[:16]))
    return tpc, out


def _make_model(name, cfg, train):
    lam = _lam(cfg)
    if name == "mpd":
        return MpdModel(train), {}
    if name == "crc-l2":
        return fit_crc_l2(train, lam), {}
    if name == "crc-l1":
        return fit_crc_l1(train, lam, cfg["lasso_tol"], cfg["lasso_max_iter"]), {}
    if name == "dl-nscr":
        dl = DlConfig(lam, _block_sizes(cfg, train.n_classes), cfg["max_iters"],
                      cfg["rel_tol"], cfg["seed"], cfg["a_step"], cfg["extrapolate"])
        D, _, trace = fit_dlnscr(train, dl)
        clam = lam if cfg["classify_lam"] is None else cfg["classify_lam"]
        info = {"iterations": trace.n_iter, "converged": trace.converged,
                "final_objective": trace.objective[-1]}
        return DlnscrModel(D, clam, cfg["set_rule"]), info
    raise UsageError(f"unknown model {name!r}; choose from {', '.join(MODELS)}")


def _query_sets(test, m):
    """Group test columns of each class into consecutive sets of size ``m``."""
    sets = []
    for i, cols in enumerate(test.class_index, start=1):
        for s in range(0, len(cols), m):
            sets.append((i, cols[s:s + m]))
    return sets


def _evaluate(name, cfg, train, test):
    """Accuracy (and rank-k) of one model on one split, plus timings."""
    t0 = time.perf_counter()
    model, info = _make_model(name, cfg, train)
    t_train = time.perf_counter() - t0

    m = cfg["set_size"]
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        if m > 1:
            if not hasattr(model, "classify_set"):
                raise UsageError(f"--set-size > 1 is not supported for {name}")
            sets = _query_sets(test, m)
            preds = [model.classify_set(test.features[:, cols]) for _, cols in sets]
            truths = np.array([i for i, _ in sets])
            res = np.vstack([p.residuals for p in preds])
            acc = accuracy(preds, truths)
            n_queries = len(sets)
        else:
            batch = batch_classify(model, test)
            truths, res, acc, n_queries = batch.truths, batch.residuals, batch.accuracy, \
                test.n_samples
    t_test = time.perf_counter() - t0

    row = {"accuracy": acc, "queries": n_queries}
    if cfg["rank_k"] is not None:
        k = cfg["rank_k"]
        if not 1 <= k <= train.n_classes:
            raise UsageError(f"--rank-k must be in [1, {train.n_classes}]")
        row["rank_k_accuracy"] = rank_k_accuracy(res, truths, k)
    nonconv = sum(issubclass(w.category, ConvergenceWarning) for w in caught)
    if nonconv:
        row["nonconverged_queries"] = nonconv
    row.update(info)
    row["timing"] = {"train_s": t_train, "test_s": t_test,
                     "train_ms_per_sample": 1e3 * t_train / train.n_samples,
                     "test_ms_per_sample": 1e3 * t_test / max(n_queries, 1)}
    return row


def _dataset_summary(ds):
    return {"d": ds.dim, "n": ds.n_samples, "classes": ds.n_classes,
            "class_names": list(ds.class_names)}


def _report(cfg, body):
    rep = {"tool": "collabrep", "version": __version__, "command": cfg["command"],
           "config": {k: cfg[k] for k in sorted(cfg) if k not in ("out", "csv", "trend_csv", "dict_out")}}
    rep.update(body)
    return rep


def _write_atomic(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def dumps(report):
    return json.dumps(report, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def strip_timing(obj):
    """Copy of a report without any ``timing`` entries (for reproducibility checks)."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k != "timing"}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def summarize(report):
    """A few human-readable lines for the terminal (JSON stays on stdout)."""
    cmd = report["command"]
    if cmd == "synth":
        ds = report["dataset"]
        return [f"wrote {report['file']}: {ds['n']} samples, d={ds['d']}, "
                f"{ds['classes']} classes"]
    if cmd == "eval":
        s = report["summary"]
        return [f"{report['model']}: mean accuracy {s['mean_accuracy']:.4f} "
                f"(std {s['std_accuracy']:.4f}) over {len(report['splits'])} split(s)"]
    if cmd == "compare":
        return [f"{m['model']:>8}: {m['mean_accuracy']:.4f} +- {m['std_accuracy']:.4f}"
                for m in report["models"]]
    if cmd == "select":
        if "rows" in report:
            a = report["sign_agreement"]
            return [f"recommendation matches sign(ERR) on {a['agree']}/{a['rows']} rows"]
        r = report["report"]
        return [f"score FDR*d/n = {r['score']:.3f} -> {r['recommendation']}"]
    if cmd == "fit-dict":
        t = report["trace"]
        return [f"dictionary fit: {t['n_iter']} iterations, converged={t['converged']}, "
                f"objective {t['objective'][-1]:.6g}"]
    return []


# ---------------------------------------------------------------- commands

def cmd_synth(cfg):
    spec = _synth_spec(cfg)
    if spec is None:
        raise UsageError("synth needs --synth-classes, --synth-dim, --synth-per-class "
                         "and --synth-separation")
    if not cfg["data"]:
        raise UsageError("synth needs --data PATH for the output CSV")
    ds = synth_gaussian(spec)
    if cfg["normalize"]:
        ds = normalize_samples(ds)
    save_csv(ds, cfg["data"], cfg["label_column"])
    digest = hashlib.sha256(Path(cfg["data"]).read_bytes()).hexdigest()
    return _report(cfg, {"dataset": _dataset_summary(ds), "file": str(cfg["data"]),
                         "sha256": digest})


def cmd_eval(cfg):
    name = cfg["model"]
    if name is None:
        raise UsageError("eval needs --model")
    if name not in MODELS:
        raise UsageError(f"unknown model {name!r}; choose from {', '.join(MODELS)}")
    ds = _load_dataset(cfg)
    tpc, splits = _splits(cfg, ds)
    rows = []
    for seed, train, test, h in splits:
        row = _evaluate(name, cfg, train, test)
        rows.append({"seed": seed, "split_hash": h, **row})
    accs = [r["accuracy"] for r in rows]
    summary = {"mean_accuracy": float(np.mean(accs)), "std_accuracy": float(np.std(accs))}
    if cfg["rank_k"] is not None:
        summary["mean_rank_k_accuracy"] = float(np.mean([r["rank_k_accuracy"] for r in rows]))
    return _report(cfg, {"dataset": _dataset_summary(ds), "model": name,
                         "lambda": _lam(cfg), "train_per_class": tpc,
                         "splits": rows, "summary": summary})


def _trend_fits(rows, include_starred):
    used = [r for r in rows if (include_starred or not r["starred"])
            and r["report"].err is not None]
    x = {
        "FDR": [r["report"].fdr for r in used],
        "FDR*d": [r["report"].score_fdr_d for r in used],
        "FDR/n": [r["report"].score_fdr_over_n for r in used],
        "FDR*d/n": [r["report"].score for r in used],
    }
    errs = [r["report"].err for r in used]
    fits = {}
    if len(used) >= 2:
        for k, xs in x.items():
            try:
                t = fit_trend(xs, errs)
            except ValueError:
                fits[k] = None  # all x identical
                continue
            fits[k] = {"slope": t.slope, "intercept": t.intercept, "sse": t.sse}
    return used, x, errs, fits


def cmd_select(cfg):
    threshold = cfg["threshold"]
    if cfg["from_table"]:
        src = None if cfg["from_table"] == "builtin" else cfg["from_table"]
        rows = table_rows(load_reference_table(src), threshold)
        used, xs, errs, fits = _trend_fits(rows, cfg["include_starred"])
        agree = [r for r in used if r["report"].err != 0]
        n_agree = sum((r["report"].recommendation == "non-sparse") == (r["report"].err > 0)
                      for r in agree)
        if cfg["csv"]:
            buf = io.StringIO()
            write_table_csv(rows, buf)
            _write_atomic(cfg["csv"], buf.getvalue())
        if cfg["trend_csv"]:
            lines = ["dataset," + ",".join(xs) + ",ERR"]
            for j, r in enumerate(used):
                lines.append(",".join([r["dataset"]] + [repr(xs[k][j]) for k in xs]
                                      + [repr(errs[j])]))
            _write_atomic(cfg["trend_csv"], "\n".join(lines) + "\n")
        body = {
            "source": "builtin" if src is None else str(src),
            "rows": [{"dataset": r["dataset"], "starred": r["starred"], "n_i": r["n_i"],
                      **r["report"].to_dict()} for r in rows],
            "sign_agreement": {"rows": len(agree), "agree": int(n_agree)},
            "trend_fits": fits,
        }
        return _report(cfg, body)

    ds = _load_dataset(cfg)
    tpc, splits = _splits(cfg, ds)
    lam = _lam(cfg)
    reports = []
    for seed, train, test, h in splits:
        t0 = time.perf_counter()
        rep = build_selection_report(train, test, lam_l1=lam, lam_l2=lam,
                                     with_err=cfg["with_err"], tol=cfg["lasso_tol"],
                                     max_iter=cfg["lasso_max_iter"], threshold=threshold)
        reports.append({"seed": seed, "split_hash": h, **rep.to_dict(),
                        "timing": {"seconds": time.perf_counter() - t0}})
    mean_mpd = float(np.mean([r["mpd_accuracy"] for r in reports]))
    first = splits[0][1]
    from .metrics import report_from_values
    acc1 = acc2 = None
    if cfg["with_err"]:
        acc1 = float(np.mean([r["acc_l1"] for r in reports]))
        acc2 = float(np.mean([r["acc_l2"] for r in reports]))
        if acc1 >= 1.0:
            acc1 = acc2 = None
    overall = report_from_values(first.dim, first.n_samples, first.n_classes, mean_mpd,
                                 acc1, acc2, threshold)
    return _report(cfg, {"dataset": _dataset_summary(ds), "train_per_class": tpc,
                         "lambda": lam, "splits": reports, "report": overall.to_dict()})


def cmd_compare(cfg):
    raw = cfg["models"]
    names = [s.strip() for s in (raw.split(",") if isinstance(raw, str) else raw or [])
             if s.strip()]
    if not names:
        raise UsageError("compare needs a non-empty --models list")
    bad = [m for m in names if m not in MODELS]
    if bad:
        raise UsageError(f"unknown model(s) {bad}; choose from {', '.join(MODELS)}")
    ds = _load_dataset(cfg)
    tpc, splits = _splits(cfg, ds)
    table = []
    for name in names:
        per = []
        for seed, train, test, h in splits:
            per.append({"seed": seed, "split_hash": h, **_evaluate(name, cfg, train, test)})
        accs = [p["accuracy"] for p in per]
        entry = {"model": name, "mean_accuracy": float(np.mean(accs)),
                 "std_accuracy": float(np.std(accs)), "splits": per,
                 "timing": {
                     "train_ms_per_sample": float(np.mean(
                         [p["timing"]["train_ms_per_sample"] for p in per])),
                     "test_ms_per_sample": float(np.mean(
                         [p["timing"]["test_ms_per_sample"] for p in per]))}}
        if cfg["rank_k"] is not None:
            entry["mean_rank_k_accuracy"] = float(np.mean([p["rank_k_accuracy"] for p in per]))
        table.append(entry)
    if cfg["csv"]:
        lines = ["model,mean_accuracy,std_accuracy,train_ms_per_sample,test_ms_per_sample"]
        for e in table:
            lines.append(f"{e['model']},{e['mean_accuracy']!r},{e['std_accuracy']!r},"
                         f"{e['timing']['train_ms_per_sample']:.4g},"
                         f"{e['timing']['test_ms_per_sample']:.4g}")
        _write_atomic(cfg["csv"], "\n".join(lines) + "\n")
    return _report(cfg, {"dataset": _dataset_summary(ds), "train_per_class": tpc,
                         "lambda": _lam(cfg), "models": table})


def cmd_fit_dict(cfg):
    ds = _load_dataset(cfg)
    sizes = _block_sizes(cfg, ds.n_classes)
    dl = DlConfig(_lam(cfg), sizes, cfg["max_iters"], cfg["rel_tol"], cfg["seed"],
                  cfg["a_step"], cfg["extrapolate"])
    t0 = time.perf_counter()
    D, _, trace = fit_dlnscr(ds, dl)
    elapsed = time.perf_counter() - t0
    meta = {"class_names": list(ds.class_names), "iterations": trace.n_iter,
            "converged": trace.converged, "a_step": dl.a_step, "version": __version__}
    body = {"dataset": _dataset_summary(ds), "block_sizes": list(sizes), "lambda": dl.lam,
            "trace": trace.to_dict(), "monotone": trace.is_monotone(),
            "timing": {"fit_s": elapsed}}
    if cfg["dict_out"]:
        save_dictionary(cfg["dict_out"], D, dl.lam, meta)
        body["dictionary_file"] = str(cfg["dict_out"])
        body["dictionary_sha256"] = hashlib.sha256(Path(cfg["dict_out"]).read_bytes()).hexdigest()
    return _report(cfg, body)


COMMANDS = {"synth": cmd_synth, "eval": cmd_eval, "select": cmd_select,
            "compare": cmd_compare, "fit-dict": cmd_fit_dict}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            report = COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (DatasetError, OSError) as exc:
        print(f"collabrep: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"collabrep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"collabrep: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = dumps(report)
    if cfg.get("out"):
        _write_atomic(cfg["out"], text)
    sys.stdout.write(text)
    nonconv = sum(issubclass(w.category, ConvergenceWarning) for w in caught)
    if nonconv:
        print(f"collabrep: {nonconv} solver run(s) stopped before reaching tolerance",
              file=sys.stderr)
    for line in summarize(report):
        print(line, file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
