"""Command-line entry points: generate, train, detect, benchmark, compare-designs."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import matplotlib
import numpy as np

from . import __version__
from . import plotting
from .benchmark import compare_designs, run_benchmark
from .config import RunConfig
from .data import (
    SeriesFile, generate_synthetic, load_csv, load_skab, synthetic_suite, write_csv,
)
from .detector import ThresholdProfile, calibrate, detect, error_histogram
from .errors import ConfigError, LstmCapsError
from .metrics import confusion, f1
from .models import build, load_model, save_model
from .training import NormalizerStats, fit_normalizer, prepare_windows, train

log = logging.getLogger("lstmcaps")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _versions():
    return {"lstmcaps": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "matplotlib": matplotlib.__version__}


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Outputs:
    """Collects the files a command writes and records them in a manifest."""

    def __init__(self, cfg, command):
        self.dir = Path(cfg.out)
        self.cfg = cfg
        self.command = command
        self.files = []

    def path(self, name):
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.files.append(p)
        return p

    def text(self, name, content):
        p = self.path(name)
        p.write_text(content)
        return p

    def figure(self, filename, draw, *args, **kw):
        if self.cfg.plots:
            draw(*args, path=self.path(filename), **kw)

    def manifest(self, extra=None):
        data = {"command": self.command, "config_hash": self.cfg.hash(), "seed": self.cfg.seed,
                "versions": _versions(),
                "config": {k: getattr(self.cfg, k) for k in self.cfg.keys()},
                "files": {p.name: _sha256(p) for p in self.files if p.suffix != ".png"}}
        data.update(extra or {})
        p = self.dir / "manifest.json"
        p.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
        return p


def _series_file(cfg):
    if cfg.skab_preset:
        return SeriesFile.skab(cfg.data)
    return SeriesFile(cfg.data, cfg.delimiter, cfg.timestamp_column, cfg.feature_list(),
                      cfg.anomaly_column, cfg.changepoint_column)


def _single_series(cfg):
    """The series a train/detect command works on, with its clean-slice length."""
    if cfg.data is None:
        ds = synthetic_suite(1, cfg.synthetic_features, cfg.synthetic_train_len,
                             cfg.synthetic_test_len, cfg.anomaly_spec(), cfg.seed)[0]
        return ds
    if Path(cfg.data).is_dir():
        raise ConfigError("train/detect need a single csv file, not a directory")
    ds = load_csv(_series_file(cfg))
    ds.train_len = min(cfg.train_rows, len(ds))
    return ds


def _datasets(cfg):
    if cfg.data is None:
        return synthetic_suite(cfg.synthetic_subsets, cfg.synthetic_features, cfg.synthetic_train_len,
                               cfg.synthetic_test_len, cfg.anomaly_spec(), cfg.seed)
    if Path(cfg.data).is_dir():
        if not cfg.skab_preset:
            raise ConfigError("a data directory is only supported with the SKAB preset")
        return load_skab(cfg.data, cfg.train_rows)
    ds = load_csv(_series_file(cfg))
    ds.train_len = cfg.train_rows
    return [ds]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg):
    suite = synthetic_suite(cfg.synthetic_subsets, cfg.synthetic_features, cfg.synthetic_train_len,
                            cfg.synthetic_test_len, cfg.anomaly_spec(), cfg.seed)
    out = Outputs(cfg, "generate")
    for ds in suite:
        write_csv(out.path(f"{ds.name}.csv"), ds.series, ds.feature_names, ds.anomaly, ds.changepoint)
    out.manifest({"train_rows": cfg.synthetic_train_len})
    return 0


def cmd_train(cfg):
    ds = _single_series(cfg)
    clean = ds.series[:ds.train_len]
    stats = fit_normalizer(clean)
    windows = prepare_windows(stats, clean, cfg.timesteps)
    model = build(cfg.model_spec(ds.n_features))
    report = train(model, windows, cfg.train_config())
    profile = calibrate(model, windows, cfg.sensitivity)
    out = Outputs(cfg, "train")
    save_model(model, out.path("model.ckpt"),
               arrays={"norm_mu": stats.mu, "norm_sigma": stats.sigma,
                       "calibration_errors": profile.calibration_errors},
               meta={"feature_names": ds.feature_names, "train_rows": int(ds.train_len)})
    out.text("train_report.txt", report.to_text())
    out.text("thresholds.csv", "feature,threshold\n" + "".join(
        f"{n},{t:.12g}\n" for n, t in zip(ds.feature_names or range(ds.n_features),
                                          profile.per_feature_threshold)))
    out.figure("loss_curves.png", plotting.loss_curves, report, title=f"Design {cfg.design}")
    out.manifest({"best_epoch": report.best_epoch})
    print(f"trained design {cfg.design}: best epoch {report.best_epoch}, "
          f"train {report.final_train_loss:.6g}, val {report.final_val_loss:.6g}")
    return 0


def cmd_detect(cfg):
    if cfg.checkpoint is None:
        raise ConfigError("detect needs checkpoint = <path to model.ckpt>")
    model, arrays, meta = load_model(cfg.checkpoint)
    for key in ("norm_mu", "norm_sigma", "calibration_errors"):
        if key not in arrays:
            raise ConfigError(f"checkpoint lacks {key}; was it written by 'train'?")
    stats = NormalizerStats(arrays["norm_mu"], arrays["norm_sigma"])
    base = ThresholdProfile(arrays["calibration_errors"].max(axis=0), 1.0,
                            arrays["calibration_errors"], stats)
    profile = base.with_sensitivity(cfg.sensitivity)
    ds = _single_series(cfg)
    if ds.n_features != model.spec.n_features:
        raise ConfigError(f"data has {ds.n_features} features, checkpoint expects {model.spec.n_features}")
    start = ds.train_len if ds.train_len < len(ds) else 0
    T = model.spec.timesteps
    test = prepare_windows(stats, ds.series[start:], T, offset=start)
    labels = detect(model, profile, test)
    out = Outputs(cfg, "detect")
    out.text("labels.csv", labels.to_text())
    names = ds.feature_names or [f"f{i}" for i in range(ds.n_features)]
    for f in range(profile.n_features):
        hist = error_histogram(profile, f)
        out.text(f"histogram_{names[f]}.csv", hist.to_text())
        out.figure(f"histogram_{names[f]}.png", plotting.error_histogram, hist, name=names[f])
    truth = ds.anomaly[labels.index] if ds.anomaly is not None else None
    out.figure("detection.png", plotting.detection, ds.series, labels.index, labels.flags,
               truth, feature_names=names)
    summary = f"flagged {int(labels.flags.sum())} of {len(labels.flags)} points"
    if truth is not None:
        c = confusion(labels.flags, truth)
        out.text("scores.csv", "tp,fp,fn,tn,f1\n" + f"{c.TP},{c.FP},{c.FN},{c.TN},{f1(c):.10g}\n")
        summary += f", F1 {f1(c):.4f}"
    out.manifest({"flagged": int(labels.flags.sum()), "sensitivity": cfg.sensitivity})
    print(summary)
    return 0


def cmd_benchmark(cfg):
    datasets = _datasets(cfg)
    F = {d.n_features for d in datasets}
    if len(F) != 1:
        raise ConfigError(f"subsets disagree on feature count: {sorted(F)}")
    result = run_benchmark(datasets, cfg.model_spec(F.pop()), cfg.train_config(), cfg.n_runs,
                           cfg.sensitivity, cfg.nab_window, cfg.nab_portion, cfg.hash())
    out = Outputs(cfg, "benchmark")
    out.text("benchmark_report.csv", result.report_text())
    out.text("leaderboard.csv", result.leaderboard_row())
    out.figure("scores.png", plotting.dataset_scores, result)
    out.manifest({"n_datasets": len(datasets)})
    (out.dir / "timing.json").write_text(json.dumps({"wall_time_s": result.wall_time}) + "\n")
    mean = result.mean_of_runs()
    print(f"{len(datasets)} subsets x {cfg.n_runs} runs: F1 {mean['f1']:.4f}, "
          f"NAB(standard) {mean['nab_standard']:.2f}, scaled {mean['scaled_average']:.4f}")
    return 0


def cmd_compare_designs(cfg):
    if cfg.data is None:
        series = generate_synthetic(cfg.synthetic_features, cfg.synthetic_train_len, None, cfg.seed)[0]
    else:
        series = _single_series(cfg).series
    comparison = compare_designs(series, cfg.model_spec(series.shape[1]), cfg.train_config(),
                                 cfg.n_seeds, match=cfg.match_widths)
    out = Outputs(cfg, "compare-designs")
    out.text("compare_designs.csv", comparison.to_text())
    out.figure("design_curves.png", plotting.design_curves, comparison)
    out.manifest()
    print(comparison.to_text(), end="")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "detect": cmd_detect,
            "benchmark": cmd_benchmark, "compare-designs": cmd_compare_designs}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lstmcaps", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value configuration file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--sensitivity", type=float)
        s.add_argument("--design", choices=("A", "B", "C", "D"))
        s.add_argument("--skab-preset", action="store_true",
                       help="read SKAB-layout files (';' delimited, datetime, anomaly, changepoint)")
        s.add_argument("--data", help="csv file or SKAB directory")
        s.add_argument("--checkpoint", help="model checkpoint (detect)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key; repeatable")
    return p


def resolve_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    pairs = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append(tuple(part.strip() for part in item.split("=", 1)))
    cfg = RunConfig.from_pairs(pairs, cfg)
    direct = {"seed": args.seed, "out": args.out, "sensitivity": args.sensitivity,
              "design": args.design, "data": args.data, "checkpoint": args.checkpoint}
    cfg = cfg.replace(**{k: v for k, v in direct.items() if v is not None})
    if args.skab_preset:
        cfg = cfg.replace(skab_preset=True)
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        t0 = time.perf_counter()
        code = COMMANDS[args.command](cfg)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LstmCapsError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
