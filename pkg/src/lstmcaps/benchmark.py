"""Benchmark loop over labelled subsets, and the A-D design comparison."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from .data import time_axis
from .detector import calibrate, detect
from .errors import ContractError, DatasetError, UndefinedRateError
from .models import DESIGNS, build, match_widths
from .training import (
    TrainConfig, fit_normalizer, overfit_percentage, prepare_windows, split_series, train,
    val_loss_improvement,
)

log = logging.getLogger(__name__)

SCORE_FIELDS = ("f1", "far", "mar", "nab_standard", "nab_lowFP", "nab_lowFN", "scaled_average")
REPORT_FIELDS = ("run", "seed", "dataset", "tp", "fp", "fn", "tn") + SCORE_FIELDS + \
                ("best_epoch", "train_loss", "val_loss")
LEADERBOARD_FIELDS = ("method", "design", "sensitivity", "n_runs", "seed",
                      "f1", "far", "mar", "nab_standard", "nab_lowFP", "nab_lowFN",
                      "scaled_average", "nab_pooled_standard", "best_f1", "best_nab_standard",
                      "config_hash")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.10g}"
    return str(v)


@dataclass
class DatasetScore:
    name: str
    counts: M.ConfusionCounts
    f1: float
    far: float
    mar: float
    nab: dict                      # profile name -> score
    nab_raw: dict                  # profile name -> (score, null, perfect)
    best_epoch: int
    train_loss: float
    val_loss: float

    @property
    def scaled_average(self):
        return M.scaled_average(self.f1, self.nab["standard"]) \
            if not math.isnan(self.nab["standard"]) else math.nan

    def scores(self):
        return {"f1": self.f1, "far": self.far, "mar": self.mar,
                "nab_standard": self.nab["standard"], "nab_lowFP": self.nab["lowFP"],
                "nab_lowFN": self.nab["lowFN"], "scaled_average": self.scaled_average}


def _nanmean(xs):
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


@dataclass
class RunResult:
    seed: int
    datasets: list                  # DatasetScore, sorted by name

    def aggregate(self):
        """Means over subsets; the composite is formed from the mean F1 and NAB."""
        agg = {k: _nanmean([d.scores()[k] for d in self.datasets]) for k in SCORE_FIELDS}
        agg["scaled_average"] = M.scaled_average(agg["f1"], agg["nab_standard"]) \
            if not math.isnan(agg["nab_standard"]) else math.nan
        return agg

    def pooled_nab(self, profile="standard"):
        raws = [d.nab_raw[profile] for d in self.datasets if d.nab_raw.get(profile)]
        if not raws:
            return math.nan
        return M.normalise_nab(*np.sum(raws, axis=0))


@dataclass
class BenchmarkResult:
    runs: list
    sensitivity: float
    design: str
    config_hash: str = ""
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    def mean_of_runs(self):
        aggs = [r.aggregate() for r in self.runs]
        return {k: _nanmean([a[k] for a in aggs]) for k in SCORE_FIELDS}

    def best_run(self, key="f1"):
        """Run with the highest aggregate ``key`` (F1 for outlier scoring,
        nab_standard for changepoint scoring)."""
        aggs = [r.aggregate()[key] for r in self.runs]
        aggs = [-math.inf if math.isnan(a) else a for a in aggs]
        return self.runs[int(np.argmax(aggs))]

    def report_text(self, delimiter=","):
        lines = [f"# design={self.design} sensitivity={_fmt(self.sensitivity)} "
                 f"runs={len(self.runs)} config_hash={self.config_hash}",
                 delimiter.join(REPORT_FIELDS)]
        for k, run in enumerate(self.runs):
            for d in run.datasets:
                c = d.counts
                row = [k, run.seed, d.name, c.TP, c.FP, c.FN, c.TN] + \
                      [d.scores()[f] for f in SCORE_FIELDS] + [d.best_epoch, d.train_loss, d.val_loss]
                lines.append(delimiter.join(_fmt(v) for v in row))
            agg = run.aggregate()
            tot = sum((d.counts for d in run.datasets), M.ConfusionCounts(0, 0, 0, 0))
            row = [k, run.seed, "aggregate", tot.TP, tot.FP, tot.FN, tot.TN] + \
                  [agg[f] for f in SCORE_FIELDS] + ["", "", ""]
            lines.append(delimiter.join(_fmt(v) for v in row))
        mean = self.mean_of_runs()
        for label, vals in (("mean_of_runs", mean),
                            ("best_f1_run", self.best_run("f1").aggregate()),
                            ("best_nab_run", self.best_run("nab_standard").aggregate())):
            row = ["", "", label, "", "", "", ""] + [vals[f] for f in SCORE_FIELDS] + ["", "", ""]
            lines.append(delimiter.join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def leaderboard_row(self, method="LSTMCaps", delimiter=","):
        mean = self.mean_of_runs()
        vals = {"method": method, "design": self.design, "sensitivity": self.sensitivity,
                "n_runs": len(self.runs), "seed": self.runs[0].seed,
                "nab_pooled_standard": _nanmean([r.pooled_nab() for r in self.runs]),
                "best_f1": self.best_run("f1").aggregate()["f1"],
                "best_nab_standard": self.best_run("nab_standard").aggregate()["nab_standard"],
                "config_hash": self.config_hash, **mean}
        return delimiter.join(LEADERBOARD_FIELDS) + "\n" + \
            delimiter.join(_fmt(vals[f]) for f in LEADERBOARD_FIELDS) + "\n"


def _check_dataset(ds, timesteps):
    if ds.anomaly is None:
        raise DatasetError(f"{ds.name}: no anomaly labels")
    if ds.train_len < timesteps + 1:
        raise DatasetError(f"{ds.name}: clean slice of {ds.train_len} rows is shorter than a window")
    if len(ds) - ds.train_len < timesteps:
        raise DatasetError(f"{ds.name}: test remainder shorter than one window")


def score_dataset(ds, model_spec, train_cfg, sensitivity=1.0, nab_window=None, nab_portion=0.1):
    """Fit, train, calibrate, detect and score one labelled subset."""
    T = model_spec.timesteps
    _check_dataset(ds, T)
    clean = ds.series[:ds.train_len]
    stats = fit_normalizer(clean)
    train_windows = prepare_windows(stats, clean, T)
    model = build(model_spec.replace(n_features=ds.n_features))
    rep = train(model, train_windows, train_cfg)
    profile = calibrate(model, train_windows, sensitivity)
    test = prepare_windows(stats, ds.series[ds.train_len:], T, offset=ds.train_len)
    labels = detect(model, profile, test)
    idx = labels.index
    truth = ds.anomaly[idx]
    counts = M.confusion(labels.flags, truth)
    try:
        far, mar = M.far_mar(counts)
    except UndefinedRateError:
        far = mar = math.nan
    true_cp = ds.changepoint[idx] if ds.changepoint is not None else M.changepoints_from_flags(truth) & truth
    times = time_axis(ds)[idx]
    windows = M.nab_windows(true_cp, times, nab_window, nab_portion)
    pred_cp = M.changepoints_from_flags(labels.flags)
    nab, raw = {}, {}
    for p in M.PROFILES:
        if windows:
            raw[p.name] = M.nab_raw(pred_cp, windows, p, times)
            nab[p.name] = M.normalise_nab(*raw[p.name])
        else:
            raw[p.name], nab[p.name] = None, math.nan
    return DatasetScore(ds.name, counts, M.f1(counts), far, mar, nab, raw,
                        rep.best_epoch, rep.final_train_loss, rep.final_val_loss)


def run_benchmark(datasets, model_spec, train_cfg=None, n_runs=1, sensitivity=1.0,
                  nab_window=None, nab_portion=0.1, config_hash="", on_dataset=None):
    """Score every subset ``n_runs`` times with seeds ``train_cfg.seed + r``."""
    train_cfg = train_cfg or TrainConfig()
    if n_runs < 1:
        raise ContractError("n_runs must be >= 1")
    if not datasets:
        raise DatasetError("no datasets to benchmark")
    ordered = sorted(datasets, key=lambda d: d.name)
    t0 = time.perf_counter()
    runs = []
    for r in range(n_runs):
        seed = train_cfg.seed + r
        scores = []
        for ds in ordered:
            s = score_dataset(ds, model_spec.replace(seed=seed), train_cfg.replace(seed=seed),
                              sensitivity, nab_window, nab_portion)
            log.info("run %d %s: F1 %.3f NAB %.2f", r, ds.name, s.f1, s.nab["standard"])
            if on_dataset is not None:
                on_dataset(r, s)
            scores.append(s)
        runs.append(RunResult(seed, scores))
    return BenchmarkResult(runs, float(sensitivity), model_spec.design, config_hash,
                           time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# design comparison
# ---------------------------------------------------------------------------

COMPARE_FIELDS = ("design", "branch_width", "capsule_dim", "n_params",
                  "avg_train_loss", "avg_val_loss", "best_train_loss", "best_val_loss",
                  "overfit_pct", "val_improvement_pct")
CAPSULE_TWIN = {"A": "B", "C": "D"}


@dataclass
class DesignStats:
    spec: object
    n_params: int
    train_losses: list
    val_losses: list
    curves: list                    # (train_curve, val_curve) per seed

    @property
    def avg_train(self):
        return float(np.mean(self.train_losses))

    @property
    def avg_val(self):
        return float(np.mean(self.val_losses))

    @property
    def best(self):
        k = int(np.argmin(self.val_losses))
        return self.train_losses[k], self.val_losses[k]

    @property
    def overfit(self):
        return overfit_percentage(self.avg_train, self.avg_val)


@dataclass
class DesignComparison:
    designs: dict                   # design -> DesignStats

    def improvement(self, design):
        twin = CAPSULE_TWIN.get(design)
        if twin is None or twin not in self.designs:
            return math.nan
        return val_loss_improvement(self.designs[design].avg_val, self.designs[twin].avg_val)

    def rows(self):
        out = []
        for d, s in self.designs.items():
            bt, bv = s.best
            out.append({"design": d, "branch_width": s.spec.branch_width,
                        "capsule_dim": s.spec.width, "n_params": s.n_params,
                        "avg_train_loss": s.avg_train, "avg_val_loss": s.avg_val,
                        "best_train_loss": bt, "best_val_loss": bv,
                        "overfit_pct": s.overfit, "val_improvement_pct": self.improvement(d)})
        return out

    def to_text(self, delimiter=","):
        lines = [delimiter.join(COMPARE_FIELDS)]
        for row in self.rows():
            lines.append(delimiter.join("N/A" if isinstance(row[f], float) and math.isnan(row[f])
                                        else _fmt(row[f]) for f in COMPARE_FIELDS))
        return "\n".join(lines) + "\n"


def compare_designs(series, reference_spec, train_cfg=None, n_seeds=5, designs=DESIGNS,
                    match=True, on_run=None):
    """Train each design ``n_seeds`` times on one series (chronological split)
    and collect final losses at the best-validation epoch."""
    train_cfg = train_cfg or TrainConfig()
    if n_seeds < 1:
        raise ContractError("n_seeds must be >= 1")
    reference_spec = reference_spec.replace(n_features=np.asarray(series).shape[1])
    specs = match_widths(reference_spec, designs) if match else \
        {d: reference_spec.replace(design=d) for d in designs}
    _, tr, va = split_series(series, reference_spec.timesteps, train_cfg.val_fraction)
    out = {}
    for d in designs:
        stats = None
        for k in range(n_seeds):
            seed = train_cfg.seed + k
            model = build(specs[d].replace(seed=seed))
            rep = train(model, tr, train_cfg.replace(seed=seed), val_data=va)
            if stats is None:
                stats = DesignStats(specs[d], model.parameter_count(), [], [], [])
            stats.train_losses.append(rep.final_train_loss)
            stats.val_losses.append(rep.final_val_loss)
            stats.curves.append((rep.train_loss_curve, rep.val_loss_curve))
            log.info("design %s seed %d: train %.5g val %.5g", d, seed,
                     rep.final_train_loss, rep.final_val_loss)
            if on_run is not None:
                on_run(d, k, rep)
        out[d] = stats
    return DesignComparison(out)
