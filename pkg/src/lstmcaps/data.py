"""CSV ingestion (generic and SKAB layout) and the synthetic series generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ContractError, DatasetError, ParseError

FLOAT_FORMAT = "%.12g"

SKAB_DELIMITER = ";"
SKAB_TIMESTAMP = "datetime"
SKAB_LABELS = ("anomaly", "changepoint")
SKAB_TRAIN_ROWS = 400


@dataclass
class SeriesFile:
    path: str | Path
    delimiter: str = ","
    timestamp_column: str | None = None
    feature_columns: list | None = None   # None -> every non-timestamp, non-label column
    anomaly_column: str | None = None
    changepoint_column: str | None = None

    @classmethod
    def skab(cls, path):
        return cls(path, SKAB_DELIMITER, SKAB_TIMESTAMP, None, *SKAB_LABELS)


@dataclass
class LabeledSeries:
    """A multivariate series with optional point labels.

    The first ``train_len`` rows are the clean slice used for fitting.
    """

    name: str
    series: np.ndarray
    anomaly: np.ndarray | None = None
    changepoint: np.ndarray | None = None
    train_len: int = 0
    timestamps: list | None = None
    feature_names: list = field(default_factory=list)

    @property
    def n_features(self):
        return self.series.shape[1]

    def __len__(self):
        return len(self.series)


def _parse_label(cell, line, col):
    try:
        val = float(cell)
    except ValueError:
        raise ParseError(f"line {line}, column {col!r}: label {cell!r} is not 0/1", line, col) from None
    if val not in (0.0, 1.0):
        raise ParseError(f"line {line}, column {col!r}: label {cell!r} is not 0/1", line, col)
    return bool(val)


def load_csv(spec):
    """Read a delimited file into a ``LabeledSeries`` (``train_len`` left at 0)."""
    path = Path(spec.path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=spec.delimiter))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if len(body) < 2:
        raise DatasetError(f"{path}: need at least 2 data rows, found {len(body)}")

    def col_index(name):
        if name not in header:
            raise DatasetError(f"{path}: missing column {name!r}")
        return header.index(name)

    label_cols = [c for c in (spec.anomaly_column, spec.changepoint_column) if c]
    reserved = set(label_cols) | ({spec.timestamp_column} if spec.timestamp_column else set())
    features = spec.feature_columns or [h for h in header if h not in reserved]
    if not features:
        raise DatasetError(f"{path}: no feature columns")
    f_idx = [col_index(c) for c in features]
    ts_idx = col_index(spec.timestamp_column) if spec.timestamp_column else None
    an_idx = col_index(spec.anomaly_column) if spec.anomaly_column else None
    cp_idx = col_index(spec.changepoint_column) if spec.changepoint_column else None

    series = np.empty((len(body), len(features)))
    anomaly = np.zeros(len(body), dtype=bool) if an_idx is not None else None
    change = np.zeros(len(body), dtype=bool) if cp_idx is not None else None
    stamps = [] if ts_idx is not None else None
    for r, row in enumerate(body):
        line = r + 2
        if len(row) != len(header):
            raise ParseError(f"{path}: line {line} has {len(row)} cells, header has {len(header)}", line)
        for j, (c, name) in enumerate(zip(f_idx, features)):
            cell = row[c].strip()
            try:
                val = float(cell)
            except ValueError:
                val = math.nan
            if not math.isfinite(val):
                raise ParseError(f"{path}: line {line}, column {name!r}: cannot parse {cell!r} "
                                 f"as a finite number", line, name)
            series[r, j] = val
        if an_idx is not None:
            anomaly[r] = _parse_label(row[an_idx].strip(), line, spec.anomaly_column)
        if cp_idx is not None:
            change[r] = _parse_label(row[cp_idx].strip(), line, spec.changepoint_column)
        if ts_idx is not None:
            stamps.append(row[ts_idx].strip())
    return LabeledSeries(path.stem, series, anomaly, change, 0, stamps, list(features))


def write_csv(path, series, feature_names=None, anomaly=None, changepoint=None,
              timestamps=None, delimiter=","):
    """Write a series with 12 significant digits (the precision ``load_csv`` round-trips)."""
    series = np.asarray(series, dtype=np.float64)
    names = list(feature_names) if feature_names else [f"f{i}" for i in range(series.shape[1])]
    header = (["timestamp"] if timestamps is not None else []) + names
    header += (["anomaly"] if anomaly is not None else []) + (["changepoint"] if changepoint is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(series):
            out = [timestamps[i]] if timestamps is not None else []
            out += [FLOAT_FORMAT % v for v in row]
            if anomaly is not None:
                out.append(int(anomaly[i]))
            if changepoint is not None:
                out.append(int(changepoint[i]))
            w.writerow(out)


def find_skab_files(root):
    """SKAB subset files under ``root`` (the anomaly-free reference file is skipped)."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*.csv") if "anomaly-free" not in p.as_posix())
    if not files:
        raise DatasetError(f"{root}: no SKAB csv files found")
    return files


def load_skab(root, train_rows=SKAB_TRAIN_ROWS):
    out = []
    for p in find_skab_files(root):
        ds = load_csv(SeriesFile.skab(p))
        if len(ds) <= train_rows:
            raise DatasetError(f"{p}: only {len(ds)} rows, need more than {train_rows}")
        ds.name = p.relative_to(root).with_suffix("").as_posix()
        ds.train_len = train_rows
        out.append(ds)
    return out


# ---------------------------------------------------------------------------
# synthetic stand-in data
# ---------------------------------------------------------------------------

@dataclass
class AnomalySpec:
    count: int = 1
    magnitude: float = 4.0     # in multiples of the feature's noise sigma
    width: int = 150
    kind: str = "mixed"        # "shift", "spike" or "mixed" (alternating)

    def __post_init__(self):
        if self.count < 0 or self.width < 1 or self.magnitude < 0:
            raise ContractError("anomaly count >= 0, width >= 1, magnitude >= 0 required")
        if self.kind not in ("shift", "spike", "mixed"):
            raise ContractError(f"unknown anomaly kind {self.kind!r}")


NOISE_FRACTION = 0.05
PERIOD_RANGE = (40.0, 100.0)   # base period, in samples


def _clean_signal(rng, n_features, length, period_range):
    """Per feature: 2-3 harmonics of one seeded base period, so the clean
    pattern repeats and a short training slice covers every shape."""
    t = np.arange(length)
    series = np.zeros((length, n_features))
    amplitude = np.zeros(n_features)
    for f in range(n_features):
        base = rng.uniform(*period_range)
        n = rng.integers(2, 4)
        harmonics = np.concatenate([[1], rng.choice(np.arange(2, 5), size=n - 1, replace=False)])
        for k in harmonics:
            a = rng.uniform(0.5, 1.5)
            series[:, f] += a * np.sin(2 * np.pi * k * t / base + rng.uniform(0, 2 * np.pi))
            amplitude[f] += a
    return series, amplitude


def generate_synthetic(n_features, length, anomaly_spec=None, seed=0, clean_prefix=0,
                       period_range=PERIOD_RANGE):
    """Sum-of-sinusoids series with Gaussian noise and injected anomalies.

    Returns ``(series, labels, changepoints)``. Anomalies are placed at seeded,
    non-overlapping positions after ``clean_prefix``; each hits one random
    feature as a level shift or a burst of random-sign spikes.
    """
    spec = anomaly_spec or AnomalySpec(count=0)
    rng = np.random.default_rng(seed)
    series, amplitude = _clean_signal(rng, n_features, length, period_range)
    sigma = NOISE_FRACTION * amplitude
    series += rng.normal(size=series.shape) * sigma
    labels = np.zeros(length, dtype=bool)
    change = np.zeros(length, dtype=bool)
    room = length - clean_prefix
    gap = spec.width
    if spec.count and spec.count * (spec.width + gap) > room:
        raise ContractError(f"{spec.count} anomalies of width {spec.width} do not fit in {room} rows")
    if spec.count:
        slack = room - spec.count * (spec.width + gap)
        cuts = np.sort(rng.integers(0, slack + 1, size=spec.count))
        for k, cut in enumerate(cuts):
            start = clean_prefix + gap + k * (spec.width + gap) + int(cut)
            stop = start + spec.width
            f = rng.integers(n_features)
            kind = spec.kind if spec.kind != "mixed" else ("shift", "spike")[k % 2]
            size = spec.magnitude * sigma[f]
            if kind == "shift":
                series[start:stop, f] += size * rng.choice([-1.0, 1.0])
            else:
                series[start:stop, f] += size * rng.choice([-1.0, 1.0], size=spec.width)
            labels[start:stop] = True
            change[start] = True
    return series, labels, change


def synthetic_suite(n_subsets=5, n_features=3, train_len=2000, test_len=800,
                    anomaly_spec=None, seed=0):
    """Subsets with a clean training prefix and an anomalous test remainder."""
    spec = anomaly_spec or AnomalySpec(count=2)
    out = []
    for k in range(n_subsets):
        series, labels, change = generate_synthetic(
            n_features, train_len + test_len, spec, seed=seed * 1000 + k, clean_prefix=train_len)
        out.append(LabeledSeries(f"synthetic_{k:02d}", series, labels, change, train_len,
                                 None, [f"f{i}" for i in range(n_features)]))
    return out


def time_axis(ds):
    """Seconds since the first row when every timestamp parses as ISO-8601 and
    is non-decreasing; otherwise the row index."""
    n = len(ds)
    if ds.timestamps:
        try:
            stamps = [datetime.fromisoformat(s) for s in ds.timestamps]
        except ValueError:
            stamps = None
        if stamps:
            secs = np.array([(s - stamps[0]).total_seconds() for s in stamps])
            if np.all(np.diff(secs) >= 0):
                return secs
    return np.arange(n, dtype=np.float64)
