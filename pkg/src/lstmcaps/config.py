"""Run configuration: a flat ``key = value`` text file plus command-line overrides.

Lines starting with ``#`` are comments. Every key must be known; values are
parsed by the field's type and the whole configuration is validated before
any command starts work.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .data import AnomalySpec
from .errors import ConfigError, ContractError
from .models import DESIGNS, ModelSpec
from .training import TrainConfig

_MODEL_KEYS = ("design", "timesteps", "branch_width", "capsule_dim", "encoder_layers",
               "routing_mode", "routing_iters", "dropout_rate")
_TRAIN_KEYS = ("epochs", "learning_rate", "batch_size", "beta1", "beta2", "eps",
               "early_stop_patience", "val_fraction", "train_loss_mode")
# keys that do not change numeric results and stay out of the hash
_UNHASHED = ("out", "plots")


@dataclass
class RunConfig:
    # model
    design: str = "A"
    timesteps: int = 64
    branch_width: int = 32
    capsule_dim: int | None = None
    encoder_layers: int = 1
    routing_mode: str = "uniform"
    routing_iters: int = 3
    dropout_rate: float = 0.2
    # training
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_patience: int = 20
    val_fraction: float = 0.2
    train_loss_mode: str = "running"
    # detection
    sensitivity: float = 1.0
    # data
    data: str | None = None            # csv file, or a directory of SKAB-layout files
    skab_preset: bool = False
    delimiter: str = ","
    timestamp_column: str | None = None
    feature_columns: str | None = None  # comma separated
    anomaly_column: str | None = None
    changepoint_column: str | None = None
    train_rows: int = 400               # clean slice at the start of each labelled series
    # synthetic data (used when no data path is given)
    synthetic_subsets: int = 5
    synthetic_features: int = 3
    synthetic_train_len: int = 2000
    synthetic_test_len: int = 800
    anomaly_count: int = 2
    anomaly_magnitude: float = 4.0
    anomaly_width: int = 150
    anomaly_kind: str = "mixed"
    # benchmark / comparison
    n_runs: int = 1
    n_seeds: int = 5
    nab_window: float | None = None     # scoring window in time units; None -> portion rule
    nab_portion: float = 0.1
    match_widths: bool = True
    # outputs
    checkpoint: str | None = None
    out: str = "runs/latest"
    plots: bool = True
    seed: int = 0

    # -- construction ----------------------------------------------------
    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_pairs(cls, pairs, base=None):
        """Apply ``(key, raw string value)`` pairs on top of ``base`` (or defaults)."""
        cfg = dataclasses.replace(base) if base is not None else cls()
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in pairs:
            if key not in types:
                raise ConfigError(f"unknown configuration key {key!r}")
            setattr(cfg, key, _parse(key, types[key], raw))
        return cfg

    @classmethod
    def from_file(cls, path, base=None):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        pairs = []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            pairs.append((key, value))
        return cls.from_pairs(pairs, base)

    def replace(self, **changes):
        unknown = set(changes) - set(self.keys())
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    # -- validation ------------------------------------------------------
    def validate(self):
        """Raise ``ConfigError`` for any invalid field; returns self."""
        if self.design not in DESIGNS:
            raise ConfigError(f"design must be one of {DESIGNS}")
        if not self.sensitivity > 0 or not math.isfinite(self.sensitivity):
            raise ConfigError("sensitivity must be a positive number")
        for key in ("train_rows", "synthetic_subsets", "synthetic_features", "synthetic_train_len",
                    "synthetic_test_len", "n_runs", "n_seeds"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.nab_window is not None and not self.nab_window > 0:
            raise ConfigError("nab_window must be positive")
        if not 0 < self.nab_portion <= 1:
            raise ConfigError("nab_portion must be in (0, 1]")
        if self.skab_preset and self.data is None:
            raise ConfigError("skab_preset needs a data directory")
        if self.data is not None and not Path(self.data).exists():
            raise ConfigError(f"data path {self.data} does not exist")
        try:
            self.model_spec(n_features=1).validate()
            self.train_config()
            self.anomaly_spec()
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # -- views -----------------------------------------------------------
    def model_spec(self, n_features):
        kw = {k: getattr(self, k) for k in _MODEL_KEYS}
        return ModelSpec(n_features=n_features, seed=self.seed, **kw)

    def train_config(self):
        kw = {k: getattr(self, k) for k in _TRAIN_KEYS}
        return TrainConfig(seed=self.seed, **kw)

    def anomaly_spec(self):
        return AnomalySpec(self.anomaly_count, self.anomaly_magnitude, self.anomaly_width,
                           self.anomaly_kind)

    def feature_list(self):
        if not self.feature_columns:
            return None
        return [c.strip() for c in self.feature_columns.split(",") if c.strip()]

    # -- serialisation ---------------------------------------------------
    def to_text(self):
        return "".join(f"{k} = {_render(getattr(self, k))}\n" for k in self.keys())

    def hash(self):
        """SHA-256 over the canonical text of every result-affecting key."""
        text = "".join(f"{k}={_render(getattr(self, k))}\n" for k in self.keys() if k not in _UNHASHED)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _render(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key, typ, raw):
    raw = raw.strip()
    optional = "None" in typ
    if optional and raw.lower() in ("none", ""):
        return None
    base = typ.split("|")[0].strip()
    try:
        if base == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if base == "int":
            return int(raw)
        if base == "float":
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError
            return val
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base}") from None
    return raw
