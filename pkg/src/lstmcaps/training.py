"""Data preparation and unsupervised reconstruction training."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, ShapeError, TrainingDiverged

log = logging.getLogger(__name__)

CONSTANT_SIGMA = 1e-12


# ---------------------------------------------------------------------------
# z-score normalisation
# ---------------------------------------------------------------------------

@dataclass
class NormalizerStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def constant(self):
        """Mask of features whose standard deviation is numerically zero."""
        return self.sigma < CONSTANT_SIGMA

    @property
    def n_features(self):
        return len(self.mu)

    def same_as(self, other):
        return (other is not None and np.array_equal(self.mu, other.mu)
                and np.array_equal(self.sigma, other.sigma))


def _as_series(series):
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ShapeError(f"series must be [L, F], got shape {arr.shape}")
    return arr


def fit_normalizer(series):
    """Per-feature mean and population standard deviation."""
    x = _as_series(series)
    if len(x) < 2:
        raise ContractError("need at least 2 rows to fit a normalizer")
    return NormalizerStats(x.mean(axis=0), x.std(axis=0))


def apply_normalizer(stats, series):
    x = _as_series(series)
    if x.shape[1] != stats.n_features:
        raise ShapeError(f"series has {x.shape[1]} features, stats have {stats.n_features}")
    safe = np.where(stats.constant, 1.0, stats.sigma)
    z = (x - stats.mu) / safe
    z[:, stats.constant] = 0.0
    return z


def invert_normalizer(stats, z):
    return _as_series(z) * stats.sigma + stats.mu


# ---------------------------------------------------------------------------
# sliding windows
# ---------------------------------------------------------------------------

@dataclass
class WindowedDataset:
    windows: np.ndarray            # [N, T, F]
    start_indices: np.ndarray      # original index of each window's first row
    stride: int = 1
    normalizer: NormalizerStats | None = None

    def __len__(self):
        return len(self.windows)

    @property
    def timesteps(self):
        return self.windows.shape[1]

    @property
    def n_features(self):
        return self.windows.shape[2]

    @property
    def n_points(self):
        """Rows of the underlying series spanned by the windows."""
        return int(self.start_indices[-1] - self.start_indices[0]) + self.timesteps

    def subset(self, idx):
        return dataclasses.replace(self, windows=self.windows[idx],
                                   start_indices=self.start_indices[idx])


def make_windows(series, timesteps, stride=1, offset=0, normalizer=None):
    """All length-``timesteps`` windows taken every ``stride`` rows.

    ``offset`` is added to the recorded start indices so windows keep their
    position in a larger original series.
    """
    x = _as_series(series)
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if timesteps < 1 or len(x) < timesteps:
        raise ContractError(f"series of length {len(x)} is shorter than window {timesteps}")
    starts = np.arange(0, len(x) - timesteps + 1, stride)
    view = np.lib.stride_tricks.sliding_window_view(x, timesteps, axis=0)  # [L-T+1, F, T]
    windows = np.ascontiguousarray(view[starts].transpose(0, 2, 1))
    return WindowedDataset(windows, starts + offset, stride, normalizer)


def prepare_windows(stats, series, timesteps, stride=1, offset=0):
    """Normalise ``series`` with ``stats`` and window it; the dataset is tagged with ``stats``."""
    return make_windows(apply_normalizer(stats, series), timesteps, stride, offset, stats)


def split_series(series, timesteps, val_fraction=0.2, stride=1):
    """Chronological train/validation split of a raw series.

    Statistics are fitted on the training rows only; both parts are windowed
    separately so no window straddles the boundary.
    """
    x = _as_series(series)
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")
    n_val = int(round(len(x) * val_fraction))
    n_train = len(x) - n_val
    if n_train < max(timesteps, 2) or n_val < timesteps:
        raise ContractError(f"series of {len(x)} rows too short for a {val_fraction} split "
                            f"with windows of {timesteps}")
    stats = fit_normalizer(x[:n_train])
    train = prepare_windows(stats, x[:n_train], timesteps, stride)
    val = prepare_windows(stats, x[n_train:], timesteps, stride, offset=n_train)
    return stats, train, val


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("params, grads and optimizer state differ in length")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (np.shape(p) == np.shape(g) == m.shape == v.shape):
            raise ContractError(f"shape mismatch in Adam step: {np.shape(p)} vs {np.shape(g)}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


class Adam:
    """Stateful wrapper applying ``adam_step`` to a list of tensors in place."""

    def __init__(self, tensors, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([t.data for t in self.tensors])

    def step(self):
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]
        new, self.state = adam_step([t.data for t in self.tensors], grads, self.state,
                                    self.lr, self.beta1, self.beta2, self.eps)
        for t, p in zip(self.tensors, new):
            t.data = p

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_patience: int = 20
    val_fraction: float = 0.2
    seed: int = 0
    # "running": mean of training-mode batch losses over the epoch;
    # "eval": inference-mode MSE over the training windows after the epoch
    train_loss_mode: str = "running"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if not 0 <= self.early_stop_patience <= self.epochs:
            raise ConfigError("early_stop_patience must be in [0, epochs]")
        if self.train_loss_mode not in ("running", "eval"):
            raise ConfigError("train_loss_mode must be 'running' or 'eval'")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class TrainReport:
    train_loss_curve: list = field(default_factory=list)
    val_loss_curve: list = field(default_factory=list)
    best_epoch: int = -1
    final_train_loss: float = math.nan
    final_val_loss: float = math.nan
    epochs_run: int = 0
    stopped_early: bool = False

    def to_text(self):
        """Key-value lines followed by the two loss curves."""
        lines = [
            f"best_epoch={self.best_epoch}",
            f"epochs_run={self.epochs_run}",
            f"stopped_early={str(self.stopped_early).lower()}",
            f"final_train_loss={self.final_train_loss:.12g}",
            f"final_val_loss={self.final_val_loss:.12g}",
            "train_loss_curve=" + ",".join(f"{v:.12g}" for v in self.train_loss_curve),
            "val_loss_curve=" + ",".join(f"{v:.12g}" for v in self.val_loss_curve),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        curve = lambda s: [float(v) for v in s.split(",") if v]  # noqa: E731
        return cls(curve(kv["train_loss_curve"]), curve(kv["val_loss_curve"]),
                   int(kv["best_epoch"]), float(kv["final_train_loss"]),
                   float(kv["final_val_loss"]), int(kv["epochs_run"]),
                   kv["stopped_early"] == "true")


class EarlyStopping:
    """Tracks the best validation loss; signals a stop once ``patience`` is exceeded."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.best_state = None
        self.wait = 0

    def update(self, epoch, loss, state=None):
        if loss < self.best:
            self.best, self.best_epoch, self.best_state, self.wait = loss, epoch, state, 0
            return False
        self.wait += 1
        return self.wait > self.patience


def mse(pred, target):
    diff = pred - ad.constant(target)
    return (diff * diff).mean()


def evaluate(model, data, batch_size=256):
    """Inference-mode MSE over a windowed dataset."""
    windows = data.windows if isinstance(data, WindowedDataset) else np.asarray(data)
    recon = model.predict(windows, batch_size)
    return float(np.mean((recon - windows) ** 2))


def chronological_split(data, val_fraction):
    """Last ``val_fraction`` of windows for validation; training windows that
    overlap any validation row are dropped."""
    n = len(data)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ContractError("validation split leaves no training windows")
    first_val = data.start_indices[n - n_val]
    keep = np.nonzero(data.start_indices + data.timesteps <= first_val)[0]
    if len(keep) == 0:
        raise ContractError("no training windows remain after removing overlap with validation")
    return data.subset(keep), data.subset(np.arange(n - n_val, n))


def train(model, data, cfg=None, val_data=None, on_epoch=None):
    """Fit ``model`` to reconstruct ``data``; restores the best-validation weights."""
    cfg = cfg or TrainConfig()
    if len(data) == 0:
        raise ContractError("empty training set")
    if val_data is None:
        data, val_data = chronological_split(data, cfg.val_fraction)
    if len(val_data) == 0:
        raise ContractError("empty validation set")
    params = list(model.parameters().values())
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.early_stop_patience)
    report = TrainReport()
    windows = data.windows
    n = len(windows)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = windows[order[lo:lo + cfg.batch_size]]
            loss = mse(model.forward(batch, training=True), batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}: {value}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(batch)
        train_loss = total / n if cfg.train_loss_mode == "running" else evaluate(model, data)
        val_loss = evaluate(model, val_data)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        report.train_loss_curve.append(train_loss)
        report.val_loss_curve.append(val_loss)
        report.epochs_run = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if stopper.update(epoch, val_loss, model.state_dict()):
            report.stopped_early = True
            break
    model.load_state_dict(stopper.best_state)
    report.best_epoch = stopper.best_epoch
    report.final_train_loss = report.train_loss_curve[stopper.best_epoch]
    report.final_val_loss = report.val_loss_curve[stopper.best_epoch]
    return report


# ---------------------------------------------------------------------------
# derived comparisons
# ---------------------------------------------------------------------------

def overfit_percentage(train_loss, val_loss):
    """Relative gap of validation over training loss, in percent."""
    if not train_loss > 0:
        raise ContractError("train loss must be positive")
    return 100.0 * (val_loss - train_loss) / train_loss


def val_loss_improvement(caps_val, nocaps_val):
    """Percent reduction in validation loss of a capsule model over its capsule-free twin."""
    if not nocaps_val > 0:
        raise ContractError("reference validation loss must be positive")
    return 100.0 * (nocaps_val - caps_val) / nocaps_val
