"""Branched LSTM-capsule autoencoders for multivariate time-series anomaly detection,
built on a small numpy reverse-mode autodiff engine."""

__version__ = "0.1.0"
