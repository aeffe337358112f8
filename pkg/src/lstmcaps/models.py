"""Designs A-D of the branched / non-branched LSTM(-capsule) autoencoders.

=========  ==========  =================================================
design     branched    bottleneck-to-output path
=========  ==========  =================================================
A          yes         LSTM -> repeat -> capsule, concat, capsule, dense
B          yes         LSTM -> repeat -> LSTM, concat, LSTM, dense
C          no          LSTM -> repeat -> capsule -> dense
D          no          LSTM -> repeat -> LSTM -> dense
=========  ==========  =================================================
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigError, ShapeError
from .layers import (
    ROUTING_MODES, CapsuleParams, DenseParams, LstmParams, capsule_forward,
    capsule_forward_grouped, concat_features, dropout, lstm_sequence, lstm_sequence_grouped,
    repeat_vector, time_distributed_dense,
)

DESIGNS = ("A", "B", "C", "D")
BRANCHED = {"A": True, "B": True, "C": False, "D": False}
HAS_CAPSULES = {"A": True, "B": False, "C": True, "D": False}


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one design.

    ``branch_width`` is the hidden width of each LSTM encoder (the single
    encoder for C and D). ``capsule_dim`` is the width of the per-branch
    capsules in A and C, and of the LSTM decoder layers that replace them in
    B and D; ``None`` ties it to ``branch_width``.
    """

    design: str = "A"
    n_features: int = 3
    timesteps: int = 64
    branch_width: int = 32
    capsule_dim: int | None = None
    encoder_layers: int = 1
    routing_mode: str = "uniform"
    routing_iters: int = 3
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.design not in DESIGNS:
            raise ConfigError(f"design must be one of {DESIGNS}, got {self.design!r}")
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if self.timesteps < 2:
            raise ConfigError("timesteps must be >= 2")
        if self.branch_width < 1 or self.width < 1:
            raise ConfigError("widths must be >= 1")
        if self.encoder_layers < 1:
            raise ConfigError("encoder_layers must be >= 1")
        if self.routing_mode not in ROUTING_MODES:
            raise ConfigError(f"routing_mode must be one of {ROUTING_MODES}")
        if self.routing_iters < 0:
            raise ConfigError("routing_iters must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def width(self):
        return self.branch_width if self.capsule_dim is None else self.capsule_dim

    @property
    def n_branches(self):
        return self.n_features if BRANCHED[self.design] else 1

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


def _lstm_count(n_in, hidden):
    return 4 * (hidden * (hidden + n_in) + hidden)


def _encoder_count(n_in, hidden, layers):
    return _lstm_count(n_in, hidden) + (layers - 1) * _lstm_count(hidden, hidden)


def _capsule_count(num_in, num_out, in_dim, out_dim):
    return num_in * num_out * out_dim * in_dim


def _dense_count(n_in, n_out):
    return n_out * (n_in + 1)


def count_parameters(spec):
    """Analytic trainable-parameter count of ``build(spec)``."""
    F, T, h, c, L = spec.n_features, spec.timesteps, spec.branch_width, spec.width, spec.encoder_layers
    if spec.design == "A":
        return (F * _encoder_count(1, h, L) + F * _capsule_count(T, T, h, c)
                + _capsule_count(T, T, F * c, F * c) + _dense_count(F * c, F))
    if spec.design == "B":
        return (F * _encoder_count(1, h, L) + F * _lstm_count(h, c)
                + _lstm_count(F * c, F * c) + _dense_count(F * c, F))
    if spec.design == "C":
        return _encoder_count(F, h, L) + _capsule_count(T, T, h, c) + _dense_count(c, F)
    return _encoder_count(F, h, L) + _lstm_count(h, c) + _dense_count(c, F)


class Model:
    """Instantiated parameters of a design plus its forward pass."""

    def __init__(self, spec, params, topology):
        self.spec = spec
        self.params = params
        self.topology = topology
        self._dropout_rng = np.random.default_rng([spec.seed, 0xD0])

    def parameters(self):
        """Name -> Tensor, in a fixed (build) order."""
        out = {}
        for name, obj in self.params.items():
            if isinstance(obj, LstmParams):
                for pname, t in obj.named_tensors():
                    out[f"{name}.{pname}"] = t
            elif isinstance(obj, CapsuleParams):
                out[f"{name}.W"] = obj.W
            else:
                out[f"{name}.W"] = obj.W
                out[f"{name}.b"] = obj.b
        return out

    def parameter_count(self):
        return int(sum(t.size for t in self.parameters().values()))

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        if set(state) != set(params):
            raise CheckpointError("parameter names do not match the model")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    # -- forward --------------------------------------------------------
    def _encode(self, prefix, x, training):
        h = x
        for k in range(self.spec.encoder_layers):
            last = k == self.spec.encoder_layers - 1
            h = lstm_sequence(self.params[f"{prefix}enc{k}"], h, return_sequences=not last)
            h = self._drop(h, training)
        return h

    def _encode_branches(self, x, training):
        """All per-feature encoders at once: [B, T, F] -> [F, B, hidden]."""
        F = self.spec.n_features
        B, T = x.shape[0], x.shape[1]
        h = ad.transpose(x, (2, 0, 1)).reshape(F, B, T, 1)
        for k in range(self.spec.encoder_layers):
            last = k == self.spec.encoder_layers - 1
            ps = [self.params[f"branch{f}.enc{k}"] for f in range(F)]
            h = self._drop(lstm_sequence_grouped(ps, h, return_sequences=not last), training)
        return h

    def _drop(self, x, training):
        return dropout(x, self.spec.dropout_rate, training, self._dropout_rng)

    def forward(self, batch, training=False):
        """Reconstruct a [batch, T, F] window batch."""
        x = ad.constant(batch)
        spec = self.spec
        if x.ndim != 3 or x.shape[1:] != (spec.timesteps, spec.n_features):
            raise ShapeError(f"expected [batch, {spec.timesteps}, {spec.n_features}], got {x.shape}")
        T = spec.timesteps
        if BRANCHED[spec.design]:
            F, B = spec.n_features, x.shape[0]
            z = self._encode_branches(x, training)
            z = ad.broadcast_to(z.reshape(F, B, 1, z.shape[-1]), (F, B, T, z.shape[-1]))
            if spec.design == "A":
                z = capsule_forward_grouped([self.params[f"branch{f}.caps"] for f in range(F)], z)
            else:
                ps = [self.params[f"branch{f}.dec"] for f in range(F)]
                z = self._drop(lstm_sequence_grouped(ps, z, True), training)
            # [F, B, T, c] -> [B, T, F*c], branch-major like a feature concat
            merged = ad.transpose(z, (1, 2, 0, 3)).reshape(B, T, F * z.shape[-1])
            if spec.design == "A":
                merged = capsule_forward(self.params["merge.caps"], merged)
            else:
                merged = self._drop(lstm_sequence(self.params["merge.dec"], merged, True), training)
        else:
            z = repeat_vector(self._encode("", x, training), T)
            if spec.design == "C":
                merged = capsule_forward(self.params["caps"], z)
            else:
                merged = self._drop(lstm_sequence(self.params["dec"], z, True), training)
        out = self.params["out"]
        return time_distributed_dense(out.W, out.b, merged)

    __call__ = forward

    def predict(self, windows, batch_size=256):
        """Inference-mode reconstruction of an [N, T, F] array, as ndarray."""
        windows = np.asarray(windows, dtype=np.float64)
        outs = []
        with ad.no_grad():
            for i in range(0, len(windows), batch_size):
                outs.append(self.forward(windows[i:i + batch_size], training=False).data)
        return np.concatenate(outs, axis=0)


def build(spec):
    """Instantiate ``spec`` with seeded initial parameters."""
    if not isinstance(spec, ModelSpec):
        raise ConfigError("build expects a ModelSpec")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    F, T, h, c = spec.n_features, spec.timesteps, spec.branch_width, spec.width
    params = {}
    topology = []

    def encoder(prefix, n_in):
        for k in range(spec.encoder_layers):
            params[f"{prefix}enc{k}"] = LstmParams.init(n_in if k == 0 else h, h, rng)
            topology.append(f"{prefix}enc{k}: LSTM({n_in if k == 0 else h}->{h})")
        topology.append(f"{prefix}repeat: RepeatVector({T})")

    def caps(name, n_in_dim, n_out_dim):
        params[name] = CapsuleParams.init(T, T, n_in_dim, n_out_dim, rng,
                                          spec.routing_mode, spec.routing_iters)
        topology.append(f"{name}: Capsule({T}x{n_in_dim} -> {T}x{n_out_dim}, {spec.routing_mode})")

    def decoder(name, n_in, n_out):
        params[name] = LstmParams.init(n_in, n_out, rng)
        topology.append(f"{name}: LSTM({n_in}->{n_out}, sequences)")

    if BRANCHED[spec.design]:
        for f in range(F):
            encoder(f"branch{f}.", 1)
            if spec.design == "A":
                caps(f"branch{f}.caps", h, c)
            else:
                decoder(f"branch{f}.dec", h, c)
        topology.append(f"concat: {F} branches -> {F * c}")
        if spec.design == "A":
            caps("merge.caps", F * c, F * c)
        else:
            decoder("merge.dec", F * c, F * c)
        dense_in = F * c
    else:
        encoder("", F)
        if spec.design == "C":
            caps("caps", h, c)
        else:
            decoder("dec", h, c)
        dense_in = c
    params["out"] = DenseParams.init(dense_in, F, rng)
    topology.append(f"out: TimeDistributed(Dense({dense_in}->{F}))")
    return Model(spec, params, topology)


def forward(model, batch, training=False):
    return model.forward(batch, training)


def match_widths(reference, designs=DESIGNS, max_width=128, tolerance=0.01):
    """Pick widths for each design whose count is closest to ``reference``'s.

    Integer search over (branch_width, capsule_dim). Candidates within
    ``tolerance`` (relative) of the target are ranked by how balanced the two
    widths are; outside that band, by distance. Returns ``{design: ModelSpec}``.
    """
    target = count_parameters(reference)
    out = {}
    for d in designs:
        best = None
        for h in range(1, max_width + 1):
            base = reference.replace(design=d, branch_width=h, capsule_dim=1)
            if count_parameters(base) > 2 * target:
                break
            for c in range(1, max_width + 1):
                spec = reference.replace(design=d, branch_width=h, capsule_dim=c)
                n = count_parameters(spec)
                off = abs(n - target)
                key = (off > tolerance * target, abs(h - c) if off <= tolerance * target else off, off, h)
                if best is None or key < best[0]:
                    best = (key, spec)
                if n > target:
                    break
        if d == reference.design:
            best = (None, reference)
        out[d] = best[1]
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"LSTMCAPS-CKPT"
FORMAT_VERSION = 1


def save_model(model, path, arrays=None, meta=None):
    """Write spec, parameters and optional extra named arrays.

    Layout: magic, u16 version, u64 header length, JSON header, then each
    array as little-endian float64 in header order.
    """
    tensors = [(k, v) for k, v in model.state_dict().items()]
    tensors += [(k, np.asarray(v, dtype=np.float64)) for k, v in (arrays or {}).items()]
    header = {
        "spec": model.spec.to_dict(),
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in tensors],
        "n_params": len(model.state_dict()),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, v in tensors:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_model(path):
    """Return ``(model, extra_arrays, meta)`` from a checkpoint."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    try:
        version, n = struct.unpack_from("<HQ", raw, off)
        off += struct.calcsize("<HQ")
        header = json.loads(raw[off:off + n]) if version == FORMAT_VERSION else None
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += n
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if off + 8 * count > len(raw):
            raise CheckpointError(f"{path}: truncated at array {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing or missing bytes")
    model = build(ModelSpec(**header["spec"]))
    names = list(arrays)
    n_params = header["n_params"]
    model.load_state_dict({k: arrays[k] for k in names[:n_params]})
    extra = {k: arrays[k] for k in names[n_params:]}
    return model, extra, header["meta"]
