"""Layer primitives: LSTM, capsules with squash, RepeatVector,
time-distributed dense, feature concatenation and dropout.

All layers accept either a single sample or a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

ROUTING_MODES = ("uniform", "dynamic")


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class LstmParams:
    W_f: Tensor
    W_i: Tensor
    W_C: Tensor
    W_o: Tensor
    b_f: Tensor
    b_i: Tensor
    b_C: Tensor
    b_o: Tensor

    GATES = ("f", "i", "C", "o")

    def __post_init__(self):
        ws = [self.W_f, self.W_i, self.W_C, self.W_o]
        bs = [self.b_f, self.b_i, self.b_C, self.b_o]
        if any(w.shape != ws[0].shape for w in ws) or ws[0].ndim != 2:
            raise ShapeError("LSTM gate weights must share one 2-D shape")
        if any(b.shape != (ws[0].shape[0],) for b in bs):
            raise ShapeError("LSTM gate biases must have length hidden")
        if ws[0].shape[1] <= ws[0].shape[0]:
            raise ShapeError("LSTM weights must be hidden x (hidden + input)")

    @property
    def hidden(self):
        return self.W_f.shape[0]

    @property
    def input_size(self):
        return self.W_f.shape[1] - self.W_f.shape[0]

    def named_tensors(self):
        return [(f"W_{g}", getattr(self, f"W_{g}")) for g in self.GATES] + \
               [(f"b_{g}", getattr(self, f"b_{g}")) for g in self.GATES]

    @classmethod
    def init(cls, input_size, hidden, rng):
        shape = (hidden, hidden + input_size)
        ws = {f"W_{g}": Tensor(glorot_uniform(rng, shape, hidden + input_size, hidden),
                               requires_grad=True) for g in cls.GATES}
        bs = {f"b_{g}": Tensor(np.zeros(hidden), requires_grad=True) for g in cls.GATES}
        return cls(**ws, **bs)

    @classmethod
    def zeros(cls, input_size, hidden):
        shape = (hidden, hidden + input_size)
        ws = {f"W_{g}": Tensor(np.zeros(shape), requires_grad=True) for g in cls.GATES}
        bs = {f"b_{g}": Tensor(np.zeros(hidden), requires_grad=True) for g in cls.GATES}
        return cls(**ws, **bs)


@dataclass
class LstmState:
    h: Tensor
    C: Tensor

    def __post_init__(self):
        if self.h.shape != self.C.shape:
            raise ShapeError(f"h {self.h.shape} and C {self.C.shape} differ")

    @classmethod
    def zeros(cls, hidden, batch=None):
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(ad.constant(np.zeros(shape)), ad.constant(np.zeros(shape)))


def _fuse(p):
    w = ad.concat([p.W_f, p.W_i, p.W_C, p.W_o], axis=0)
    b = ad.concat([p.b_f, p.b_i, p.b_C, p.b_o], axis=0)
    return ad.transpose(w), b


def _cell(w_t, b, hidden, h, c, x):
    z = ad.concat([h, x], axis=-1) @ w_t + b
    f = ad.sigmoid(z[..., :hidden])
    i = ad.sigmoid(z[..., hidden:2 * hidden])
    cand = ad.tanh(z[..., 2 * hidden:3 * hidden])
    o = ad.sigmoid(z[..., 3 * hidden:])
    c_new = f * c + i * cand
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def lstm_step(p, state, x):
    """One LSTM cell update; ``x`` is [input] or [batch, input]."""
    x = ad.constant(x)
    single = x.ndim == 1
    h, c = state.h, state.C
    if single:
        x = x.reshape(1, -1)
        h, c = h.reshape(1, -1), c.reshape(1, -1)
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"input width {x.shape[-1]} != {p.input_size}")
    if h.shape[-1] != p.hidden or h.shape[0] != x.shape[0]:
        raise ShapeError(f"state shape {state.h.shape} does not match hidden {p.hidden}")
    w_t, b = _fuse(p)
    h, c = _cell(w_t, b, p.hidden, h, c, x)
    if single:
        h, c = h.reshape(-1), c.reshape(-1)
    return LstmState(h, c)


def _check_sequence(p, xs):
    if xs.shape[-2] < 1:
        raise ContractError("empty sequence")
    if xs.shape[-1] != p.input_size:
        raise ShapeError(f"input width {xs.shape[-1]} != {p.input_size}")


def _nonempty(xs):
    # zero-length sequences cannot become tensors, so catch them first
    if not isinstance(xs, Tensor) and np.ndim(xs) >= 2 and np.shape(xs)[-2] == 0:
        raise ContractError("empty sequence")
    return ad.constant(xs)


def lstm_sequence(p, xs, return_sequences=False, state=None):
    """Run the LSTM cell over [T, input] or [batch, T, input] from a zero state."""
    xs = _nonempty(xs)
    if xs.ndim not in (2, 3):
        raise ContractError("sequence must be [T, input] or [batch, T, input]")
    single = xs.ndim == 2
    if single:
        xs = xs.reshape(1, *xs.shape)
    _check_sequence(p, xs)
    batch, steps = xs.shape[0], xs.shape[1]
    if state is None:
        state = LstmState.zeros(p.hidden, batch)
    elif state.h.shape != (batch, p.hidden):
        raise ShapeError(f"state shape {state.h.shape} does not match ({batch}, {p.hidden})")
    w_t, b = _fuse(p)
    h, c = state.h, state.C
    outs = []
    for t in range(steps):
        h, c = _cell(w_t, b, p.hidden, h, c, xs[:, t, :])
        outs.append(h)
    out = ad.stack(outs, axis=1) if return_sequences else h
    if single:
        out = out.reshape(out.shape[1:])
    return out


def lstm_sequence_grouped(ps, xs, return_sequences=False):
    """Run G independent LSTMs side by side; ``xs`` is [G, batch, T, input].

    Same result as calling ``lstm_sequence`` per group, with one batched
    matmul per timestep instead of G.
    """
    xs = _nonempty(xs)
    if xs.ndim != 4 or xs.shape[0] != len(ps):
        raise ShapeError(f"expected [{len(ps)}, batch, T, input], got {xs.shape}")
    if any(p.W_f.shape != ps[0].W_f.shape for p in ps):
        raise ShapeError("grouped LSTMs must share one shape")
    _check_sequence(ps[0], xs)
    fused = [_fuse(p) for p in ps]
    w_t = ad.stack([w for w, _ in fused], axis=0)                 # [G, h+in, 4h]
    b = ad.stack([bb for _, bb in fused], axis=0).reshape(len(ps), 1, -1)
    G, batch, steps = xs.shape[:3]
    hidden = ps[0].hidden
    h = c = ad.constant(np.zeros((G, batch, hidden)))
    outs = []
    for t in range(steps):
        h, c = _cell(w_t, b, hidden, h, c, xs[:, :, t, :])
        outs.append(h)
    return ad.stack(outs, axis=2) if return_sequences else h


def squash(s, axis=-1):
    return ad.squash(s, axis=axis)


@dataclass
class CapsuleParams:
    W: Tensor  # [num_in, num_out, out_dim, in_dim]
    routing_iters: int = 3
    routing_mode: str = "uniform"

    def __post_init__(self):
        if self.W.ndim != 4:
            raise ShapeError("capsule W must be [num_in, num_out, out_dim, in_dim]")
        if self.routing_mode not in ROUTING_MODES:
            raise ContractError(f"routing_mode must be one of {ROUTING_MODES}")
        if self.routing_iters < 0:
            raise ContractError("routing_iters must be >= 0")

    @property
    def num_in(self):
        return self.W.shape[0]

    @property
    def num_out(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[2]

    @property
    def in_dim(self):
        return self.W.shape[3]

    @classmethod
    def init(cls, num_in, num_out, in_dim, out_dim, rng, routing_mode="uniform",
             routing_iters=3, scale=None):
        """Uniform init; the default limit ``sqrt(6 num_in / (in_dim + out_dim))``
        keeps the coupled sum (coefficients ~ 1/num_in) at unit variance."""
        if scale is None:
            scale = np.sqrt(6.0 * num_in / (in_dim + out_dim))
        w = rng.uniform(-scale, scale, size=(num_in, num_out, out_dim, in_dim))
        return cls(Tensor(w, requires_grad=True), routing_iters, routing_mode)


def _route(W, u, mode, iters, couplings=None):
    """Core capsule computation on grouped tensors.

    ``W`` is [G, I, C, J, O] and ``u`` is [G, B, I, C]; returns [G, B, J, O].
    Einsum with a batch index falls back to a slow loop, so everything is
    written as batched matmuls and broadcast products.
    """
    G, B, I, C = u.shape
    J, O = W.shape[3], W.shape[4]
    if mode == "uniform":
        s = u.reshape(G, B, I * C) @ W.reshape(G, I * C, J * O)
        if couplings is not None:
            couplings.append(np.full((G, B, I, J), 1.0 / I))
        return ad.squash(s.reshape(G, B, J, O) * (1.0 / I))
    u_hat = ad.transpose(u, (0, 2, 1, 3)) @ W.reshape(G, I, C, J * O)     # [G, I, B, J*O]
    u_hat = ad.transpose(u_hat.reshape(G, I, B, J, O), (0, 2, 1, 3, 4))  # [G, B, I, J, O]
    logits = ad.constant(np.zeros((G, B, I, J)))
    for it in range(iters + 1):
        if it:
            logits = logits + (u_hat * v.reshape(G, B, 1, J, O)).sum(axis=-1)
        c = ad.softmax(logits, axis=3)
        if couplings is not None:
            couplings.append(c.data)
        v = ad.squash((c.reshape(G, B, I, J, 1) * u_hat).sum(axis=2))
    return v


def _grouped_weights(ps):
    return ad.transpose(ad.stack([p.W for p in ps], axis=0), (0, 1, 4, 2, 3))


def capsule_forward(p, u, return_coupling=False):
    """Map input capsules [.., num_in, in_dim] to output capsules [.., num_out, out_dim].

    Predictions ``W_ij u_i`` are combined with coupling coefficients and squashed.
    With ``return_coupling`` the coupling arrays of every routing pass are also
    returned (shape [batch, num_in, num_out]).
    """
    u = ad.constant(u)
    single = u.ndim == 2
    if single:
        u = u.reshape(1, *u.shape)
    if u.ndim != 3 or u.shape[1] != p.num_in or u.shape[2] != p.in_dim:
        raise ShapeError(f"capsule input {u.shape} does not match [{p.num_in}, {p.in_dim}]")
    couplings = [] if return_coupling else None
    v = _route(_grouped_weights([p]), u.reshape(1, *u.shape), p.routing_mode,
               p.routing_iters, couplings)
    v = v.reshape(v.shape[1:])
    if single:
        v = v.reshape(v.shape[1:])
    if return_coupling:
        return v, [c[0] for c in couplings]
    return v


def capsule_forward_grouped(ps, u):
    """G independent capsule layers on [G, batch, num_in, in_dim] inputs."""
    u = ad.constant(u)
    p0 = ps[0]
    if any(p.W.shape != p0.W.shape or p.routing_mode != p0.routing_mode
           or p.routing_iters != p0.routing_iters for p in ps):
        raise ShapeError("grouped capsule layers must share shape and routing")
    if u.ndim != 4 or u.shape[0] != len(ps) or u.shape[2:] != (p0.num_in, p0.in_dim):
        raise ShapeError(f"grouped capsule input {u.shape} does not match "
                         f"[{len(ps)}, batch, {p0.num_in}, {p0.in_dim}]")
    return _route(_grouped_weights(ps), u, p0.routing_mode, p0.routing_iters)


def repeat_vector(v, n):
    """[d] -> [n, d] or [batch, d] -> [batch, n, d]."""
    if n < 1:
        raise ContractError("repeat count must be >= 1")
    v = ad.constant(v)
    if v.ndim == 1:
        return ad.broadcast_to(v.reshape(1, -1), (n, v.shape[0]))
    if v.ndim != 2:
        raise ShapeError("repeat_vector expects [d] or [batch, d]")
    b, d = v.shape
    return ad.broadcast_to(v.reshape(b, 1, d), (b, n, d))


@dataclass
class DenseParams:
    W: Tensor  # [out, in]
    b: Tensor  # [out]

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError("dense W must be [out, in] with b [out]")

    @classmethod
    def init(cls, in_size, out_size, rng):
        w = glorot_uniform(rng, (out_size, in_size), in_size, out_size)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_size), requires_grad=True))


def time_distributed_dense(W, b, xs):
    """Apply the same linear map ``W x + b`` to every timestep."""
    W, b, xs = ad.constant(W), ad.constant(b), ad.constant(xs)
    if xs.ndim < 2 or xs.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense {W.shape} cannot apply to {xs.shape}")
    return xs @ ad.transpose(W) + b


def concat_features(parts):
    """Concatenate [.., T, d_k] sequences along the feature axis, in order."""
    parts = [ad.constant(p) for p in parts]
    if not parts:
        raise ContractError("nothing to concatenate")
    if len(parts) == 1:
        return parts[0]
    steps = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != steps:
            raise ShapeError(f"timestep/batch mismatch: {p.shape[:-1]} vs {steps}")
    return ad.concat(parts, axis=-1)


def dropout(x, rate, training, rng):
    """Inverted dropout; identity at inference time."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    x = ad.constant(x)
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * ad.constant(mask)
