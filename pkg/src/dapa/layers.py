"""Neural building blocks: linear maps, stacked BiLSTMs, attention, MLP head.

The BiLSTM deliberately returns its forward-direction and backward-direction
state sequences as two separate buffers instead of one concatenated matrix:
downstream attention treats them as distinct "just reacted" and "knows the
future" views of the conversation, and must never mix them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .rng import RngStream
from .tensor import Tensor

# Fused LSTM gate order along the 4H axis.
GATE_ORDER = ("input", "forget", "cell", "output")


def _uniform_init(rng: RngStream, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape, dtype=dtype)


# -- linear ------------------------------------------------------------------


@dataclass
class LinearParams:
    weight: Tensor  # out x in
    bias: Tensor  # out

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


def init_linear(rng: RngStream, n_in: int, n_out: int, dtype=np.float32) -> LinearParams:
    w = Tensor(_uniform_init(rng, (n_out, n_in), n_in, dtype), requires_grad=True)
    b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
    return LinearParams(w, b)


def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    """x @ W^T + b over the last axis."""
    if x.shape[-1] != p.n_in:
        raise DimensionError(
            f"linear expects {p.n_in} input features, got {x.shape}"
        )
    return T.add(T.matmul(x, T.transpose(p.weight)), p.bias)


# -- LSTM ----------------------------------------------------------------------


@dataclass
class LstmDirectionParams:
    """One direction of one stacked layer; gates fused in GATE_ORDER."""

    w_in: Tensor  # in x 4H
    w_rec: Tensor  # H x 4H
    bias: Tensor  # 4H (forget block starts at 1.0)


@dataclass
class LstmStackParams:
    layers: list  # [(forward: LstmDirectionParams, backward: LstmDirectionParams)]
    hidden: int
    input_dim: int

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def init_lstm_direction(rng: RngStream, input_dim: int, hidden: int, dtype) -> LstmDirectionParams:
    w_in = Tensor(_uniform_init(rng, (input_dim, 4 * hidden), input_dim, dtype), requires_grad=True)
    w_rec = Tensor(_uniform_init(rng, (hidden, 4 * hidden), hidden, dtype), requires_grad=True)
    bias = np.zeros(4 * hidden, dtype=dtype)
    bias[hidden:2 * hidden] = 1.0  # forget gate bias
    return LstmDirectionParams(w_in, w_rec, Tensor(bias, requires_grad=True))


def init_lstm_stack(rng: RngStream, input_dim: int, hidden: int, num_layers: int,
                    dtype=np.float32) -> LstmStackParams:
    if num_layers < 1 or hidden < 1:
        raise ConfigError("LSTM stack needs num_layers >= 1 and hidden >= 1")
    layers = []
    d = input_dim
    for _ in range(num_layers):
        fwd = init_lstm_direction(rng, d, hidden, dtype)
        bwd = init_lstm_direction(rng, d, hidden, dtype)
        layers.append((fwd, bwd))
        d = 2 * hidden  # next layer consumes both directions
    return LstmStackParams(layers, hidden, input_dim)


def lstm_cell(p: LstmDirectionParams, x: Tensor, h: Tensor, c: Tensor, hidden: int):
    """One step: returns (h', c')."""
    pre = T.add(T.add(T.matmul(x, p.w_in), T.matmul(h, p.w_rec)), p.bias)
    i = T.sigmoid(T.slice_axis(pre, -1, 0, hidden))
    f = T.sigmoid(T.slice_axis(pre, -1, hidden, 2 * hidden))
    g = T.tanh(T.slice_axis(pre, -1, 2 * hidden, 3 * hidden))
    o = T.sigmoid(T.slice_axis(pre, -1, 3 * hidden, 4 * hidden))
    c2 = T.add(T.mul(f, c), T.mul(i, g))
    h2 = T.mul(o, T.tanh(c2))
    return h2, c2


def _lstm_direction(p: LstmDirectionParams, steps: Sequence[Tensor], hidden: int,
                    reverse: bool) -> list:
    """Run one direction over time-major steps; outputs in forward time order."""
    n = len(steps)
    batch = steps[0].shape[0]
    dtype = steps[0].dtype
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    outs = [None] * n
    order = range(n - 1, -1, -1) if reverse else range(n)
    for t in order:
        h, c = lstm_cell(p, steps[t], h, c, hidden)
        outs[t] = h
    return outs


def bilstm_steps(p: LstmStackParams, steps: Sequence[Tensor], rng: Optional[RngStream],
                 training: bool, dropout: float = 0.0):
    """Stacked BiLSTM over time-major (batch x dim) steps.

    Returns (forward_states, backward_states), two time-major lists from the
    top layer. Inter-layer dropout is applied on the concatenated outputs fed
    to the next layer, train mode only.
    """
    if len(steps) == 0:
        raise UsageError("BiLSTM needs at least one frame")
    inputs = list(steps)
    fwd = bwd = None
    for li, (pf, pb) in enumerate(p.layers):
        fwd = _lstm_direction(pf, inputs, p.hidden, reverse=False)
        bwd = _lstm_direction(pb, inputs, p.hidden, reverse=True)
        if li + 1 < p.num_layers:
            inputs = [
                T.dropout(T.concat([f, b], axis=-1), dropout, rng, training)
                for f, b in zip(fwd, bwd)
            ]
    return fwd, bwd


def bilstm_forward(p: LstmStackParams, x: Tensor, rng: Optional[RngStream] = None,
                   training: bool = False, dropout: float = 0.0):
    """Encode one sequence (N x D).

    Returns the top layer's (reactive, anticipatory) state sequences, each
    N x hidden: reactive[t] sees frames 0..t, anticipatory[t] sees t..N-1.
    They are returned separately, never concatenated.
    """
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D sequence, got {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise UsageError("empty sequence")
    steps = [T.slice_axis(x, 0, t, t + 1) for t in range(n)]
    fwd, bwd = bilstm_steps(p, steps, rng, training, dropout)
    reactive = T.concat(fwd, axis=0)
    anticipatory = T.concat(bwd, axis=0)
    return reactive, anticipatory


# -- attention -----------------------------------------------------------------


@dataclass
class AttentionParams:
    """Scaled dot-product attention, optionally with learned square Q/K/V maps."""

    wq: Optional[Tensor]
    wk: Optional[Tensor]
    wv: Optional[Tensor]
    heads: int = 1

    @property
    def has_projections(self) -> bool:
        return self.wq is not None


def init_attention(rng: RngStream, dim: int, projections: bool = True, heads: int = 1,
                   dtype=np.float32) -> AttentionParams:
    if heads < 1 or dim % heads != 0:
        raise ConfigError(f"attention dim {dim} not divisible by heads {heads}")
    if not projections:
        return AttentionParams(None, None, None, heads)
    mats = [Tensor(_uniform_init(rng, (dim, dim), dim, dtype), requires_grad=True)
            for _ in range(3)]
    return AttentionParams(*mats, heads)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., N, d) -> (..., heads, N, d/heads)
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    return T.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., heads, N, dh) -> (..., N, heads*dh)
    *lead, h, n, dh = x.shape
    x = T.swapaxes(x, -3, -2)
    return T.reshape(x, (*lead, n, h * dh))


def scaled_dot_attention(p: AttentionParams, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Accepts (N, d) or batched (..., N, d) operands. With projections enabled
    the learned square maps are applied to q/k/v first; d_k is the per-head
    key width after projection.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key widths disagree: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value row counts disagree: {k.shape} vs {v.shape}")
    if p.has_projections:
        q = T.matmul(q, p.wq)
        k = T.matmul(k, p.wk)
        v = T.matmul(v, p.wv)
    if p.heads > 1:
        q = _split_heads(q, p.heads)
        k = _split_heads(k, p.heads)
        v = _split_heads(v, p.heads)
    d_k = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k)), T.sqrt_scale(d_k))
    out = T.matmul(T.softmax_rows(scores), v)
    if p.heads > 1:
        out = _merge_heads(out)
    return out


# -- prediction head -----------------------------------------------------------


def mlp_head_forward(layers: Sequence[LinearParams], x: Tensor,
                     rng: Optional[RngStream] = None, training: bool = False,
                     dropout: float = 0.0) -> Tensor:
    """tanh+dropout hidden layers, then a sigmoid output in (0, 1)."""
    if not layers:
        raise ConfigError("prediction head needs at least one linear layer")
    h = x
    for p in layers[:-1]:
        h = T.dropout(T.tanh(linear_forward(p, h)), dropout, rng, training)
    return T.sigmoid(linear_forward(layers[-1], h))


def direction_params(p: LstmStackParams):
    """Flat iterator over (name, LstmDirectionParams) in a stable order."""
    for li, (fwd, bwd) in enumerate(p.layers):
        yield f"l{li}.fwd", fwd
        yield f"l{li}.bwd", bwd
