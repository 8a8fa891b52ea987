"""The full engagement-estimation network.

Pipeline per 96-frame dyadic window: attach the sample's learnable domain
prompt to both participants' features, project to the model width, run a
stack of interaction layers (independent BiLSTM encoders for target and
partner, then four parallel cross-attention flows that align reactive states
with reactive states and anticipatory states with anticipatory states,
fused by concatenation), concatenate both participants' fused
representations, and map through a sigmoid MLP head to per-frame scores in
(0, 1). Training minimizes 1 - CCC between predictions and labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, DimensionError, DomainLookupError, UsageError
from .rng import RngStream
from .tensor import Tensor

PROMPT_MODES = ("feature", "time")
UNKNOWN_DOMAIN_POLICIES = ("error", "mean")


@dataclass
class ModelConfig:
    d_in: int
    d_prompt: int = 64
    d_model: int = 512
    lstm_layers: int = 3
    num_dapa_layers: int = 1
    dropout: float = 0.1
    attention_projections: bool = True
    attention_heads: int = 1
    head_hidden: list = field(default_factory=lambda: [512])
    window_len: int = 96
    prompt_mode: str = "feature"
    unknown_domain: str = "error"
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("d_in", "d_model", "lstm_layers", "num_dapa_layers",
                     "attention_heads", "window_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_prompt < 0:
            raise ConfigError("d_prompt must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.prompt_mode == "time" and self.d_prompt not in (0, self.d_in):
            raise ConfigError("time-prepended prompts need d_prompt == d_in")
        if self.unknown_domain not in UNKNOWN_DOMAIN_POLICIES:
            raise ConfigError(f"unknown_domain must be one of {UNKNOWN_DOMAIN_POLICIES}")
        if self.d_model % self.attention_heads != 0:
            raise ConfigError("d_model must be divisible by attention_heads")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if any(h < 1 for h in self.head_hidden):
            raise ConfigError("head_hidden sizes must be >= 1")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class DomainPromptPool:
    """One learnable window_len x d_prompt prompt per training domain.

    The same prompt instance conditions both the target and partner streams
    of a sample, so its gradient accumulates from both paths.
    """

    prompts: list  # of Tensor, index-aligned with domain_index values
    domain_index: dict

    def index_of(self, domain: str, policy: str = "error") -> Optional[int]:
        if domain in self.domain_index:
            return self.domain_index[domain]
        if policy == "mean":
            return None  # caller substitutes the pool mean
        raise DomainLookupError(
            f"unknown domain {domain!r}; known: {sorted(self.domain_index)} "
            "(set unknown_domain='mean' to fall back to the prompt-pool mean)"
        )


@dataclass
class DapaLayerParams:
    target_encoder: L.LstmStackParams
    partner_encoder: L.LstmStackParams
    att_anticipatory_tp: L.AttentionParams  # target queries partner
    att_anticipatory_pt: L.AttentionParams  # partner queries target
    att_reactive_tp: L.AttentionParams
    att_reactive_pt: L.AttentionParams


@dataclass
class DapaModel:
    config: ModelConfig
    prompt_pool: Optional[DomainPromptPool]
    projection: list  # two LinearParams shared by both participant roles
    layers: list  # DapaLayerParams
    head: list  # LinearParams

    # -- construction -----------------------------------------------------

    @staticmethod
    def build(config: ModelConfig, domains: Sequence[str], seed: int = 40) -> "DapaModel":
        if len(set(domains)) != len(domains):
            raise ConfigError("duplicate domain names")
        dtype = config.np_dtype
        rng = RngStream(seed).spawn("init")

        pool = None
        if config.d_prompt > 0:
            if not domains:
                raise ConfigError("prompted model needs at least one domain")
            index = {name: i for i, name in enumerate(sorted(domains))}
            prompts = [
                Tensor(rng.normal((config.window_len, config.d_prompt), std=0.02,
                                  dtype=dtype), requires_grad=True)
                for _ in index
            ]
            pool = DomainPromptPool(prompts, index)

        proj_in = config.d_in if config.prompt_mode == "time" else config.d_in + config.d_prompt
        projection = [
            L.init_linear(rng, proj_in, config.d_model, dtype),
            L.init_linear(rng, config.d_model, config.d_model, dtype),
        ]

        layers = []
        layer_in = config.d_model
        for _ in range(config.num_dapa_layers):
            enc_t = L.init_lstm_stack(rng, layer_in, config.d_model, config.lstm_layers, dtype)
            enc_p = L.init_lstm_stack(rng, layer_in, config.d_model, config.lstm_layers, dtype)
            atts = [
                L.init_attention(rng, config.d_model, config.attention_projections,
                                 config.attention_heads, dtype)
                for _ in range(4)
            ]
            layers.append(DapaLayerParams(enc_t, enc_p, *atts))
            layer_in = 2 * config.d_model  # fused reactive+anticipatory

        head = []
        h_in = 4 * config.d_model
        for h in config.head_hidden:
            head.append(L.init_linear(rng, h_in, h, dtype))
            h_in = h
        head.append(L.init_linear(rng, h_in, 1, dtype))

        return DapaModel(config, pool, projection, layers, head)

    # -- parameter bookkeeping ---------------------------------------------

    def named_parameters(self) -> dict:
        """Stable name -> Tensor mapping (iteration order is fixed)."""
        out = {}
        if self.prompt_pool is not None:
            names = sorted(self.prompt_pool.domain_index,
                           key=self.prompt_pool.domain_index.get)
            for name in names:
                out[f"prompt.{name}"] = self.prompt_pool.prompts[
                    self.prompt_pool.domain_index[name]]
        for i, p in enumerate(self.projection):
            out[f"proj.{i}.weight"] = p.weight
            out[f"proj.{i}.bias"] = p.bias
        for li, layer in enumerate(self.layers):
            for role, enc in (("target", layer.target_encoder),
                              ("partner", layer.partner_encoder)):
                for dname, d in L.direction_params(enc):
                    out[f"layer{li}.{role}.{dname}.w_in"] = d.w_in
                    out[f"layer{li}.{role}.{dname}.w_rec"] = d.w_rec
                    out[f"layer{li}.{role}.{dname}.bias"] = d.bias
            for aname, att in (("att_a_tp", layer.att_anticipatory_tp),
                               ("att_a_pt", layer.att_anticipatory_pt),
                               ("att_r_tp", layer.att_reactive_tp),
                               ("att_r_pt", layer.att_reactive_pt)):
                if att.has_projections:
                    out[f"layer{li}.{aname}.wq"] = att.wq
                    out[f"layer{li}.{aname}.wk"] = att.wk
                    out[f"layer{li}.{aname}.wv"] = att.wv
        for i, p in enumerate(self.head):
            out[f"head.{i}.weight"] = p.weight
            out[f"head.{i}.bias"] = p.bias
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None

    @property
    def num_domains(self) -> int:
        return len(self.prompt_pool.domain_index) if self.prompt_pool else 0


def expected_parameter_count(config: ModelConfig, num_domains: int) -> int:
    """Closed-form parameter total implied by a config.

    prompts:    K * N_w * D_p
    projection: H*(D_in + D_p) + H  +  H*H + H          (feature mode)
    per layer:  2 encoders * sum over stacked layers of
                  2 directions * (in*4H + H*4H + 4H),
                in = layer input (H, then 2H for later interaction layers;
                2H for stacked LSTM layers past the first)
    attention:  4 pathways * 3 * H*H when projections are on
    head:       chain 4H -> hidden sizes -> 1, each out*in + out
    """
    h = config.d_model
    total = num_domains * config.window_len * config.d_prompt
    proj_in = config.d_in if config.prompt_mode == "time" else config.d_in + config.d_prompt
    total += h * proj_in + h
    total += h * h + h
    layer_in = h
    for _ in range(config.num_dapa_layers):
        d = layer_in
        for _ in range(config.lstm_layers):
            # 2 encoders (target, partner) x 2 directions
            total += 4 * (d * 4 * h + h * 4 * h + 4 * h)
            d = 2 * h
        if config.attention_projections:
            total += 4 * 3 * h * h
        layer_in = 2 * h
    d = 4 * h
    for hh in list(config.head_hidden) + [1]:
        total += hh * d + hh
        d = hh
    return total


# -- forward pieces ------------------------------------------------------------


def attach_prompt(pool: Optional[DomainPromptPool], x_t: Tensor, x_p: Tensor,
                  domain: str, mode: str = "feature", policy: str = "error"):
    """Attach the domain's prompt to both participants' feature sequences.

    Feature mode concatenates prompt row t in front of frame t's features
    (width grows by d_prompt); time mode prepends the prompt rows as extra
    leading frames. Both streams receive the same prompt tensor.
    """
    if pool is None:
        return x_t, x_p
    prompt = _select_prompt(pool, domain, policy)
    if prompt.shape[0] != x_t.shape[0]:
        raise DimensionError(
            f"prompt rows {prompt.shape[0]} != frame rows {x_t.shape[0]}"
        )
    axis = 1 if mode == "feature" else 0
    return (T.concat([prompt, x_t], axis=axis),
            T.concat([prompt, x_p], axis=axis))


def _select_prompt(pool: DomainPromptPool, domain: str, policy: str) -> Tensor:
    idx = pool.index_of(domain, policy)
    if idx is not None:
        return pool.prompts[idx]
    # unknown domain, mean fallback: element-wise mean of the pool
    total = pool.prompts[0]
    for p in pool.prompts[1:]:
        total = T.add(total, p)
    return T.mul(total, 1.0 / len(pool.prompts))


def encode_context(layer: DapaLayerParams, h_t: Tensor, h_p: Tensor,
                   rng: Optional[RngStream] = None, training: bool = False,
                   dropout: float = 0.0):
    """Run both participants' independent encoders.

    Returns (reactive_t, anticipatory_t, reactive_p, anticipatory_p).
    """
    if h_t.shape[0] != h_p.shape[0]:
        raise DimensionError(f"participant row counts differ: {h_t.shape} vs {h_p.shape}")
    r_t, a_t = L.bilstm_forward(layer.target_encoder, h_t, rng, training, dropout)
    r_p, a_p = L.bilstm_forward(layer.partner_encoder, h_p, rng, training, dropout)
    return r_t, a_t, r_p, a_p


def parallel_cross_attention(layer: DapaLayerParams, states):
    """Four parallel alignment flows; directions never mix.

    Anticipatory queries attend anticipatory keys/values of the other
    participant, reactive likewise. Returns
    (anticipatory_tp, anticipatory_pt, reactive_tp, reactive_pt).
    """
    r_t, a_t, r_p, a_p = states
    att_a_tp = L.scaled_dot_attention(layer.att_anticipatory_tp, a_t, a_p, a_p)
    att_a_pt = L.scaled_dot_attention(layer.att_anticipatory_pt, a_p, a_t, a_t)
    att_r_tp = L.scaled_dot_attention(layer.att_reactive_tp, r_t, r_p, r_p)
    att_r_pt = L.scaled_dot_attention(layer.att_reactive_pt, r_p, r_t, r_t)
    return att_a_tp, att_a_pt, att_r_tp, att_r_pt


def fuse_alignments(reactive: Tensor, anticipatory: Tensor) -> Tensor:
    """Feature concat, reactive block first."""
    if reactive.shape[-2] != anticipatory.shape[-2]:
        raise DimensionError(
            f"alignment row counts differ: {reactive.shape} vs {anticipatory.shape}"
        )
    return T.concat([reactive, anticipatory], axis=-1)


# -- batched forward -------------------------------------------------------------


def _project(model: DapaModel, x: Tensor, rng, training) -> Tensor:
    cfg = model.config
    h = x
    for p in model.projection:
        h = T.dropout(T.tanh(L.linear_forward(p, h)), cfg.dropout, rng, training)
    return h


def _time_steps(x: Tensor):
    """(B, N, D) -> list of N tensors (B, D)."""
    b, n, d = x.shape
    xt = T.swapaxes(x, 0, 1)
    return [T.reshape(T.slice_axis(xt, 0, t, t + 1), (b, d)) for t in range(n)]


def _steps_to_batch(steps) -> Tensor:
    """list of N tensors (B, H) -> (B, N, H)."""
    return T.swapaxes(T.stack(steps, axis=0), 0, 1)


def forward_batch(model: DapaModel, xs_target: Sequence[np.ndarray],
                  xs_partner: Sequence[np.ndarray], domains: Sequence[str],
                  rng: Optional[RngStream] = None, training: bool = False) -> Tensor:
    """Forward a batch of dyadic windows; returns predictions (B, N_w, 1).

    Inputs are raw per-window feature matrices (window_len x d_in); one
    recorded graph covers the whole batch so the per-step Python overhead is
    shared across samples.
    """
    cfg = model.config
    if not (len(xs_target) == len(xs_partner) == len(domains)):
        raise UsageError("batch lists must have equal length")
    if len(xs_target) == 0:
        raise UsageError("empty batch")
    dtype = cfg.np_dtype
    n_w = cfg.window_len

    def as_leaf(x):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.ascontiguousarray(x, dtype=dtype))

    streams = {"t": [], "p": []}
    for x_t, x_p, dom in zip(xs_target, xs_partner, domains):
        if x_t.shape != (n_w, cfg.d_in) or x_p.shape != (n_w, cfg.d_in):
            raise DimensionError(
                f"window must be {(n_w, cfg.d_in)}, got {x_t.shape} / {x_p.shape}"
            )
        t_t, t_p = attach_prompt(model.prompt_pool, as_leaf(x_t), as_leaf(x_p),
                                 dom, cfg.prompt_mode, cfg.unknown_domain)
        streams["t"].append(t_t)
        streams["p"].append(t_p)

    h_t = _project(model, T.stack(streams["t"], axis=0), rng, training)
    h_p = _project(model, T.stack(streams["p"], axis=0), rng, training)

    for layer in model.layers:
        states = []
        for role, h, enc in (("t", h_t, layer.target_encoder),
                             ("p", h_p, layer.partner_encoder)):
            steps = _time_steps(h)
            fwd, bwd = L.bilstm_steps(enc, steps, rng, training, cfg.dropout)
            states.append((_steps_to_batch(fwd), _steps_to_batch(bwd)))
        (r_t, a_t), (r_p, a_p) = states
        att_a_tp, att_a_pt, att_r_tp, att_r_pt = parallel_cross_attention(
            layer, (r_t, a_t, r_p, a_p))
        h_t = fuse_alignments(att_r_tp, att_a_tp)
        h_p = fuse_alignments(att_r_pt, att_a_pt)

    out = T.concat([h_t, h_p], axis=-1)  # dyadic state vector (B, N, 4H)
    if cfg.prompt_mode == "time" and model.prompt_pool is not None:
        out = T.slice_axis(out, 1, n_w, out.shape[1])  # drop prompt frames
    return L.mlp_head_forward(model.head, out, rng, training, cfg.dropout)


def forward(model: DapaModel, x_t: np.ndarray, x_p: np.ndarray, domain: str,
            rng: Optional[RngStream] = None, training: bool = False) -> Tensor:
    """Single-window forward; returns predictions (N_w, 1) in (0, 1)."""
    out = forward_batch(model, [x_t], [x_p], [domain], rng, training)
    return T.reshape(out, (model.config.window_len, 1))


# -- loss -----------------------------------------------------------------------


def ccc_loss(pred: Tensor, truth) -> Tensor:
    """1 - CCC(pred, truth), differentiable through pred.

    CCC uses population statistics: 2 cov / (var_p + var_t + (mean gap)^2).
    """
    if isinstance(truth, Tensor):
        truth = truth.data
    truth = np.asarray(truth, dtype=pred.dtype).reshape(-1)
    m = truth.size
    if m < 2:
        raise UsageError(f"ccc needs at least 2 frames, got {m}")
    if pred.size != m:
        raise UsageError(f"pred/truth lengths differ: {pred.size} vs {m}")
    if np.min(truth) < 0.0 or np.max(truth) > 1.0:
        raise UsageError("truth labels must lie in [0, 1]")

    p = T.reshape(pred, (m,))
    mean_p = T.tmean(p)
    mean_t = float(truth.mean())
    dev_p = T.sub(p, mean_p)
    dev_t = Tensor(truth - mean_t)
    var_p = T.tmean(T.mul(dev_p, dev_p))
    var_t = float(((truth - mean_t) ** 2).mean())
    cov = T.tmean(T.mul(dev_p, dev_t))
    gap = T.sub(mean_p, mean_t)
    denom = T.add(T.add(var_p, var_t), T.mul(gap, gap))
    return T.sub(T.as_scalar(1.0, pred.dtype), T.div(T.mul(cov, 2.0), denom))
