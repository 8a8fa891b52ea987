"""Finite-difference verification suites for every differentiable block.

Each block builds float64 inputs, runs a scalar objective, and compares
analytic gradients against central differences (the ``finite_diff_check``
oracle). Blocks are checked behind a generic random weighted-sum objective;
the end-to-end block uses the real training objective (1 - CCC).

Gradient checks are evaluated at a conditioned generic point: the default
initialization is deliberately near-flat (tiny prompts, small weights), which
drives true gradients below central-difference resolution at eps=1e-5, so the
suite re-draws parameters at magnitudes where attention weights are peaked
and the objective has usable curvature.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import model as M
from . import tensor as T
from .rng import RngStream
from .tensor import Tensor, finite_diff_check

EPS = 1e-5
DEFAULT_TOL = 1e-4
CCC_TOL = 1e-6


@dataclass
class BlockResult:
    name: str
    max_rel_err: float
    tolerance: float
    coords: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _weighted_sum(out: Tensor, rng: RngStream) -> Tensor:
    w = Tensor(rng.normal(out.shape))
    return T.tsum(T.mul(out, w))


def condition_for_gradcheck(model: M.DapaModel, seed: int = 777):
    """Move parameters to a generic, well-conditioned point (float64 models)."""
    draw = RngStream(seed)
    for name, t in model.named_parameters().items():
        if "att" in name and ".w" in name:
            t.data = draw.uniform(-2.0, 2.0, t.shape)
        elif name.endswith("bias"):
            t.data = draw.uniform(-0.5, 0.5, t.shape)
        elif name.startswith("prompt"):
            t.data = draw.uniform(-1.0, 1.0, t.shape)
        else:
            t.data = draw.uniform(-0.9, 0.9, t.shape)


def _check_many(f, tensors, rng, max_coords, eps=EPS):
    worst, total = 0.0, 0
    for t in tensors:
        n = min(t.size, max_coords) if max_coords else t.size
        worst = max(worst, finite_diff_check(f, t, eps, max_coords=n, rng=rng))
        total += n
    return worst, total


# -- individual blocks -------------------------------------------------------


def _block_matmul(rng):
    a = Tensor(rng.normal((3, 4)), requires_grad=True)
    b = Tensor(rng.normal((4, 5)), requires_grad=True)
    w = RngStream(1)

    def f(_):
        return _weighted_sum(T.matmul(a, b), RngStream(11))

    return _check_many(f, [a, b], w, None)


def _block_softmax(rng):
    x = Tensor(rng.normal((4, 6)), requires_grad=True)

    def f(_):
        return _weighted_sum(T.softmax_rows(x), RngStream(12))

    return _check_many(f, [x], rng, None)


def _block_unary(rng):
    worst, total = 0.0, 0
    for kind in ("tanh", "sigmoid", "exp", "neg"):
        x = Tensor(rng.normal((3, 5)), requires_grad=True)

        def f(_):
            return _weighted_sum(T.unary_map(x, kind), RngStream(13))

        err, n = _check_many(f, [x], rng, None)
        worst, total = max(worst, err), total + n
    return worst, total


def _block_concat_slice(rng):
    a = Tensor(rng.normal((3, 4)), requires_grad=True)
    b = Tensor(rng.normal((3, 2)), requires_grad=True)

    def f(_):
        cat = T.concat([a, b], axis=1)
        return _weighted_sum(T.slice_axis(cat, 1, 1, 5), RngStream(14))

    return _check_many(f, [a, b], rng, None)


def _block_dropout(rng):
    x = Tensor(rng.normal((4, 6)), requires_grad=True)

    def f(_):
        # fresh stream each call -> identical mask, deterministic objective
        out = T.dropout(x, 0.3, RngStream(99), training=True)
        return _weighted_sum(out, RngStream(15))

    return _check_many(f, [x], rng, None)


def _block_linear(rng):
    p = L.init_linear(rng, 5, 3, np.float64)
    p.weight.data = rng.uniform(-1.0, 1.0, p.weight.shape)
    p.bias.data = rng.uniform(-0.5, 0.5, p.bias.shape)
    x = Tensor(rng.normal((4, 5)), requires_grad=True)

    def f(_):
        return _weighted_sum(L.linear_forward(p, x), RngStream(16))

    return _check_many(f, [x, p.weight, p.bias], rng, None)


def _block_lstm_cell(rng):
    hidden = 4
    p = L.init_lstm_direction(rng, 3, hidden, np.float64)
    for t in (p.w_in, p.w_rec):
        t.data = rng.uniform(-0.9, 0.9, t.shape)
    x = Tensor(rng.normal((2, 3)), requires_grad=True)
    h = Tensor(rng.normal((2, hidden)), requires_grad=True)
    c = Tensor(rng.normal((2, hidden)), requires_grad=True)

    def f(_):
        h2, c2 = L.lstm_cell(p, x, h, c, hidden)
        return T.add(_weighted_sum(h2, RngStream(17)), _weighted_sum(c2, RngStream(18)))

    return _check_many(f, [x, h, c, p.w_in, p.w_rec, p.bias], rng, None)


def _block_bilstm(rng):
    p = L.init_lstm_stack(rng, 3, 4, 2, np.float64)
    tensors = []
    for _, d in L.direction_params(p):
        d.w_in.data = rng.uniform(-0.9, 0.9, d.w_in.shape)
        d.w_rec.data = rng.uniform(-0.9, 0.9, d.w_rec.shape)
        d.bias.data = rng.uniform(-0.5, 0.5, d.bias.shape)
        tensors += [d.w_in, d.w_rec, d.bias]
    x = Tensor(rng.normal((5, 3)), requires_grad=True)
    tensors.append(x)

    def f(_):
        reactive, anticipatory = L.bilstm_forward(p, x)
        return T.add(_weighted_sum(reactive, RngStream(19)),
                     _weighted_sum(anticipatory, RngStream(20)))

    return _check_many(f, tensors, rng, None)


def _block_attention(rng, projections, heads):
    p = L.init_attention(rng, 4, projections=projections, heads=heads, dtype=np.float64)
    tensors = []
    if projections:
        for t in (p.wq, p.wk, p.wv):
            t.data = rng.uniform(-1.5, 1.5, t.shape)
            tensors.append(t)
    q = Tensor(rng.normal((5, 4)), requires_grad=True)
    k = Tensor(rng.normal((6, 4)), requires_grad=True)
    v = Tensor(rng.normal((6, 4)), requires_grad=True)
    tensors += [q, k, v]

    def f(_):
        return _weighted_sum(L.scaled_dot_attention(p, q, k, v), RngStream(21))

    return _check_many(f, tensors, rng, None)


def _block_prompt_projection(rng):
    cfg = M.ModelConfig(d_in=4, d_prompt=2, d_model=6, lstm_layers=1,
                        num_dapa_layers=1, dropout=0.0, head_hidden=[6],
                        window_len=5, dtype="float64")
    model = M.DapaModel.build(cfg, ["a"], seed=3)
    condition_for_gradcheck(model, seed=31)
    x_t = rng.normal((5, 4))
    x_p = rng.normal((5, 4))
    pool = model.prompt_pool
    tensors = [pool.prompts[0]]
    for p in model.projection:
        tensors += [p.weight, p.bias]

    def f(_):
        a, b = M.attach_prompt(pool, Tensor(x_t), Tensor(x_p), "a")
        out = M._project(model, T.concat([a, b], axis=0), None, False)
        return _weighted_sum(out, RngStream(22))

    return _check_many(f, tensors, rng, None)


def _block_mlp_head(rng):
    layers = [L.init_linear(rng, 6, 4, np.float64), L.init_linear(rng, 4, 1, np.float64)]
    tensors = []
    for p in layers:
        p.weight.data = rng.uniform(-1.2, 1.2, p.weight.shape)
        p.bias.data = rng.uniform(-0.5, 0.5, p.bias.shape)
        tensors += [p.weight, p.bias]
    x = Tensor(rng.normal((7, 6)), requires_grad=True)
    tensors.append(x)

    def f(_):
        return _weighted_sum(L.mlp_head_forward(layers, x), RngStream(23))

    return _check_many(f, tensors, rng, None)


def _block_ccc_loss(rng):
    truth = rng.uniform(0.0, 1.0, (12,))
    x = Tensor(rng.uniform(0.05, 0.95, (12,)), requires_grad=True)

    def f(_):
        return M.ccc_loss(x, truth)

    worst = finite_diff_check(f, x, eps=1e-6)
    return worst, x.size


def build_tiny_model(num_dapa_layers: int = 2) -> M.DapaModel:
    cfg = M.ModelConfig(d_in=5, d_prompt=3, d_model=8, lstm_layers=1,
                        num_dapa_layers=num_dapa_layers, dropout=0.0,
                        head_hidden=[8], window_len=6, dtype="float64")
    model = M.DapaModel.build(cfg, ["a", "b"], seed=5)
    condition_for_gradcheck(model)
    return model


def _block_end_to_end(rng, coords_per_tensor: int):
    model = build_tiny_model()
    cfg = model.config
    x_t = rng.normal((cfg.window_len, cfg.d_in))
    x_p = rng.normal((cfg.window_len, cfg.d_in))
    truth = rng.uniform(0.05, 0.95, (cfg.window_len,))
    params = list(model.named_parameters().values())
    inputs = [Tensor(x_t, requires_grad=True), Tensor(x_p, requires_grad=True)]

    def f(_):
        model.zero_grad()
        return M.ccc_loss(
            M.forward_batch(model, [inputs[0]], [inputs[1]], ["a"]), truth)

    # End-to-end gradient magnitudes span ~8 orders of magnitude; at
    # eps=1e-5 the f64 roundoff floor (|loss|*2^-52 / eps ~ 1e-11) swamps
    # coordinates whose true gradient is ~1e-8. eps=1e-4 keeps both the
    # roundoff and the O(eps^2) truncation comfortably below tolerance.
    worst, total = _check_many(f, params + inputs, rng, coords_per_tensor, eps=1e-4)
    return worst, total


# -- suite -------------------------------------------------------------------


def run_suite(full: bool = False, seed: int = 2024,
              end_to_end_coords: int = 64) -> list:
    """Run all blocks; ``full`` adds the end-to-end network + loss check."""
    blocks = [
        ("matmul", _block_matmul, DEFAULT_TOL),
        ("softmax_rows", _block_softmax, DEFAULT_TOL),
        ("unary_maps", _block_unary, DEFAULT_TOL),
        ("concat_slice", _block_concat_slice, DEFAULT_TOL),
        ("dropout", _block_dropout, DEFAULT_TOL),
        ("linear", _block_linear, DEFAULT_TOL),
        ("lstm_cell", _block_lstm_cell, DEFAULT_TOL),
        ("bilstm_stack", _block_bilstm, DEFAULT_TOL),
        ("attention_plain", lambda r: _block_attention(r, False, 1), DEFAULT_TOL),
        ("attention_projected", lambda r: _block_attention(r, True, 1), DEFAULT_TOL),
        ("attention_two_heads", lambda r: _block_attention(r, True, 2), DEFAULT_TOL),
        ("prompt_projection", _block_prompt_projection, DEFAULT_TOL),
        ("mlp_head", _block_mlp_head, DEFAULT_TOL),
        ("ccc_loss", _block_ccc_loss, CCC_TOL),
    ]
    if full:
        blocks.append(("end_to_end", lambda r: _block_end_to_end(r, end_to_end_coords),
                       DEFAULT_TOL))

    results = []
    for i, (name, fn, tol) in enumerate(blocks):
        rng = RngStream(seed).spawn(name)
        t0 = time.time()
        err, coords = fn(rng)
        results.append(BlockResult(name, float(err), tol, coords, time.time() - t0))
    return results


def format_results(results) -> str:
    lines = [f"{'block':24s} {'coords':>7s} {'max_rel_err':>12s} {'tol':>8s}  status"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:24s} {r.coords:7d} {r.max_rel_err:12.3e} "
                     f"{r.tolerance:8.0e}  {status}")
    return "\n".join(lines)
