"""Network assembly: prompts, interaction layers, fusion, head, CCC loss."""

import math

import numpy as np
import pytest

from dapa import layers as L
from dapa import model as M
from dapa import tensor as T
from dapa.errors import (ConfigError, DimensionError, DomainLookupError,
                         UsageError)
from dapa.rng import RngStream
from dapa.tensor import Tensor, backward, finite_diff_check


def tiny_config(**kw):
    base = dict(d_in=5, d_prompt=3, d_model=8, lstm_layers=1, num_dapa_layers=1,
                dropout=0.1, attention_projections=True, attention_heads=1,
                head_hidden=[8], window_len=6, dtype="float64")
    base.update(kw)
    return M.ModelConfig(**base)


def window(cfg, seed=0):
    rng = RngStream(seed)
    n = cfg.window_len
    return rng.normal((n, cfg.d_in), dtype=cfg.np_dtype), \
        rng.normal((n, cfg.d_in), dtype=cfg.np_dtype)


# -- prompts ---------------------------------------------------------------


def test_attach_prompt_shapes_and_shared_instance():
    cfg = tiny_config(d_in=3, d_prompt=2, window_len=4)
    model = M.DapaModel.build(cfg, ["a", "b"])
    x_t = np.ones((4, 3))
    x_p = np.zeros((4, 3))
    out_t, out_p = M.attach_prompt(model.prompt_pool, Tensor(x_t), Tensor(x_p), "a")
    assert out_t.shape == (4, 5) and out_p.shape == (4, 5)
    np.testing.assert_array_equal(out_t.data[:, :2], out_p.data[:, :2])
    np.testing.assert_array_equal(out_t.data[:, 2:], x_t)


def test_attach_prompt_zero_prompt_keeps_features():
    cfg = tiny_config(d_in=3, d_prompt=2, window_len=4)
    model = M.DapaModel.build(cfg, ["a"])
    model.prompt_pool.prompts[0].data[:] = 0.0
    x = RngStream(1).normal((4, 3))
    out_t, _ = M.attach_prompt(model.prompt_pool, Tensor(x), Tensor(x), "a")
    np.testing.assert_array_equal(out_t.data[:, 2:], x)
    np.testing.assert_array_equal(out_t.data[:, :2], np.zeros((4, 2)))


def test_attach_prompt_domains_differ_only_in_prompt_columns():
    cfg = tiny_config(d_in=3, d_prompt=2, window_len=4)
    model = M.DapaModel.build(cfg, ["a", "b"])
    x = RngStream(2).normal((4, 3))
    out_a, _ = M.attach_prompt(model.prompt_pool, Tensor(x), Tensor(x), "a")
    out_b, _ = M.attach_prompt(model.prompt_pool, Tensor(x), Tensor(x), "b")
    assert not np.array_equal(out_a.data[:, :2], out_b.data[:, :2])
    np.testing.assert_array_equal(out_a.data[:, 2:], out_b.data[:, 2:])


def test_attach_prompt_errors_and_mean_fallback():
    cfg = tiny_config(d_in=3, d_prompt=2, window_len=4)
    model = M.DapaModel.build(cfg, ["a", "b"])
    x = Tensor(np.zeros((4, 3)))
    with pytest.raises(DomainLookupError) as err:
        M.attach_prompt(model.prompt_pool, x, x, "zz")
    assert "zz" in str(err.value)
    with pytest.raises(DimensionError):
        M.attach_prompt(model.prompt_pool, Tensor(np.zeros((3, 3))),
                        Tensor(np.zeros((3, 3))), "a")
    out, _ = M.attach_prompt(model.prompt_pool, x, x, "zz", policy="mean")
    pool = model.prompt_pool
    expected = (pool.prompts[0].data + pool.prompts[1].data) / 2.0
    np.testing.assert_allclose(out.data[:, :2], expected, rtol=1e-12)


def test_prompt_gradient_accumulates_from_both_streams():
    cfg = tiny_config(d_in=3, d_prompt=2, window_len=4)
    model = M.DapaModel.build(cfg, ["a"])
    x = Tensor(np.zeros((4, 3)))
    out_t, out_p = M.attach_prompt(model.prompt_pool, x, x, "a")
    backward(T.add(T.tsum(out_t), T.tsum(out_p)))
    np.testing.assert_array_equal(model.prompt_pool.prompts[0].grad,
                                  2.0 * np.ones((4, 2)))


# -- interaction layer pieces ------------------------------------------------


def test_encode_context_tied_weights_match():
    cfg = tiny_config()
    model = M.DapaModel.build(cfg, ["a"])
    layer = model.layers[0]
    tied = M.DapaLayerParams(layer.target_encoder, layer.target_encoder,
                             layer.att_anticipatory_tp, layer.att_anticipatory_pt,
                             layer.att_reactive_tp, layer.att_reactive_pt)
    x = Tensor(RngStream(4).normal((6, 8)))
    r_t, a_t, r_p, a_p = M.encode_context(tied, x, x)
    np.testing.assert_array_equal(r_t.data, r_p.data)
    np.testing.assert_array_equal(a_t.data, a_p.data)
    assert r_t.shape == (6, 8) and a_p.shape == (6, 8)


def test_parallel_cross_attention_single_frame_returns_partner_state():
    cfg = tiny_config(window_len=1, attention_projections=False)
    model = M.DapaModel.build(cfg, ["a"])
    layer = model.layers[0]
    states = tuple(Tensor(RngStream(i).normal((1, 8))) for i in range(4))
    att_a_tp, att_a_pt, att_r_tp, att_r_pt = M.parallel_cross_attention(layer, states)
    r_t, a_t, r_p, a_p = states
    np.testing.assert_allclose(att_a_tp.data, a_p.data, rtol=1e-12)
    np.testing.assert_allclose(att_a_pt.data, a_t.data, rtol=1e-12)
    np.testing.assert_allclose(att_r_tp.data, r_p.data, rtol=1e-12)
    np.testing.assert_allclose(att_r_pt.data, r_t.data, rtol=1e-12)


def test_parallel_cross_attention_swap_symmetry_without_projections():
    cfg = tiny_config(attention_projections=False)
    model = M.DapaModel.build(cfg, ["a"])
    layer = model.layers[0]
    rng = RngStream(9)
    r_t, a_t, r_p, a_p = (Tensor(rng.normal((6, 8))) for _ in range(4))
    normal = M.parallel_cross_attention(layer, (r_t, a_t, r_p, a_p))
    swapped = M.parallel_cross_attention(layer, (r_p, a_p, r_t, a_t))
    np.testing.assert_array_equal(normal[0].data, swapped[1].data)  # a: tp <-> pt
    np.testing.assert_array_equal(normal[1].data, swapped[0].data)
    np.testing.assert_array_equal(normal[2].data, swapped[3].data)  # r: tp <-> pt
    np.testing.assert_array_equal(normal[3].data, swapped[2].data)


def test_parallel_cross_attention_two_frame_hand_case():
    cfg = tiny_config(window_len=2, d_model=2, attention_projections=False)
    model = M.DapaModel.build(cfg, ["a"])
    rng = RngStream(3)
    arrays = [rng.normal((2, 2)) for _ in range(4)]
    states = tuple(Tensor(a) for a in arrays)
    outs = M.parallel_cross_attention(model.layers[0], states)
    r_t, a_t, r_p, a_p = arrays

    def direct(q, kv):
        scores = q @ kv.T / math.sqrt(2.0)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        return (e / e.sum(axis=1, keepdims=True)) @ kv

    np.testing.assert_allclose(outs[0].data, direct(a_t, a_p), atol=1e-12)
    np.testing.assert_allclose(outs[1].data, direct(a_p, a_t), atol=1e-12)
    np.testing.assert_allclose(outs[2].data, direct(r_t, r_p), atol=1e-12)
    np.testing.assert_allclose(outs[3].data, direct(r_p, r_t), atol=1e-12)


def test_pathway_purity():
    # reactive alignments ignore anticipatory states entirely, and vice versa
    cfg = tiny_config()
    model = M.DapaModel.build(cfg, ["a"])
    layer = model.layers[0]
    rng = RngStream(13)
    r_t, a_t, r_p, a_p = (Tensor(rng.normal((6, 8))) for _ in range(4))
    zero = Tensor(np.zeros((6, 8)))
    base = M.parallel_cross_attention(layer, (r_t, a_t, r_p, a_p))
    no_anticipatory = M.parallel_cross_attention(layer, (r_t, zero, r_p, zero))
    np.testing.assert_array_equal(base[2].data, no_anticipatory[2].data)
    np.testing.assert_array_equal(base[3].data, no_anticipatory[3].data)
    no_reactive = M.parallel_cross_attention(layer, (zero, a_t, zero, a_p))
    np.testing.assert_array_equal(base[0].data, no_reactive[0].data)
    np.testing.assert_array_equal(base[1].data, no_reactive[1].data)


def test_fuse_alignments_layout_and_round_trip():
    rng = RngStream(15)
    a_r = rng.normal((6, 8), dtype=np.float32)
    a_a = rng.normal((6, 8), dtype=np.float32)
    fused = M.fuse_alignments(Tensor(a_r), Tensor(a_a))
    assert fused.shape == (6, 16)
    np.testing.assert_array_equal(fused.data[:, :8], a_r)
    np.testing.assert_array_equal(fused.data[:, 8:], a_a)
    np.testing.assert_array_equal(T.slice_axis(fused, 1, 0, 8).data, a_r)
    np.testing.assert_array_equal(T.slice_axis(fused, 1, 8, 16).data, a_a)
    with pytest.raises(DimensionError):
        M.fuse_alignments(Tensor(np.zeros((5, 8))), Tensor(np.zeros((6, 8))))


# -- whole network -----------------------------------------------------------


def test_forward_shape_range_and_eval_determinism():
    cfg = tiny_config()
    model = M.DapaModel.build(cfg, ["a", "b"])
    x_t, x_p = window(cfg, seed=21)
    out1 = M.forward(model, x_t, x_p, "a")
    out2 = M.forward(model, x_t, x_p, "a")
    assert out1.shape == (6, 1)
    assert np.all(out1.data > 0) and np.all(out1.data < 1)
    np.testing.assert_array_equal(out1.data, out2.data)


def test_forward_batch_matches_per_sample():
    cfg = tiny_config()
    model = M.DapaModel.build(cfg, ["a", "b"])
    xs_t, xs_p, doms = [], [], []
    for i, dom in enumerate(["a", "b", "a"]):
        x_t, x_p = window(cfg, seed=30 + i)
        xs_t.append(x_t)
        xs_p.append(x_p)
        doms.append(dom)
    batched = M.forward_batch(model, xs_t, xs_p, doms).data
    for i in range(3):
        single = M.forward(model, xs_t[i], xs_p[i], doms[i]).data
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_prompt_isolation():
    cfg = tiny_config()
    model = M.DapaModel.build(cfg, ["a", "b"])
    x_t, x_p = window(cfg, seed=40)
    # identical prompt contents -> identical outputs
    model.prompt_pool.prompts[1].data[:] = model.prompt_pool.prompts[0].data
    np.testing.assert_array_equal(M.forward(model, x_t, x_p, "a").data,
                                  M.forward(model, x_t, x_p, "b").data)
    # separated prompts -> outputs diverge
    model.prompt_pool.prompts[1].data += 0.5
    assert not np.array_equal(M.forward(model, x_t, x_p, "a").data,
                              M.forward(model, x_t, x_p, "b").data)


def test_single_frame_window_is_feedforward():
    cfg = tiny_config(window_len=1)
    model = M.DapaModel.build(cfg, ["a"])
    x_t, x_p = window(cfg, seed=50)
    out = M.forward(model, x_t, x_p, "a")
    assert out.shape == (1, 1)
    np.testing.assert_array_equal(out.data, M.forward(model, x_t, x_p, "a").data)


def test_layer_stacking_dimension_contract():
    for l_count in (1, 2, 3):
        for d_model in (4, 8):
            cfg = tiny_config(d_model=d_model, num_dapa_layers=l_count,
                              head_hidden=[d_model])
            model = M.DapaModel.build(cfg, ["a"])
            x_t, x_p = window(cfg, seed=60)
            assert M.forward(model, x_t, x_p, "a").shape == (cfg.window_len, 1)


def test_parameter_count_matches_closed_form():
    cases = [
        (tiny_config(), ["a", "b"]),
        (tiny_config(num_dapa_layers=2, lstm_layers=2), ["a"]),
        (tiny_config(d_prompt=0), []),
        (tiny_config(attention_projections=False, head_hidden=[8, 4]), ["a"]),
        (tiny_config(prompt_mode="time", d_prompt=5, d_in=5), ["a", "b", "c"]),
    ]
    for cfg, domains in cases:
        model = M.DapaModel.build(cfg, domains)
        assert model.parameter_count() == M.expected_parameter_count(cfg, len(domains))


def test_time_prepend_prompt_mode():
    cfg = tiny_config(prompt_mode="time", d_prompt=5, d_in=5)
    model = M.DapaModel.build(cfg, ["a"])
    x_t, x_p = window(cfg, seed=70)
    out = M.forward(model, x_t, x_p, "a")
    assert out.shape == (cfg.window_len, 1)
    with pytest.raises(ConfigError):
        tiny_config(prompt_mode="time", d_prompt=3, d_in=5)


def test_training_mode_uses_dropout_and_rng_repeats():
    cfg = tiny_config(dropout=0.4)
    model = M.DapaModel.build(cfg, ["a"])
    x_t, x_p = window(cfg, seed=80)
    o1 = M.forward(model, x_t, x_p, "a", rng=RngStream(7), training=True)
    o2 = M.forward(model, x_t, x_p, "a", rng=RngStream(7), training=True)
    o3 = M.forward(model, x_t, x_p, "a", rng=RngStream(8), training=True)
    np.testing.assert_array_equal(o1.data, o2.data)
    assert not np.array_equal(o1.data, o3.data)


def test_end_to_end_gradient_against_finite_differences():
    # Default init is nearly flat (tiny prompts/weights push true gradients
    # below central-difference resolution), so check at a conditioned point.
    from dapa.gradcheck import condition_for_gradcheck

    cfg = tiny_config(dropout=0.0)
    model = M.DapaModel.build(cfg, ["a"])
    condition_for_gradcheck(model)
    x_t, x_p = window(cfg, seed=90)
    truth = RngStream(91).uniform(0.05, 0.95, (cfg.window_len,))

    params = model.named_parameters()
    checker = RngStream(92)
    worst = 0.0
    for name, tensor in params.items():
        def f(_t):
            model.zero_grad()
            return M.ccc_loss(M.forward(model, x_t, x_p, "a"), truth)

        err = finite_diff_check(f, tensor, eps=1e-5, max_coords=6, rng=checker)
        worst = max(worst, err)
    assert worst < 1e-4, worst


# -- loss ---------------------------------------------------------------------


def test_ccc_loss_perfect_and_inverted():
    truth = np.array([0.1, 0.4, 0.9, 0.5, 0.3])
    loss = M.ccc_loss(Tensor(truth.copy(), requires_grad=True), truth)
    assert abs(loss.item()) <= 1e-12
    # mirrored predictions score CCC -1 when truth is centred on 0.5
    centred = np.array([0.1, 0.4, 0.9, 0.6, 0.5])
    assert centred.mean() == 0.5
    flipped = M.ccc_loss(Tensor(1.0 - centred, requires_grad=True), centred)
    assert abs(flipped.item() - 2.0) <= 1e-12


def test_ccc_loss_rejects_degenerate_inputs():
    with pytest.raises(UsageError):
        M.ccc_loss(Tensor(np.array([0.5])), np.array([0.5]))
    with pytest.raises(UsageError):
        M.ccc_loss(Tensor(np.array([0.5, 0.6])), np.array([0.5, 1.4]))


def test_ccc_loss_gradient_tight():
    rng = RngStream(101)
    truth = rng.uniform(0.0, 1.0, (12,))
    x = Tensor(rng.uniform(0.05, 0.95, (12,)), requires_grad=True)
    err = finite_diff_check(lambda t: M.ccc_loss(t, truth), x, eps=1e-6)
    assert err < 1e-6, err
