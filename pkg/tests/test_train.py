"""Schedule values, Adam/EMA arithmetic, loop determinism, checkpoints."""

import math

import numpy as np
import pytest

from dapa import data as D
from dapa import model as M
from dapa import train as TR
from dapa.errors import ConfigError, DataError, NumericError
from dapa.rng import RngStream
from dapa.tensor import Tensor


def default_cfg(**kw):
    base = dict(seed=40, lr_peak=5e-5, warmup_steps=400, cosine_t_max=10,
                epochs=40, batch_train=32, batch_eval=256)
    base.update(kw)
    return TR.TrainConfig(**base)


# -- schedule -------------------------------------------------------------------


def test_lr_warmup_and_cosine_unit_values():
    cfg = default_cfg()
    assert TR.lr_at(cfg, 200, 0) == 2.5e-5
    assert TR.lr_at(cfg, 400, 0) == 5e-5
    assert abs(TR.lr_at(cfg, 1000, 5) - 2.5e-5) <= 1e-20
    assert TR.lr_at(cfg, 0, 0) == 0.0
    assert TR.lr_at(cfg, 399, 0) == 5e-5 * 399 / 400


def test_lr_floor_held_after_t_max():
    cfg = default_cfg()
    assert abs(TR.lr_at(cfg, 5000, 10)) <= 1e-20
    assert TR.lr_at(cfg, 5000, 15) == TR.lr_at(cfg, 5000, 10)


def test_lr_continuous_at_warmup_boundary():
    cfg = default_cfg()
    assert TR.lr_at(cfg, cfg.warmup_steps, 0) == cfg.lr_peak
    assert abs(TR.lr_at(cfg, cfg.warmup_steps - 1, 0) - cfg.lr_peak) < cfg.lr_peak / 100


# -- Adam -----------------------------------------------------------------------


def make_params(values):
    return {name: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
            for name, v in values.items()}


def test_adam_zero_gradient_keeps_params():
    params = make_params({"w": [1.0, -2.0]})
    state = TR.AdamState.init(params)
    params["w"].grad = np.zeros(2)
    TR.adam_step(state, params, lr=0.1, cfg=default_cfg())
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    params = make_params({"w": [0.0]})
    state = TR.AdamState.init(params)
    params["w"].grad = np.array([1.0])
    TR.adam_step(state, params, lr=0.1, cfg=default_cfg())
    expected = -0.1 * 1.0 / (1.0 + 1e-8)
    assert abs(params["w"].data[0] - expected) <= 1e-9


def test_adam_trajectories_bit_identical():
    def run():
        params = make_params({"w": [0.3, -0.7], "b": [0.1]})
        state = TR.AdamState.init(params)
        rng = RngStream(7)
        for _ in range(25):
            for p in params.values():
                p.grad = rng.normal(p.data.shape)
            TR.adam_step(state, params, lr=1e-2, cfg=default_cfg())
        return {k: p.data.copy() for k, p in params.items()}

    one, two = run(), run()
    for k in one:
        np.testing.assert_array_equal(one[k], two[k])


def test_adam_aborts_on_nonfinite_gradient():
    params = make_params({"w": [0.0]})
    state = TR.AdamState.init(params)
    params["w"].grad = np.array([np.nan])
    with pytest.raises(NumericError) as err:
        TR.adam_step(state, params, lr=0.1, cfg=default_cfg())
    assert "w" in str(err.value)


# -- EMA ------------------------------------------------------------------------


def test_ema_decay_zero_tracks_params():
    params = make_params({"w": [0.5, 1.5]})
    ema = TR.EmaState.init(params, decay=0.0)
    params["w"].data += 1.0
    TR.ema_update(ema, params)
    np.testing.assert_array_equal(ema.shadow["w"], params["w"].data)


def test_ema_single_step_arithmetic():
    params = make_params({"w": [1.0]})
    ema = TR.EmaState.init(params, decay=0.5)
    ema.shadow["w"][:] = 0.0
    TR.ema_update(ema, params)
    np.testing.assert_array_equal(ema.shadow["w"], [0.5])


def test_ema_converges_to_constant_params():
    # geometric decay: a gap g closes to g * e^-10 after 10/(1-decay) steps
    params = make_params({"w": [2.0]})
    decay = 0.9
    ema = TR.EmaState.init(params, decay=decay)
    ema.shadow["w"][:] = 2.0 - 0.01
    for _ in range(int(10 / (1 - decay))):
        TR.ema_update(ema, params)
    assert abs(ema.shadow["w"][0] - 2.0) < 1e-6


def test_ema_swap_restores_live_values():
    params = make_params({"w": [1.0, 2.0]})
    ema = TR.EmaState.init(params, decay=0.5)
    ema.shadow["w"][:] = [9.0, 9.0]
    live_before = params["w"].data.copy()
    with TR.ema_weights(ema, params):
        np.testing.assert_array_equal(params["w"].data, [9.0, 9.0])
    np.testing.assert_array_equal(params["w"].data, live_before)


# -- training loop ----------------------------------------------------------------


def tiny_corpus(tmp_path, sessions=2, frames=120, seed=11):
    spec = D.SyntheticSpec(num_domains=1, sessions_per_domain=sessions,
                           frames_per_session=frames, feature_dim=5,
                           coupling=0.8, noise_sigma=0.1, seed=seed)
    manifest = D.generate_synthetic_corpus(spec, tmp_path / "corpus")
    return D.load_manifest(manifest)


def tiny_model(corpus, seed=40, **kw):
    cfg_kw = dict(d_in=corpus.feature_dim, d_prompt=3, d_model=6, lstm_layers=1,
                  num_dapa_layers=1, dropout=0.1, head_hidden=[6], dtype="float32")
    cfg_kw.update(kw)
    return M.DapaModel.build(M.ModelConfig(**cfg_kw), corpus.domains, seed=seed)


def fast_cfg(**kw):
    base = dict(seed=40, lr_peak=1e-3, warmup_steps=4, cosine_t_max=50,
                epochs=2, batch_train=8, batch_eval=64)
    base.update(kw)
    return TR.TrainConfig(**base)


def test_training_single_epoch_history_and_checkpoint(tmp_path):
    corpus = tiny_corpus(tmp_path)
    model = tiny_model(corpus)
    result = TR.run_training(model, corpus, fast_cfg(epochs=1), out_dir=tmp_path / "run")
    assert len(result.history) == 1
    assert (tmp_path / "run" / "history.csv").exists()
    bundle = TR.load_checkpoint(tmp_path / "run" / "last")
    assert bundle.epoch_done == 1
    for name, t in bundle.model.named_parameters().items():
        np.testing.assert_array_equal(t.data, model.named_parameters()[name].data)


def test_zero_lr_training_keeps_parameters(tmp_path):
    corpus = tiny_corpus(tmp_path)
    model = tiny_model(corpus)
    before = {k: t.data.copy() for k, t in model.named_parameters().items()}
    # warmup long enough that every step uses lr == 0
    TR.run_training(model, corpus, fast_cfg(epochs=1, lr_peak=1e-3,
                                            warmup_steps=10_000_000))
    for k, t in model.named_parameters().items():
        arr = before[k]
        step0 = 0.0 * arr  # exactly zero update expected
        np.testing.assert_array_equal(t.data, arr + step0)


def test_training_determinism_same_seed(tmp_path):
    corpus = tiny_corpus(tmp_path)
    r1 = TR.run_training(tiny_model(corpus), corpus, fast_cfg(epochs=3),
                         out_dir=tmp_path / "a")
    r2 = TR.run_training(tiny_model(corpus), corpus, fast_cfg(epochs=3),
                         out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "history.csv").read_text() == \
        (tmp_path / "b" / "history.csv").read_text()
    for k, t in r1.model.named_parameters().items():
        np.testing.assert_array_equal(t.data, r2.model.named_parameters()[k].data)
        np.testing.assert_array_equal(r1.ema.shadow[k], r2.ema.shadow[k])


def test_resume_matches_uninterrupted_run(tmp_path):
    corpus = tiny_corpus(tmp_path)
    full = TR.run_training(tiny_model(corpus), corpus, fast_cfg(epochs=5),
                           out_dir=tmp_path / "full")
    TR.run_training(tiny_model(corpus), corpus, fast_cfg(epochs=3),
                    out_dir=tmp_path / "part")
    resumed = TR.run_training(None, corpus, fast_cfg(epochs=5),
                              out_dir=tmp_path / "part",
                              resume_from=tmp_path / "part" / "last")
    assert (tmp_path / "full" / "history.csv").read_text() == \
        (tmp_path / "part" / "history.csv").read_text()
    for k, t in full.model.named_parameters().items():
        np.testing.assert_array_equal(t.data, resumed.model.named_parameters()[k].data)


def test_resume_rejects_changed_optimizer_settings(tmp_path):
    corpus = tiny_corpus(tmp_path)
    TR.run_training(tiny_model(corpus), corpus, fast_cfg(epochs=1),
                    out_dir=tmp_path / "run")
    with pytest.raises(ConfigError):
        TR.run_training(None, corpus, fast_cfg(epochs=2, lr_peak=9e-9),
                        resume_from=tmp_path / "run" / "last")


def test_checkpoint_round_trip_bit_exact(tmp_path):
    corpus = tiny_corpus(tmp_path)
    model = tiny_model(corpus)
    result = TR.run_training(model, corpus, fast_cfg(epochs=1), out_dir=tmp_path / "run")
    bundle = TR.load_checkpoint(tmp_path / "run" / "last")
    params = model.named_parameters()
    for name, t in bundle.model.named_parameters().items():
        np.testing.assert_array_equal(t.data, params[name].data)
        np.testing.assert_array_equal(bundle.ema.shadow[name], result.ema.shadow[name])
    assert bundle.rng.state()["counter"] > 0


def test_checkpoint_corruption_rejected(tmp_path):
    corpus = tiny_corpus(tmp_path)
    TR.run_training(tiny_model(corpus), corpus, fast_cfg(epochs=1),
                    out_dir=tmp_path / "run")
    ckpt = tmp_path / "run" / "last"
    victim = sorted((ckpt / "tensors").iterdir())[0]
    victim.write_bytes(victim.read_bytes()[:-2])
    with pytest.raises(DataError):
        TR.load_checkpoint(ckpt)


def test_validation_split_and_best_checkpoint(tmp_path):
    corpus = tiny_corpus(tmp_path, sessions=4)
    model = tiny_model(corpus)
    val_id = corpus.records[-1].session_id
    cfg = fast_cfg(epochs=2, val_sessions=[val_id])
    result = TR.run_training(model, corpus, cfg, out_dir=tmp_path / "run")
    assert result.best_val_ccc is not None
    assert math.isfinite(result.history[-1].val_ccc)
    assert (tmp_path / "run" / "best" / "checkpoint.json").exists()
    # held-out session contributed no training windows
    train_recs, val_recs = TR.split_validation(corpus, cfg)
    assert [r.session_id for r in val_recs] == [val_id]


def test_seeded_val_fraction_split_is_deterministic(tmp_path):
    corpus = tiny_corpus(tmp_path, sessions=4)
    cfg = fast_cfg(val_fraction=0.5)
    t1, v1 = TR.split_validation(corpus, cfg)
    t2, v2 = TR.split_validation(corpus, cfg)
    assert [r.session_id for r in v1] == [r.session_id for r in v2]
    assert len(v1) == 2
