"""Optimization: Adam, warmup + cosine schedule, EMA, epoch loop, checkpoints.

Determinism contract: everything that varies run-to-run flows from
TrainConfig.seed through counter-based RngStreams (parameter init, epoch
shuffles, dropout masks, validation split), so identical seed + corpus +
config reproduce identical histories, and a checkpoint resume continues the
interrupted run bit-for-bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import metrics as ME
from . import model as M
from . import tensor as T
from .errors import ConfigError, DataError, NumericError, UsageError
from .rng import RngStream, derive_seed

log = logging.getLogger("dapa.train")

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    seed: int = 40
    lr_peak: float = 5e-5
    warmup_steps: int = 400
    cosine_t_max: int = 10
    epochs: int = 40
    batch_train: int = 32
    batch_eval: int = 256
    ema_decay: float = 0.999
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_on_core_only: bool = True
    val_fraction: float = 0.0
    val_sessions: list = field(default_factory=list)
    # optional early stop on train-corpus CCC (EMA weights, eval mode)
    target_train_ccc: Optional[float] = None
    train_ccc_every: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        for name in ("lr_peak", "epochs", "batch_train", "batch_eval",
                     "cosine_t_max", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")


def lr_at(cfg: TrainConfig, global_step: int, epoch: int) -> float:
    """Linear warmup to lr_peak, then per-epoch cosine annealing to zero.

    Held at the floor (0) once epoch exceeds cosine_t_max. Continuous at the
    boundary: step == warmup_steps at epoch 0 gives exactly lr_peak.
    """
    if global_step < 0:
        raise UsageError("step must be >= 0")
    if global_step < cfg.warmup_steps:
        return cfg.lr_peak * global_step / cfg.warmup_steps
    e = min(epoch, cfg.cosine_t_max)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * e / cfg.cosine_t_max))


# -- optimizer state ------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def init(params: dict) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(state: AdamState, params: dict, lr: float, cfg: TrainConfig):
    """Standard Adam with bias correction; updates parameters in place.

    Missing gradients count as zeros. Non-finite gradients abort, naming the
    parameter.
    """
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / corr1) / (np.sqrt(v / corr2) + eps)
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


@dataclass
class EmaState:
    shadow: dict
    decay: float

    @staticmethod
    def init(params: dict, decay: float) -> "EmaState":
        return EmaState({k: t.data.copy() for k, t in params.items()}, decay)


def ema_update(ema: EmaState, params: dict):
    """shadow <- decay * shadow + (1 - decay) * params, per step."""
    d = ema.decay
    for name, p in params.items():
        s = ema.shadow[name]
        if s.shape != p.data.shape:
            raise UsageError(f"EMA shape mismatch for {name}")
        s *= d
        s += (1.0 - d) * p.data


class ema_weights:
    """Context manager that swaps EMA shadows in during evaluation."""

    def __init__(self, ema: EmaState, params: dict):
        self.ema = ema
        self.params = params
        self._live = None

    def __enter__(self):
        self._live = {k: t.data for k, t in self.params.items()}
        for k, t in self.params.items():
            t.data = self.ema.shadow[k]
        return self

    def __exit__(self, *exc):
        for k, t in self.params.items():
            t.data = self._live[k]
        self._live = None
        return False


# -- checkpoints ------------------------------------------------------------------


@dataclass
class CheckpointBundle:
    model: M.DapaModel
    adam: AdamState
    ema: EmaState
    rng: RngStream
    train_config: TrainConfig
    epoch_done: int
    global_step: int
    history: list
    best_val_ccc: Optional[float]
    domains: list


def _tensor_files(params: dict, adam: AdamState, ema: EmaState):
    """Stable (role, name, array) listing for serialization."""
    for name, t in params.items():
        yield "param", name, t.data
    for name in params:
        yield "adam_m", name, adam.m[name]
    for name in params:
        yield "adam_v", name, adam.v[name]
    for name in params:
        yield "ema", name, ema.shadow[name]


def save_checkpoint(out_dir, model: M.DapaModel, adam: AdamState, ema: EmaState,
                    rng: RngStream, train_config: TrainConfig, epoch_done: int,
                    global_step: int, history: list,
                    best_val_ccc: Optional[float] = None) -> Path:
    """Write the full training state; returns the checkpoint directory."""
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    params = model.named_parameters()
    index = []
    for i, (role, name, arr) in enumerate(_tensor_files(params, adam, ema)):
        fname = f"t{i:04d}.dapf"
        mat = arr.reshape(1, -1) if arr.ndim != 2 else arr
        D.write_matrix(tensor_dir / fname, mat)
        index.append({"role": role, "name": name, "file": fname,
                      "shape": list(arr.shape), "dtype": str(arr.dtype)})
    domains = (sorted(model.prompt_pool.domain_index,
                      key=model.prompt_pool.domain_index.get)
               if model.prompt_pool else [])
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "train_config": asdict(train_config),
        "domains": domains,
        "epoch_done": epoch_done,
        "global_step": global_step,
        "adam_step": adam.step,
        "ema_decay": ema.decay,
        "rng": rng.state(),
        "best_val_ccc": best_val_ccc,
        "history": [list(row) for row in history],
        "tensors": index,
    }
    (out_dir / "checkpoint.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir


def load_checkpoint(ckpt_dir) -> CheckpointBundle:
    """Rebuild the full training state; validates names, shapes, dtypes.

    All tensors are read and validated before anything is assembled, so a
    corrupt file cannot leave behind partial state.
    """
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "checkpoint.json"
    if not meta_path.exists():
        raise DataError(f"checkpoint manifest missing: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('format_version')!r}")

    loaded = {}
    for entry in meta["tensors"]:
        arr = D.read_matrix(ckpt_dir / "tensors" / entry["file"])
        arr = arr.reshape(entry["shape"])
        if str(arr.dtype) != entry["dtype"]:
            raise DataError(f"checkpoint tensor {entry['name']}: dtype "
                            f"{arr.dtype} != {entry['dtype']}")
        loaded[(entry["role"], entry["name"])] = arr

    cfg = M.ModelConfig(**meta["model_config"])
    tcfg = TrainConfig(**meta["train_config"])
    model = M.DapaModel.build(cfg, meta["domains"], seed=tcfg.seed)
    params = model.named_parameters()
    expected = set(params)
    for role in ("param", "adam_m", "adam_v", "ema"):
        have = {name for (r, name) in loaded if r == role}
        if have != expected:
            missing = sorted(expected - have) + sorted(have - expected)
            raise DataError(f"checkpoint {role} tensors disagree with config: {missing[:4]}")

    adam = AdamState.init(params)
    ema = EmaState.init(params, meta["ema_decay"])
    for name, t in params.items():
        for role, target in (("param", None), ("adam_m", adam.m),
                             ("adam_v", adam.v), ("ema", ema.shadow)):
            arr = loaded[(role, name)]
            if tuple(arr.shape) != tuple(t.data.shape):
                raise DataError(f"checkpoint tensor {name} ({role}): shape "
                                f"{arr.shape} != {t.data.shape}")
            if role == "param":
                t.data = arr.copy()
            else:
                target[name] = arr.copy()
    adam.step = meta["adam_step"]
    history = [HistoryRow(*row) for row in meta["history"]]
    return CheckpointBundle(
        model=model, adam=adam, ema=ema,
        rng=RngStream.from_state(meta["rng"]), train_config=tcfg,
        epoch_done=meta["epoch_done"], global_step=meta["global_step"],
        history=history, best_val_ccc=meta.get("best_val_ccc"),
        domains=meta["domains"],
    )


# -- history ---------------------------------------------------------------------


class HistoryRow(tuple):
    """(epoch, step, lr, train_loss, val_ccc); val_ccc is NaN without a split."""

    def __new__(cls, epoch, step, lr, train_loss, val_ccc):
        return super().__new__(cls, (int(epoch), int(step), float(lr),
                                     float(train_loss), float(val_ccc)))

    epoch = property(lambda self: self[0])
    step = property(lambda self: self[1])
    lr = property(lambda self: self[2])
    train_loss = property(lambda self: self[3])
    val_ccc = property(lambda self: self[4])


def history_csv(history: Sequence[HistoryRow]) -> str:
    lines = ["epoch,step,lr,train_loss,val_ccc"]
    for row in history:
        lines.append(f"{row.epoch},{row.step},{row.lr!r},{row.train_loss!r},{row.val_ccc!r}")
    return "\n".join(lines) + "\n"


# -- training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    history: list
    model: M.DapaModel
    ema: EmaState
    best_val_ccc: Optional[float]
    best_epoch: Optional[int]
    checkpoint_dir: Optional[Path]
    best_checkpoint_dir: Optional[Path]
    stopped_early: bool = False


def split_validation(corpus: D.Corpus, cfg: TrainConfig):
    """Session-level split (whole sessions held out, never windows)."""
    if cfg.val_sessions:
        val_ids = set(cfg.val_sessions)
        unknown = val_ids - {r.session_id for r in corpus.records}
        if unknown:
            raise DataError(f"val sessions not in corpus: {sorted(unknown)}")
    elif cfg.val_fraction > 0.0:
        val_ids = set()
        picker = RngStream(derive_seed(cfg.seed, "val_split"))
        for domain, records in sorted(corpus.by_domain().items()):
            ids = sorted(r.session_id for r in records)
            k = int(round(cfg.val_fraction * len(ids)))
            order = picker.permutation(len(ids))
            val_ids.update(ids[i] for i in order[:k])
    else:
        val_ids = set()
    train = [r for r in corpus.records if r.session_id not in val_ids]
    val = [r for r in corpus.records if r.session_id in val_ids]
    if not train:
        raise DataError("validation split consumed every session")
    return train, val


def _core_indices(batch, window_len: int, core_only: bool) -> np.ndarray:
    """Flat row indices of scored frames in the (B*N, 1) prediction layout."""
    rows = []
    for i, w in enumerate(batch):
        base = i * window_len
        if core_only:
            rows.extend(base + np.nonzero(w.core_mask)[0])
        else:
            rows.extend(range(base, base + window_len))
    return np.asarray(rows, dtype=np.intp)


def _pooled_truth(batch, core_only: bool) -> np.ndarray:
    if core_only:
        return np.concatenate([w.y[w.core_mask] for w in batch])
    return np.concatenate([w.y for w in batch])


def _pooled_ccc_over_sessions(model, windows_by_session, truths) -> float:
    preds, obs = [], []
    for sid, windows in sorted(windows_by_session.items()):
        stitched = D.stitch_predictions(
            windows, ME.predict_windows(model, windows),
            frame_counts={sid: len(truths[sid])})
        preds.append(stitched[sid])
        obs.append(truths[sid])
    return ME.ccc(np.concatenate(preds), np.concatenate(obs))


def run_training(model: Optional[M.DapaModel], corpus: D.Corpus,
                 cfg: Optional[TrainConfig], out_dir=None,
                 resume_from=None) -> TrainResult:
    """Train on a corpus; optionally resume from a checkpoint directory.

    Per epoch: seeded shuffle, minibatches, forward, CCC loss pooled over the
    batch's core frames, backward, Adam with the warmup/cosine rate, EMA
    update; then EMA-weights validation on held-out sessions. The best-val
    checkpoint is retained alongside the final one.
    """
    out_dir = Path(out_dir) if out_dir is not None else None

    if resume_from is not None:
        bundle = load_checkpoint(resume_from)
        model = bundle.model
        if cfg is None:
            cfg = bundle.train_config
        else:
            # only the run-length knobs may change on resume
            frozen = ("seed", "lr_peak", "warmup_steps", "cosine_t_max",
                      "batch_train", "batch_eval", "ema_decay", "adam_beta1",
                      "adam_beta2", "adam_eps", "loss_on_core_only",
                      "val_fraction", "val_sessions")
            for name in frozen:
                if getattr(cfg, name) != getattr(bundle.train_config, name):
                    raise ConfigError(
                        f"resume config changes {name!r} "
                        f"({getattr(bundle.train_config, name)} -> {getattr(cfg, name)})"
                    )
        adam, ema, drop_rng = bundle.adam, bundle.ema, bundle.rng
        start_epoch = bundle.epoch_done
        global_step = bundle.global_step
        history = list(bundle.history)
        best_val = bundle.best_val_ccc
    else:
        if model is None:
            raise UsageError("run_training needs a model or resume_from")
        params = model.named_parameters()
        adam = AdamState.init(params)
        ema = EmaState.init(params, cfg.ema_decay)
        drop_rng = RngStream(derive_seed(cfg.seed, "dropout"))
        start_epoch = 0
        global_step = 0
        history = []
        best_val = None

    if not corpus.records:
        raise DataError("empty corpus")
    if model.prompt_pool is not None:
        missing = set(corpus.domain_index) - set(model.prompt_pool.domain_index)
        if missing:
            raise DataError(f"model has no prompt for domains {sorted(missing)}")

    params = model.named_parameters()
    train_records, val_records = split_validation(corpus, cfg)

    train_windows = []
    train_by_session = {}
    train_truths = {}
    for rec in train_records:
        windows = D.segment_windows(rec)
        train_windows.extend(windows)
        train_by_session[rec.session_id] = windows
        train_truths[rec.session_id] = D.read_labels(rec.target_labels)
    val_by_session = {}
    val_truths = {}
    for rec in val_records:
        val_by_session[rec.session_id] = D.segment_windows(rec)
        val_truths[rec.session_id] = D.read_labels(rec.target_labels)

    n = len(train_windows)
    best_epoch = None
    best_dir = out_dir / "best" if out_dir else None
    last_dir = out_dir / "last" if out_dir else None
    stopped_early = False

    for epoch in range(start_epoch, cfg.epochs):
        order = RngStream(derive_seed(cfg.seed, "shuffle", epoch)).permutation(n)
        epoch_losses = []
        lr = lr_at(cfg, global_step, epoch)
        for lo in range(0, n, cfg.batch_train):
            batch = [train_windows[i] for i in order[lo:lo + cfg.batch_train]]
            if not batch:
                log.warning("empty batch at epoch %d, skipping", epoch)
                continue
            lr = lr_at(cfg, global_step, epoch)
            preds = M.forward_batch(model, [w.x_t for w in batch],
                                    [w.x_p for w in batch],
                                    [w.domain for w in batch],
                                    rng=drop_rng, training=True)
            flat = T.reshape(preds, (preds.shape[0] * preds.shape[1], 1))
            idx = _core_indices(batch, model.config.window_len, cfg.loss_on_core_only)
            scored = T.take_rows(flat, idx)
            loss = M.ccc_loss(scored, _pooled_truth(batch, cfg.loss_on_core_only))
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {global_step}")
            model.zero_grad()
            T.backward(loss)
            adam_step(adam, params, lr, cfg)
            ema_update(ema, params)
            epoch_losses.append(loss_value)
            global_step += 1

        train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        if val_by_session:
            with ema_weights(ema, params):
                val_ccc = _pooled_ccc_over_sessions(model, val_by_session, val_truths)
        else:
            val_ccc = float("nan")
        history.append(HistoryRow(epoch, global_step, lr, train_loss, val_ccc))
        log.info("epoch %d step %d lr %.3g train_loss %.4f val_ccc %s",
                 epoch, global_step, lr, train_loss, val_ccc)

        if val_by_session and (best_val is None or val_ccc > best_val):
            best_val = val_ccc
            best_epoch = epoch
            if best_dir:
                save_checkpoint(best_dir, model, adam, ema, drop_rng, cfg,
                                epoch + 1, global_step, history, best_val)

        if (cfg.target_train_ccc is not None and cfg.train_ccc_every > 0
                and (epoch + 1) % cfg.train_ccc_every == 0):
            with ema_weights(ema, params):
                train_ccc = _pooled_ccc_over_sessions(model, train_by_session,
                                                      train_truths)
            log.info("epoch %d train_ccc %.4f (target %.3f)", epoch, train_ccc,
                     cfg.target_train_ccc)
            if train_ccc >= cfg.target_train_ccc:
                stopped_early = True

        if out_dir:
            save_checkpoint(last_dir, model, adam, ema, drop_rng, cfg,
                            epoch + 1, global_step, history, best_val)
            (out_dir / "history.csv").write_text(history_csv(history),
                                                 encoding="utf-8")
        if stopped_early:
            break

    if out_dir:
        save_checkpoint(last_dir, model, adam, ema, drop_rng, cfg,
                        history[-1].epoch + 1 if history else 0,
                        global_step, history, best_val)
        (out_dir / "history.csv").write_text(history_csv(history), encoding="utf-8")

    return TrainResult(history=history, model=model, ema=ema,
                       best_val_ccc=best_val, best_epoch=best_epoch,
                       checkpoint_dir=last_dir, best_checkpoint_dir=best_dir,
                       stopped_early=stopped_early)
