"""Command-line entry points: synth, train, eval, export, gradcheck.

Config precedence is flags > config file > defaults; the defaults reproduce
the reference training recipe (seed 40, Adam at 5e-5 peak with 400 warmup
steps and cosine annealing T_max=10, batches 32/256, 40 epochs, dropout 0.1,
EMA). Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as ME
from . import model as M
from . import train as TR
from .errors import ConfigError, DapaError, NumericError
from .gradcheck import format_results, run_suite

log = logging.getLogger("dapa")

_MODEL_KEYS = {f.name for f in dataclasses.fields(M.ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TR.TrainConfig)}
_DATA_KEYS = {"manifest"}
_SPEC_KEYS = {f.name for f in dataclasses.fields(D.SyntheticSpec)}


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with its own status code."""

    def error(self, message):
        raise ConfigError(message)


def _setup_logging():
    level = os.environ.get("DAPA_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_json(path, what: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} file missing: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: {what} must be a JSON object")
    return doc


def _check_keys(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_run_config(path) -> dict:
    """Parse a run-config file with model/train/data sections."""
    doc = _load_json(path, "config") if path else {}
    _check_keys(doc, {"model", "train", "data"}, "config")
    model_kw = dict(doc.get("model", {}))
    train_kw = dict(doc.get("train", {}))
    data_kw = dict(doc.get("data", {}))
    _check_keys(model_kw, _MODEL_KEYS, "config.model")
    _check_keys(train_kw, _TRAIN_KEYS, "config.train")
    _check_keys(data_kw, _DATA_KEYS, "config.data")
    return {"model": model_kw, "train": train_kw, "data": data_kw}


def _echo_config(label: str, payload: dict):
    print(f"{label}:")
    print(json.dumps(payload, indent=2, sort_keys=True))


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_kw = _load_json(args.spec, "synthesis spec")
    _check_keys(spec_kw, _SPEC_KEYS, "synthesis spec")
    if "warps" in spec_kw and spec_kw["warps"] is not None:
        spec_kw["warps"] = [D.WarpParams(**w) for w in spec_kw["warps"]]
    try:
        spec = D.SyntheticSpec(**spec_kw)
    except TypeError as exc:
        raise ConfigError(f"bad synthesis spec: {exc}") from exc
    manifest = D.generate_synthetic_corpus(spec, args.out)
    corpus = D.load_manifest(manifest)
    print(f"seed: {spec.seed}")
    print(f"domains: {len(corpus.domains)}")
    print(f"sessions: {len(corpus.records)}")
    print(f"frames: {sum(r.frame_count for r in corpus.records)}")
    print(f"manifest: {manifest}")
    return 0


def _resolve_train_setup(args):
    sections = load_run_config(args.config)
    train_kw = sections["train"]
    model_kw = sections["model"]
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    manifest = args.data or sections["data"].get("manifest")
    if not manifest:
        raise ConfigError("no corpus: pass --data or set data.manifest in the config")
    corpus = D.load_manifest(manifest)
    if "d_in" not in model_kw:
        model_kw["d_in"] = corpus.feature_dim
    elif model_kw["d_in"] != corpus.feature_dim:
        raise ConfigError(
            f"config d_in={model_kw['d_in']} but corpus features have "
            f"{corpus.feature_dim} dimensions"
        )
    return M.ModelConfig(**model_kw), TR.TrainConfig(**train_kw), corpus


def cmd_train(args) -> int:
    model_cfg, train_cfg, corpus = _resolve_train_setup(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    effective = {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "data": {"manifest": str(args.data or "")},
        "workers": args.workers,
    }
    print(f"seed: {train_cfg.seed}")
    _echo_config("effective config", effective)
    (out_dir / "effective_config.json").write_text(
        json.dumps(effective, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if args.resume:
        result = TR.run_training(None, corpus, train_cfg, out_dir=out_dir,
                                 resume_from=args.resume)
    else:
        model = M.DapaModel.build(model_cfg, corpus.domains, seed=train_cfg.seed)
        result = TR.run_training(model, corpus, train_cfg, out_dir=out_dir)
    last = result.history[-1]
    print(f"epochs: {len(result.history)}")
    print(f"final train_loss: {last.train_loss!r}")
    if result.best_val_ccc is not None:
        print(f"best val_ccc: {result.best_val_ccc!r} (epoch {result.best_epoch})")
    print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def _dataset_grouping(corpus: D.Corpus, map_path) -> dict:
    if not map_path:
        return corpus.by_domain()
    mapping = _load_json(map_path, "dataset map")
    by_id = {r.session_id: r for r in corpus.records}
    groups = {}
    for dataset, ids in mapping.items():
        missing = [sid for sid in ids if sid not in by_id]
        if missing:
            raise ConfigError(f"dataset map names unknown sessions: {missing}")
        groups[dataset] = [by_id[sid] for sid in ids]
    return groups


def cmd_eval(args) -> int:
    bundle = TR.load_checkpoint(args.checkpoint)
    corpus = D.load_manifest(args.data)
    groups = _dataset_grouping(corpus, args.dataset_map)
    print(f"seed: {bundle.train_config.seed}")
    override = None
    if args.debug_labels_as_predictions:
        override = {r.session_id: D.read_labels(r.target_labels)
                    for r in corpus.records}
    params = bundle.model.named_parameters()
    with TR.ema_weights(bundle.ema, params):
        report = ME.evaluate_corpus(bundle.model, groups,
                                    batch_size=bundle.train_config.batch_eval,
                                    predictions_override=override)
    for name in sorted(report.per_dataset):
        print(f"ccc[{name}]: {report.per_dataset[name]!r}")
    print(f"ccc[global]: {report.global_ccc!r}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        print(f"report: {out_dir}")
    return 0


def cmd_export(args) -> int:
    bundle = TR.load_checkpoint(args.checkpoint)
    corpus = D.load_manifest(args.data)
    by_id = {r.session_id: r for r in corpus.records}
    if args.session not in by_id:
        raise ConfigError(f"unknown session {args.session!r}; "
                          f"known: {sorted(by_id)[:8]}")
    print(f"seed: {bundle.train_config.seed}")
    params = bundle.model.named_parameters()
    with TR.ema_weights(bundle.ema, params):
        path = ME.export_predictions(bundle.model, by_id[args.session], args.out,
                                     batch_size=bundle.train_config.batch_eval)
    print(f"export: {path}")
    return 0


def cmd_gradcheck(args) -> int:
    print(f"seed: {args.seed}")
    results = run_suite(full=args.full, seed=args.seed)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    if failed:
        raise NumericError(
            "gradient check failed for: " + ", ".join(r.name for r in failed))
    print("all blocks passed")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dapa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dyadic corpus")
    p.add_argument("--spec", required=True, help="JSON synthesis spec")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config", help="JSON run config (model/train/data sections)")
    p.add_argument("--data", help="corpus manifest (overrides config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--workers", type=int, default=1,
                   help="data-parallel width (results are worker-independent)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dataset-map", dest="dataset_map",
                   help="JSON {dataset: [session ids]} grouping")
    p.add_argument("--out", help="directory for report.json/report.csv")
    p.add_argument("--debug-labels-as-predictions", action="store_true",
                   help="score ground truth against itself (pipeline check)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export", help="write per-frame predictions as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--session", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--full", action="store_true",
                   help="include the end-to-end network + loss block")
    p.add_argument("--seed", type=int, default=2024)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be >= 1")
        return args.fn(args)
    except DapaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
