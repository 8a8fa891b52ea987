"""Concordance correlation, corpus evaluation, and prediction export.

Dataset-level CCC is computed over the concatenated frames of all the
dataset's sessions (no per-session averaging); the global score is the
unweighted mean over datasets.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T
from .errors import UsageError
from .rng import RngStream

DEGENERATE_EPS = 1e-12


def ccc_with_flag(x, y) -> tuple:
    """Lin's concordance: 2*cov / (var_x + var_y + (mean_x - mean_y)^2).

    Population (1/M) statistics. Returns (value, degenerate); a denominator
    below 1e-12 (both sequences constant and equal-mean) yields (0.0, True).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise UsageError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise UsageError(f"ccc needs at least 2 values, got {x.size}")
    mx, my = float(x.mean()), float(y.mean())
    dx, dy = x - mx, y - my
    cov = float((dx * dy).mean())
    var_x = float((dx * dx).mean())
    var_y = float((dy * dy).mean())
    denom = var_x + var_y + (mx - my) ** 2
    if denom < DEGENERATE_EPS:
        return 0.0, True
    return 2.0 * cov / denom, False


def ccc(x, y) -> float:
    return ccc_with_flag(x, y)[0]


@dataclass
class EvalReport:
    per_dataset: dict
    global_ccc: float
    per_session: dict
    frame_counts: dict
    degenerate: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "per_dataset": self.per_dataset,
            "global": self.global_ccc,
            "per_session": self.per_session,
            "frame_counts": self.frame_counts,
            "degenerate": self.degenerate,
        }, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per model, datasets then global (leaderboard layout)."""
        names = sorted(self.per_dataset)
        header = ["model"] + names + ["global"]
        row = ["dapa"] + [repr(self.per_dataset[n]) for n in names] + [repr(self.global_ccc)]
        return ",".join(header) + "\n" + ",".join(row) + "\n"


def predict_session(model: M.DapaModel, rec: D.SessionRecord,
                    batch_size: int = 256) -> tuple:
    """Segment, forward in eval mode, and stitch one session.

    Returns (predictions[N], truth[N]).
    """
    windows = D.segment_windows(rec)
    preds = predict_windows(model, windows, batch_size)
    stitched = D.stitch_predictions(windows, preds,
                                    frame_counts={rec.session_id: rec.frame_count})
    truth = D.read_labels(rec.target_labels)
    return stitched[rec.session_id], truth


def predict_windows(model: M.DapaModel, windows: Sequence[D.WindowSample],
                    batch_size: int = 256) -> list:
    """Eval-mode window predictions as numpy arrays (one N_w vector each)."""
    preds = []
    with T.no_grad():
        for lo in range(0, len(windows), batch_size):
            chunk = windows[lo:lo + batch_size]
            out = M.forward_batch(model,
                                  [w.x_t for w in chunk],
                                  [w.x_p for w in chunk],
                                  [w.domain for w in chunk])
            preds.extend(np.asarray(out.data[i, :, 0]) for i in range(len(chunk)))
    return preds


def evaluate_corpus(model: M.DapaModel, corpora: Mapping[str, Sequence[D.SessionRecord]],
                    batch_size: int = 256,
                    predictions_override: Optional[Mapping[str, np.ndarray]] = None
                    ) -> EvalReport:
    """Score per-dataset CCC over pooled frames and their unweighted mean.

    ``predictions_override`` substitutes precomputed per-session predictions
    (used by the CLI's labels-as-predictions debug path).
    """
    per_dataset, per_session, frame_counts, degenerate = {}, {}, {}, []
    for dataset in sorted(corpora):
        pooled_pred, pooled_truth = [], []
        for rec in corpora[dataset]:
            if predictions_override is not None:
                pred = np.asarray(predictions_override[rec.session_id])
                truth = D.read_labels(rec.target_labels)
            else:
                pred, truth = predict_session(model, rec, batch_size)
            value, degen = ccc_with_flag(pred, truth)
            per_session[rec.session_id] = value
            if degen:
                degenerate.append(rec.session_id)
            pooled_pred.append(pred)
            pooled_truth.append(truth)
        pred_all = np.concatenate(pooled_pred)
        truth_all = np.concatenate(pooled_truth)
        value, degen = ccc_with_flag(pred_all, truth_all)
        per_dataset[dataset] = value
        frame_counts[dataset] = int(truth_all.size)
        if degen:
            degenerate.append(dataset)
    global_ccc = float(np.mean(list(per_dataset.values()))) if per_dataset else float("nan")
    return EvalReport(per_dataset, global_ccc, per_session, frame_counts, degenerate)


def export_predictions(model: M.DapaModel, rec: D.SessionRecord, out_path,
                       batch_size: int = 256):
    """Write plot-ready CSV rows: session_id, frame, prediction, truth."""
    pred, truth = predict_session(model, rec, batch_size)
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session_id", "frame", "prediction", "truth"])
        for i, (p, t) in enumerate(zip(pred, truth)):
            writer.writerow([rec.session_id, i, repr(float(p)), repr(float(t))])
    return out_path
