"""CCC oracle agreement, report invariants, session prediction export."""

import numpy as np
import pytest

from dapa import data as D
from dapa import metrics
from dapa import model as M
from dapa.errors import UsageError
from dapa.rng import RngStream
from dapa.tensor import Tensor


def ccc_oracle(x, y):
    """Two-pass direct formula, independently coded."""
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    m = len(x)
    mean_x = sum(x) / m
    mean_y = sum(y) / m
    var_x = sum((v - mean_x) ** 2 for v in x) / m
    var_y = sum((v - mean_y) ** 2 for v in y) / m
    cov = sum((a - mean_x) * (b - mean_y) for a, b in zip(x, y)) / m
    denom = var_x + var_y + (mean_x - mean_y) ** 2
    if denom < 1e-12:
        return 0.0
    return 2.0 * cov / denom


def test_ccc_analytic_cases():
    x = np.array([0.2, 0.5, 0.9, 0.1])
    assert metrics.ccc(x, x) == 1.0
    assert metrics.ccc(np.full(5, 0.3), np.array([0.1, 0.9, 0.2, 0.4, 0.5])) == 0.0
    assert metrics.ccc([0.0, 1.0], [1.0, 0.0]) == -1.0
    a, b = np.array([1, 2, 3, 4.0]), np.array([1.1, 2.1, 2.9, 4.2])
    assert abs(metrics.ccc(a, b) - ccc_oracle(a, b)) <= 1e-12
    assert metrics.ccc(a, b) == metrics.ccc(b, a)


def test_ccc_matches_oracle_on_random_pairs():
    rng = RngStream(123)
    for trial in range(300):
        m = int(rng.uniform(2, 513, (1,))[0])
        x = rng.normal((m,))
        y = rng.normal((m,)) if trial % 3 else x + rng.normal((m,), std=0.1)
        assert abs(metrics.ccc(x, y) - ccc_oracle(x, y)) <= 1e-12


def test_ccc_shift_penalty_and_affine_invariance():
    rng = RngStream(5)
    x = rng.uniform(0, 1, (40,))
    assert metrics.ccc(x, x + 0.25) < 1.0
    assert metrics.ccc(x, x) == 1.0
    both = 3.0 * x + 0.2
    assert abs(metrics.ccc(both, 3.0 * x + 0.2) - 1.0) <= 1e-12
    # same positive affine map applied to both args leaves ccc unchanged
    y = rng.uniform(0, 1, (40,))
    assert abs(metrics.ccc(2.0 * x + 5.0, 2.0 * y + 5.0) - metrics.ccc(x, y)) <= 1e-9


def test_ccc_degenerate_flag_and_errors():
    value, degen = metrics.ccc_with_flag(np.full(4, 0.5), np.full(4, 0.5))
    assert value == 0.0 and degen
    value, degen = metrics.ccc_with_flag(np.full(4, 0.5), np.array([0.1, 0.2, 0.3, 0.4]))
    assert value == 0.0 and not degen  # cov = 0, denominator healthy
    with pytest.raises(UsageError):
        metrics.ccc([0.5], [0.5])
    with pytest.raises(UsageError):
        metrics.ccc([0.5, 0.6], [0.5, 0.6, 0.7])


def test_ccc_loss_agrees_with_metric():
    rng = RngStream(9)
    truth = rng.uniform(0, 1, (30,))
    pred = rng.uniform(0, 1, (30,))
    loss = M.ccc_loss(Tensor(pred), truth).item()
    assert abs(loss - (1.0 - metrics.ccc(pred, truth))) <= 1e-12


def make_corpus(tmp_path, domains=("a", "b"), sessions_per=2, n=70, d=4):
    import json
    sessions = []
    rng = RngStream(31)
    for dom in domains:
        for s in range(sessions_per):
            sid = f"{dom}{s}"
            D.write_matrix(tmp_path / f"{sid}_t.dapf", rng.normal((n, d), dtype=np.float32))
            D.write_matrix(tmp_path / f"{sid}_p.dapf", rng.normal((n, d), dtype=np.float32))
            D.write_labels(tmp_path / f"{sid}_y.txt", rng.uniform(0, 1, (n,)))
            sessions.append({"id": sid, "domain": dom,
                             "target_features": f"{sid}_t.dapf",
                             "partner_features": f"{sid}_p.dapf",
                             "target_labels": f"{sid}_y.txt"})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"version": 1, "sessions": sessions}))
    return D.load_manifest(path)


def tiny_model(corpus, **kw):
    cfg_kw = dict(d_in=corpus.feature_dim, d_prompt=2, d_model=4, lstm_layers=1,
                  num_dapa_layers=1, dropout=0.0, head_hidden=[4], dtype="float32")
    cfg_kw.update(kw)
    cfg = M.ModelConfig(**cfg_kw)
    return M.DapaModel.build(cfg, corpus.domains)


def test_labels_as_predictions_score_one(tmp_path):
    corpus = make_corpus(tmp_path)
    override = {rec.session_id: D.read_labels(rec.target_labels)
                for rec in corpus.records}
    report = metrics.evaluate_corpus(None, corpus.by_domain(),
                                     predictions_override=override)
    for value in report.per_dataset.values():
        assert abs(value - 1.0) <= 1e-12
    assert abs(report.global_ccc - 1.0) <= 1e-12
    for value in report.per_session.values():
        assert abs(value - 1.0) <= 1e-12


def test_global_is_unweighted_mean_and_pooling_matches_oracle(tmp_path):
    corpus = make_corpus(tmp_path)
    model = tiny_model(corpus)
    report = metrics.evaluate_corpus(model, corpus.by_domain(), batch_size=8)
    assert abs(report.global_ccc - np.mean(list(report.per_dataset.values()))) <= 1e-12
    # dataset pooling equals the oracle on concatenated frames
    for dom, records in corpus.by_domain().items():
        preds, truths = [], []
        for rec in records:
            p, t = metrics.predict_session(model, rec, batch_size=8)
            preds.append(p)
            truths.append(t)
        pooled = ccc_oracle(np.concatenate(preds), np.concatenate(truths))
        assert abs(report.per_dataset[dom] - pooled) <= 1e-12
    # single dataset: global equals that dataset's value
    solo = metrics.evaluate_corpus(model, {"a": corpus.by_domain()["a"]}, batch_size=8)
    assert solo.global_ccc == solo.per_dataset["a"]


def test_export_predictions_rows_and_determinism(tmp_path):
    corpus = make_corpus(tmp_path, domains=("a",), sessions_per=1)
    model = tiny_model(corpus)
    rec = corpus.records[0]
    out1 = metrics.export_predictions(model, rec, tmp_path / "p1.csv", batch_size=8)
    out2 = metrics.export_predictions(model, rec, tmp_path / "p2.csv", batch_size=8)
    lines = out1.read_text().strip().splitlines()
    assert lines[0] == "session_id,frame,prediction,truth"
    assert len(lines) == rec.frame_count + 1
    preds = np.array([float(l.split(",")[2]) for l in lines[1:]])
    assert np.all(preds > 0) and np.all(preds < 1)
    assert out1.read_text() == out2.read_text()


def test_report_serialisation(tmp_path):
    corpus = make_corpus(tmp_path)
    model = tiny_model(corpus)
    report = metrics.evaluate_corpus(model, corpus.by_domain(), batch_size=8)
    header = report.to_csv().splitlines()[0]
    assert header == "model,a,b,global"
    parsed = __import__("json").loads(report.to_json())
    assert set(parsed) == {"per_dataset", "global", "per_session", "frame_counts",
                           "degenerate"}
