from __future__ import annotations

import json

import numpy as np
import pytest

from semcl.embeddings import EmbeddingTable
from semcl.encoder import Encoder, EncoderSpec
from semcl.errors import ProtocolError
from semcl.evaluator import EvalResult, RunReport, evaluate, predict
from semcl.protocol import FeatureDataset, synth_benchmark


def identity_encoder(dim):
    return Encoder(EncoderSpec(kind="external-features", input_dim=dim, feature_dim=dim,
                               hidden=(), trainable_tail=0, init="identity"))


# ---------------------------------------------------------------------------
# predict


def test_predict_picks_matching_orthogonal_class():
    emb = np.eye(5)
    idx, scores = predict(emb[3], emb)
    assert idx == 3
    assert scores.argmax() == 3 and abs(scores.sum() - 1) < 1e-12


def test_predict_single_class_score_one():
    idx, scores = predict(np.array([0.0, 1.0]), np.array([[1.0, 0.0]]))
    assert idx == 0
    assert scores.shape == (1,) and scores[0] == 1.0


def test_predict_tie_breaks_low_index():
    seen = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    idx, _ = predict(np.array([1.0, 0.0]), seen)
    assert idx == 0


def test_predict_argmax_invariant_to_softmax():
    rng = np.random.default_rng(0)
    for _ in range(20):
        emb = rng.standard_normal((6, 4))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        f = rng.standard_normal(4)
        f /= np.linalg.norm(f)
        idx, scores = predict(f, emb)
        raw = emb @ f
        assert idx == int(np.argmax(raw))
        assert np.array_equal(np.argsort(scores), np.argsort(raw))


def test_predict_requires_nonempty():
    with pytest.raises(ValueError):
        predict(np.array([1.0]), np.empty((0, 1)))


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_perfect_on_zero_spread():
    ds, table = synth_benchmark(6, 16, 5, 0.0, 2, seed=4, test_per_class=4)
    res = evaluate(identity_encoder(16), table, ds, ds.classes)
    assert res.top1 == 100.0 and res.top5 == 100.0
    assert res.n_samples == 24


def test_evaluate_random_features_near_chance():
    rng = np.random.default_rng(11)
    k, dim, per = 10, 24, 400
    emb = rng.standard_normal((k, dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    table = EmbeddingTable(tuple(f"c{i}" for i in range(k)), emb)
    feats = rng.standard_normal((k * per, dim)).astype(np.float32)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    ds = FeatureDataset(table.labels, feats, np.repeat(np.arange(k), per),
                        np.zeros(k * per, dtype=bool))
    res = evaluate(identity_encoder(dim), table, ds, table.labels)
    assert abs(res.top1 - 100.0 / k) < 5.0
    assert abs(res.top5 - 100.0 * 5 / k) < 7.0


def test_evaluate_top5_is_100_for_few_classes():
    ds, table = synth_benchmark(4, 16, 5, 0.5, 1, seed=6, test_per_class=10)
    res = evaluate(identity_encoder(16), table, ds, ds.classes)
    assert res.top5 == 100.0


def test_evaluate_restricted_to_seen_classes():
    ds, table = synth_benchmark(6, 16, 5, 0.1, 2, seed=7, test_per_class=3)
    seen = list(ds.classes[:2])
    res = evaluate(identity_encoder(16), table, ds, seen)
    assert res.n_samples == 6
    assert set(np.unique(res.truths)) <= {0, 1}


def test_evaluate_errors():
    ds, table = synth_benchmark(4, 16, 5, 0.1, 1, seed=8, test_per_class=2)
    enc = identity_encoder(16)
    with pytest.raises(ProtocolError, match="no seen"):
        evaluate(enc, table, ds, [])
    with pytest.raises(ProtocolError, match="lacks"):
        evaluate(enc, table, ds, ["ghost"])


# ---------------------------------------------------------------------------
# RunReport


def make_result(top1, n=10):
    return EvalResult(top1, 100.0, n, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))


def test_report_avg_last_metric_definition():
    report = RunReport(config={}, stream={}, seed=1)
    report.add_task(0, make_result(100.0), seen=2, store_size=0)
    report.add_task(1, make_result(50.0), seen=4, store_size=4)
    assert report.avg == 75.0
    assert report.last == 50.0


def test_report_single_task_avg_equals_last():
    report = RunReport(config={}, stream={}, seed=1)
    report.add_task(0, make_result(88.0), seen=2, store_size=0)
    assert report.avg == report.last == 88.0


def test_report_json_csv_roundtrip(tmp_path):
    report = RunReport(config={"mode": "full"}, stream={"split": "2x2"}, seed=3)
    report.add_task(0, make_result(97.5), seen=2, store_size=0)
    report.add_task(1, make_result(91.25), seen=4, store_size=4)
    report.loss_traces = {"0": [{"epoch": 0, "total": 1.5}]}
    path = tmp_path / "report.json"
    report.save_json(path)
    loaded = RunReport.from_json(path)
    assert loaded.avg == report.avg and loaded.last == report.last
    assert loaded.config == report.config
    assert loaded.loss_traces == report.loss_traces

    csv_path = tmp_path / "acc.csv"
    report.save_csv(csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("task_id")
    assert len(lines) == 3

    raw = json.loads(path.read_text())
    assert raw["schema"] == "semcl-report/1"
    assert raw["avg"] == 94.375
