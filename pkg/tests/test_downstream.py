import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from start_trl.downstream import (ClassifierModel, FinetuneConfig, MetricsReport, TripQuery,
                                  classification_metrics, classify, embed, eta_batch,
                                  finetune_classify, finetune_eta, predict_eta, regression_metrics,
                                  roc_auc)
from start_trl.model import ModelConfig, StartModel
from start_trl.trajdata import Trajectory

import scalar_oracles as oracle


def small_encoder(seed=0, d=16):
    torch.manual_seed(seed)
    return StartModel(ModelConfig(d=d, gat_heads=[2, 1], gat_head_dims=[8, d], layers=1, heads=2,
                                  dropout=0.0))


def test_regression_single_element():
    assert regression_metrics([10.0], [11.0]) == {"MAE": 1.0, "MAPE": 10.0, "RMSE": 1.0}


def test_perfect_predictions():
    y = np.array([3.0, 7.0, 9.0])
    assert regression_metrics(y, y) == {"MAE": 0.0, "MAPE": 0.0, "RMSE": 0.0}
    labels = np.array([0, 1, 1, 0])
    m = classification_metrics(labels, np.eye(2)[labels])
    assert m["ACC"] == 1.0 and m["AUC"] == 1.0 and m["F1"] == 1.0


def test_mape_zero_target_names_index():
    with pytest.raises(ValueError, match="index 2"):
        regression_metrics([5.0, 1.0, 0.0], [1.0, 1.0, 1.0])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30))
def test_rmse_at_least_mae(pairs):
    y = np.array([a for a, _ in pairs])
    y[np.abs(y) < 1e-3] = 1.0
    m = regression_metrics(y, [b for _, b in pairs])
    assert m["RMSE"] >= m["MAE"] - 1e-9 * max(1.0, m["MAE"])


def test_auc_example():
    y, s = [1, 0, 1, 0], [0.9, 0.8, 0.4, 0.1]
    assert roc_auc(y, s) == 0.75
    assert roc_auc(y, s) == oracle.pair_auc(y, s)


def test_auc_ties_count_half():
    assert roc_auc([1, 0], [0.5, 0.5]) == 0.5
    assert roc_auc([1, 1, 0], [0.7, 0.2, 0.2]) == pytest.approx(0.75)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.booleans(), st.integers(-50, 50)), min_size=2, max_size=40))
def test_auc_monotone_invariant(rows):
    y = [int(a) for a, _ in rows]
    if len(set(y)) < 2:
        return
    s = np.array([b for _, b in rows], dtype=np.float64)
    assert roc_auc(y, s) == pytest.approx(oracle.pair_auc(y, s.tolist()))
    # strictly increasing and exact on these integers
    assert roc_auc(y, s ** 3 + 2 * s - 7) == pytest.approx(roc_auc(y, s))


def test_auc_single_class():
    with pytest.raises(ValueError):
        roc_auc([1, 1], [0.3, 0.4])


def test_binary_f1():
    y = np.array([1, 1, 0, 0, 1])
    pred = np.array([1, 0, 1, 0, 1])
    m = classification_metrics(y, np.eye(2)[pred])
    # tp=2, fp=1, fn=1
    assert m["F1"] == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))
    assert m["ACC"] == pytest.approx(3 / 5)


def test_multiclass_metrics():
    probs = np.array([[0.6, 0.3, 0.1], [0.5, 0.2, 0.3], [0.1, 0.2, 0.7], [0.3, 0.4, 0.3]])
    y = np.array([0, 2, 2, 0])
    m = classification_metrics(y, probs, ks=(1, 2))
    assert m["Micro-F1"] == 0.5
    # class 0: tp 1, fp 1, fn 1 -> 0.5; class 2: tp 1, fp 0, fn 1 -> 2/3
    assert m["Macro-F1"] == pytest.approx((0.5 + 2 / 3) / 2)
    assert m["Recall@1"] == 0.5
    assert m["Recall@2"] == 1.0


def test_trip_query_uses_departure_only():
    a = Trajectory("a", "u", [0, 1, 2], [100, 150, 400])
    b = Trajectory("b", "v", [0, 1, 2], [100, 900, 1000])
    assert TripQuery.of(a) == TripQuery.of(b)
    batch = eta_batch([TripQuery.of(a)])
    assert set(batch.times[0].tolist()) == {100}
    with pytest.raises(ValueError):
        eta_batch([TripQuery((3,), 0)])


def test_eta_beats_mean_baseline(small_world):
    net, trajs, graph, hist = small_world
    train, test = trajs[:240], trajs[240:]
    cfg = FinetuneConfig(lr=3e-3, epochs=12, batch_size=16, warmup_epochs=1)
    model, history = finetune_eta(small_encoder(), train, graph, cfg)
    assert np.isfinite([h["loss"] for h in history]).all()
    y = np.array([t.duration for t in test], dtype=float)
    pred = predict_eta(model, [TripQuery.of(t) for t in test], graph)
    baseline = np.full_like(y, np.mean([t.duration for t in train]))
    assert regression_metrics(y, pred)["MAE"] < regression_metrics(y, baseline)["MAE"]


def test_eta_constant_target(small_world):
    net, trajs, graph, _ = small_world
    const = [Trajectory(t.traj_id, t.user_id, t.roads, [0] * (len(t) - 1) + [500]) for t in trajs[:40]]
    cfg = FinetuneConfig(lr=3e-3, epochs=15, batch_size=10, warmup_epochs=1)
    model, _ = finetune_eta(small_encoder(), const, graph, cfg)
    pred = predict_eta(model, [TripQuery.of(t) for t in const], graph)
    assert np.abs(pred - 500).max() < 5.0


def test_classifier_overfits_small_set(small_world):
    net, trajs, graph, _ = small_world
    train = trajs[:50]
    labels = [t.label for t in train]
    assert 0 < sum(labels) < 50
    cfg = FinetuneConfig(lr=3e-3, epochs=40, batch_size=10, warmup_epochs=2)
    model, _ = finetune_classify(small_encoder(1, d=32), train, labels, 2, graph, cfg)
    probs = classify(model, train, graph)
    assert np.abs(probs.sum(1) - 1).max() < 1e-6
    assert (probs.argmax(1) == np.array(labels)).mean() >= 0.98


def test_label_out_of_range(small_world):
    _, trajs, graph, _ = small_world
    with pytest.raises(ValueError, match="index 1"):
        finetune_classify(small_encoder(), trajs[:3], [0, 2, 1], 2, graph, FinetuneConfig(epochs=1))


def test_uniform_head_gives_half(small_world):
    _, trajs, graph, _ = small_world
    model = ClassifierModel(small_encoder(), 2)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    assert np.allclose(classify(model, trajs[:3], graph), 0.5)


def test_embed_shape_and_order(small_world):
    _, trajs, graph, _ = small_world
    enc = small_encoder()
    vecs = embed(enc, trajs[:5], graph)
    assert vecs.shape == (5, 16) and vecs.dtype == np.float64
    assert np.allclose(embed(enc, trajs[3:4], graph)[0], vecs[3], atol=1e-6)


def test_finetune_updates_encoder(small_world):
    _, trajs, graph, _ = small_world
    enc = small_encoder()
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    finetune_eta(enc, trajs[:20], graph, FinetuneConfig(lr=1e-3, epochs=1, batch_size=10,
                                                         warmup_epochs=0))
    changed = [k for k, v in enc.state_dict().items() if not torch.equal(v, before[k])]
    assert any(k.startswith("gat.") for k in changed)
    assert any(k.startswith("encoder.") for k in changed)


def test_metrics_report_roundtrip(tmp_path):
    rep = MetricsReport("eta", {"MAE": np.float64(1.25), "MAPE": 10.0, "RMSE": 0.1 + 0.2})
    text = rep.to_text()
    assert text.splitlines()[0] == "task=eta"
    assert text.splitlines()[1:] == ["MAE=1.25", "MAPE=10.0", "RMSE=0.30000000000000004"]
    back = MetricsReport.from_text(text)
    assert back.task == "eta" and back.metrics == rep.metrics
    rep.write(tmp_path / "eta_metrics")
    assert (tmp_path / "eta_metrics.txt").read_text() == text
    assert '"MAE": 1.25' in (tmp_path / "eta_metrics.json").read_text()
