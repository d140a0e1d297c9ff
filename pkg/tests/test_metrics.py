import json

import numpy as np
import pytest

from noisylab.metrics import (
    EpochRecord,
    MetricsError,
    ModuleRecord,
    RunLog,
    SelectionStats,
    accuracy,
    emit_curves,
    label_precision,
    label_recall,
    last_k_mean,
    macro_accuracy,
    per_class_accuracy,
    read_curve_csv,
    test_accuracy as accuracy_on,
)


def test_precision_examples():
    flipped = np.array([0, 0, 1, 0, 1, 0], dtype=bool)
    assert label_precision(np.array([1, 1, 1, 1, 0, 0], bool), flipped) == 0.75
    assert label_precision(np.array([1, 1, 0, 0, 0, 1], bool), flipped) == 1.0
    assert label_precision(np.zeros(6, bool), flipped) is None


def test_recall_examples():
    flipped = np.array([0, 0, 1, 0, 1, 0], dtype=bool)
    assert label_recall(~flipped, flipped) == 1.0
    assert label_recall(np.zeros(6, bool), flipped) == 0.0
    assert label_recall(np.ones(2, bool), np.ones(2, bool)) is None
    with pytest.raises(MetricsError):
        label_recall(np.ones(3, bool), np.ones(2, bool))


def test_selection_identities():
    rng = np.random.default_rng(0)
    flipped = rng.random(1000) < 0.3
    assert label_recall(np.ones(1000, bool), flipped) == 1.0
    assert label_precision(np.ones(1000, bool), flipped) == pytest.approx(1 - flipped.mean())
    assert label_precision(~flipped, flipped) == label_recall(~flipped, flipped) == 1.0


def test_selection_set_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        flipped, sel = rng.random(1000) < 0.4, rng.random(1000) < 0.5
        chosen = {i for i in range(1000) if sel[i]}
        clean = {i for i in range(1000) if not flipped[i]}
        assert label_precision(sel, flipped) == len(chosen & clean) / len(chosen)
        assert label_recall(sel, flipped) == len(chosen & clean) / len(clean)


def test_selection_stats_merge():
    rng = np.random.default_rng(2)
    flipped, sel = rng.random(100) < 0.4, rng.random(100) < 0.6
    merged = SelectionStats()
    for part in np.array_split(np.arange(100), 7):
        merged += SelectionStats.from_masks(sel[part], flipped[part])
    assert merged.precision == label_precision(sel, flipped)
    assert merged.recall == label_recall(sel, flipped)
    assert SelectionStats().precision is None


def test_accuracy_examples():
    y = np.array([0] * 90 + [1] * 10)
    pred = np.zeros(100, dtype=int)
    assert accuracy(pred, y) == 0.9
    assert macro_accuracy(pred, y, 2) == 0.5
    assert accuracy(y, y) == macro_accuracy(y, y, 2) == 1.0
    with pytest.raises(MetricsError, match="absent"):
        macro_accuracy(pred, y, 3)
    with pytest.raises(MetricsError):
        accuracy([], [])


def test_per_class_oracle():
    rng = np.random.default_rng(3)
    y, pred = rng.integers(0, 5, 300), rng.integers(0, 5, 300)
    want = [sum(1 for a, b in zip(pred, y) if b == c and a == c) / sum(1 for b in y if b == c) for c in range(5)]
    assert per_class_accuracy(pred, y, 5) == pytest.approx(want, abs=0)
    assert macro_accuracy(pred, y, 5) == pytest.approx(np.mean(want))


def test_accuracy_on_dataset():
    from noisylab.datahub import make_dataset

    ds = make_dataset(np.zeros((4, 2)), [0, 1, 1, 0], 2, observed=[1, 1, 1, 1], split="test")
    assert accuracy_on(lambda x: np.array([0, 1, 0, 0]), ds) == 0.75  # scored on true labels


def _log(accs, label=None):
    log = RunLog(label=label)
    for e, a in enumerate(accs):
        log.append(EpochRecord(e, a, [a, a], modules={
            "lpm": ModuleRecord(10 + e, 0.9, None, a, 0.5),
            "lam": ModuleRecord(test_accuracy=a),
        }))
    return log


def test_last_k_mean():
    assert last_k_mean(_log([0.8] * 12)) == pytest.approx(0.8)
    assert last_k_mean(_log([0.1, 0.2] + [0.70 + 0.01 * i for i in range(10)])) == pytest.approx(0.745)
    rng = np.random.default_rng(4)
    accs = rng.random(30).tolist()
    assert last_k_mean(_log(accs), 10) == pytest.approx(sum(accs[-10:]) / 10)
    with pytest.raises(MetricsError):
        last_k_mean(_log([0.5] * 3), 10)


def test_run_log_order_and_json():
    log = _log([0.5, 0.6])
    with pytest.raises(MetricsError, match="out of order"):
        log.append(EpochRecord(5, 0.1, []))
    lines = log.to_jsonl().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first["modules"]["lpm"]["label_recall"] is None
    assert EpochRecord.from_json(lines[1]) == log.records[1]
    with pytest.raises(ValueError):
        EpochRecord(0, float("nan"), []).to_json()


def test_run_log_save_load(tmp_path):
    log = _log([0.5, 0.6, 0.7])
    log.save(tmp_path / "runlog.jsonl")
    (tmp_path / "config.json").write_text(json.dumps({"seed": 4}))
    back = RunLog.load(tmp_path)
    assert back.records == log.records and back.seed == 4
    assert sorted(back.module_names()) == ["lam", "lpm"]


def test_curves_shape_and_round_trip(tmp_path):
    logs = {"a": _log([0.1, 0.2, 0.3]), "b": _log([0.4, 0.5, 0.6])}
    written = emit_curves(logs, tmp_path, metrics=["test_accuracy", "label_recall", "selected_count"], render=False)
    assert [p.name for p in written] == ["test_accuracy.csv", "selected_count.csv"]  # recall is all-null
    rows = (tmp_path / "test_accuracy.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[0] == "epoch,a,b"
    back = read_curve_csv(tmp_path / "test_accuracy.csv")
    assert back == {"epoch": [0, 1, 2], "a": [0.1, 0.2, 0.3], "b": [0.4, 0.5, 0.6]}
    assert read_curve_csv(tmp_path / "selected_count.csv")["a/lpm"] == [10, 11, 12]


def test_curves_render_and_none_cells(tmp_path):
    log = _log([0.3, 0.4])
    log.records[1].modules["lpm"].label_precision = None
    written = emit_curves([log], tmp_path, metrics=["label_precision"])
    assert {p.suffix for p in written} == {".csv", ".png"}
    assert read_curve_csv(tmp_path / "label_precision.csv")["run0/lpm"] == [0.9, None]


def test_curves_errors(tmp_path):
    with pytest.raises(MetricsError):
        emit_curves([], tmp_path)
    with pytest.raises(MetricsError, match="epoch ranges"):
        emit_curves({"a": _log([0.1]), "b": _log([0.1, 0.2])}, tmp_path)
