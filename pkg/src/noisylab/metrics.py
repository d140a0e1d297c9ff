"""Selection quality, accuracy, run logs and curve emission."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class MetricsError(ValueError):
    pass


def _bool(mask) -> np.ndarray:
    if hasattr(mask, "detach"):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask, dtype=bool)


def label_precision(selection_mask, corruption_mask) -> float | None:
    """Clean fraction of the selected samples; ``None`` when nothing is selected."""
    sel, flipped = _bool(selection_mask), _bool(corruption_mask)
    if sel.shape != flipped.shape:
        raise MetricsError(f"mask shapes differ: {sel.shape} vs {flipped.shape}")
    n_sel = int(sel.sum())
    if n_sel == 0:
        return None
    return int((sel & ~flipped).sum()) / n_sel


def label_recall(selection_mask, corruption_mask) -> float | None:
    """Selected fraction of the clean samples; ``None`` when no sample is clean."""
    sel, flipped = _bool(selection_mask), _bool(corruption_mask)
    if sel.shape != flipped.shape:
        raise MetricsError(f"mask shapes differ: {sel.shape} vs {flipped.shape}")
    n_clean = int((~flipped).sum())
    if n_clean == 0:
        return None
    return int((sel & ~flipped).sum()) / n_clean


@dataclass
class SelectionStats:
    """Mergeable selection counts; ``+`` combines batches or workers."""

    selected: int = 0
    selected_clean: int = 0
    clean: int = 0
    total: int = 0

    @classmethod
    def from_masks(cls, selection_mask, corruption_mask) -> "SelectionStats":
        sel, flipped = _bool(selection_mask), _bool(corruption_mask)
        return cls(int(sel.sum()), int((sel & ~flipped).sum()), int((~flipped).sum()), len(sel))

    def __add__(self, other: "SelectionStats") -> "SelectionStats":
        return SelectionStats(
            self.selected + other.selected,
            self.selected_clean + other.selected_clean,
            self.clean + other.clean,
            self.total + other.total,
        )

    @property
    def precision(self) -> float | None:
        return self.selected_clean / self.selected if self.selected else None

    @property
    def recall(self) -> float | None:
        return self.selected_clean / self.clean if self.clean else None


# --------------------------------------------------------------------------
# Accuracy
# --------------------------------------------------------------------------


def _labels(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.int64)


def accuracy(predictions, labels) -> float:
    pred, true = _labels(predictions), _labels(labels)
    if len(true) == 0:
        raise MetricsError("accuracy of an empty set is undefined")
    return float((pred == true).mean())


def per_class_accuracy(predictions, labels, class_count: int) -> list[float | None]:
    pred, true = _labels(predictions), _labels(labels)
    out: list[float | None] = []
    for c in range(class_count):
        members = true == c
        out.append(float((pred[members] == c).mean()) if members.any() else None)
    return out


def macro_accuracy(predictions, labels, class_count: int) -> float:
    per_class = per_class_accuracy(predictions, labels, class_count)
    absent = [c for c, a in enumerate(per_class) if a is None]
    if absent:
        raise MetricsError(f"macro accuracy needs every class present; absent: {absent}")
    return float(np.mean(per_class))


def test_accuracy(model, test_set) -> float:
    """Plain accuracy of ``model`` (a callable from inputs to labels) on ``test_set``'s true labels."""
    return accuracy(model(test_set.inputs), test_set.true_labels)


def test_macro_accuracy(model, test_set) -> float:
    return macro_accuracy(model(test_set.inputs), test_set.true_labels, test_set.class_count)


test_accuracy.__test__ = False  # not a pytest test when imported into test modules
test_macro_accuracy.__test__ = False


# --------------------------------------------------------------------------
# Run logs
# --------------------------------------------------------------------------


@dataclass
class ModuleRecord:
    selected_count: int | None = None
    label_precision: float | None = None
    label_recall: float | None = None
    test_accuracy: float | None = None
    train_loss: float | None = None

    @classmethod
    def from_stats(cls, stats: SelectionStats | None, **extra) -> "ModuleRecord":
        if stats is None:
            return cls(**extra)
        return cls(stats.selected, stats.precision, stats.recall, **extra)


@dataclass
class EpochRecord:
    epoch: int
    test_accuracy: float
    per_class_accuracy: list
    macro_accuracy: float | None = None
    lr: float | None = None
    modules: dict[str, ModuleRecord] = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "epoch": self.epoch,
            "lr": self.lr,
            "macro_accuracy": self.macro_accuracy,
            "modules": {name: vars(m) for name, m in self.modules.items()},
            "per_class_accuracy": self.per_class_accuracy,
            "test_accuracy": self.test_accuracy,
        }
        return json.dumps(d, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "EpochRecord":
        d = json.loads(line)
        modules = {name: ModuleRecord(**m) for name, m in d.pop("modules", {}).items()}
        return cls(modules=modules, **d)


@dataclass
class RunLog:
    """Per-epoch records of one run.

    ``records`` serialise to JSON lines (deterministic); wall-clock times are
    kept apart in ``wall_clock`` so logs of identical runs compare
    byte-for-byte.
    """

    config: dict = field(default_factory=dict)
    seed: int = 0
    records: list[EpochRecord] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    label: str | None = None

    def append(self, record: EpochRecord, seconds: float | None = None) -> None:
        expected = self.records[-1].epoch + 1 if self.records else 0
        if record.epoch != expected:
            raise MetricsError(f"epoch {record.epoch} out of order; expected {expected}")
        self.records.append(record)
        if seconds is not None:
            self.wall_clock.append(seconds)

    @property
    def epochs(self) -> list[int]:
        return [r.epoch for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, label: str | None = None) -> "RunLog":
        path = Path(path)
        if path.is_dir():
            path = path / "runlog.jsonl"
        text = path.read_text(encoding="utf-8")
        log = cls(label=label or path.parent.name)
        for line in text.splitlines():
            if line.strip():
                log.append(EpochRecord.from_json(line))
        cfg = path.parent / "config.json"
        if cfg.exists():
            log.config = json.loads(cfg.read_text())
            log.seed = log.config.get("seed", 0)
        timing = path.parent / "timing.json"
        if timing.exists():
            log.wall_clock = json.loads(timing.read_text())
        return log

    def module_names(self) -> list[str]:
        names: list[str] = []
        for r in self.records:
            for m in r.modules:
                if m not in names:
                    names.append(m)
        return names


def last_k_mean(run_log: RunLog, k: int = 10) -> float:
    if len(run_log.records) < k:
        raise MetricsError(f"last_k_mean needs >= {k} epochs, log has {len(run_log.records)}")
    return float(np.mean([r.test_accuracy for r in run_log.records[-k:]]))


# --------------------------------------------------------------------------
# Curves
# --------------------------------------------------------------------------

CURVE_METRICS = ("label_precision", "label_recall", "test_accuracy", "selected_count")


def curve_series(run_logs: Mapping[str, RunLog] | Sequence[RunLog], metric: str) -> dict[str, list]:
    """Series name to per-epoch values for one metric.

    ``test_accuracy`` yields one series per run (the method's prediction);
    module metrics yield one series per ``run/module``.
    """
    logs = _named(run_logs)
    series: dict[str, list] = {}
    for label, log in logs.items():
        if metric == "test_accuracy":
            series[label] = [r.test_accuracy for r in log.records]
            continue
        for module in log.module_names():
            values = [getattr(r.modules.get(module, ModuleRecord()), metric) for r in log.records]
            if any(v is not None for v in values):
                series[f"{label}/{module}"] = values
    return series


def _named(run_logs) -> dict[str, RunLog]:
    if isinstance(run_logs, Mapping):
        logs = dict(run_logs)
    else:
        logs = {}
        for i, log in enumerate(run_logs):
            name = log.label or f"run{i}"
            if name in logs:
                name = f"{name}_{i}"
            logs[name] = log
    if not logs:
        raise MetricsError("no run logs given")
    epochs = {tuple(log.epochs) for log in logs.values()}
    if len(epochs) != 1:
        raise MetricsError(f"run logs cover different epoch ranges: {sorted(len(e) for e in epochs)}")
    return logs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_curves(run_logs, out_dir, metrics: Sequence[str] = CURVE_METRICS, render: bool = True) -> list[Path]:
    """Write ``<metric>.csv`` (and ``<metric>.png``) per metric into ``out_dir``."""
    logs = _named(run_logs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = next(iter(logs.values())).epochs
    written = []
    for metric in metrics:
        series = curve_series(logs, metric)
        if not series:
            continue
        path = out_dir / f"{metric}.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", *series])
            for i, epoch in enumerate(epochs):
                writer.writerow([epoch, *(_fmt(vals[i]) for vals in series.values())])
        written.append(path)
        if render:
            written.append(_render(metric, epochs, series, out_dir / f"{metric}.png"))
    return written


def read_curve_csv(path) -> dict[str, list]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    out: dict[str, list] = {name: [] for name in header}
    for row in body:
        for name, cell in zip(header, row):
            if name == "epoch":
                out[name].append(int(cell))
            elif cell == "":
                out[name].append(None)
            else:
                value = float(cell)
                out[name].append(int(value) if value.is_integer() and "." not in cell else value)
    return out


def _render(metric: str, epochs, series: dict[str, list], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, values in series.items():
        ys = [math.nan if v is None else v for v in values]
        ax.plot(epochs, ys, label=name, linewidth=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric.replace("_", " "))
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
