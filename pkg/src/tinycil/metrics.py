"""Evaluation and forgetting diagnostics.

StepReports collect what the engine measures after each incremental step:
top-1 accuracy over all seen classes, the confusion matrix, the fraction of
old-class test samples predicted into new classes (the upper-right confusion
block), the learned temperature, and the loss traces. Reports serialize to
JSON-lines plus a summary CSV whose bytes are reproducible from the seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import ModelState, cosine_logits, forward_features
from .tensor import Tensor

SUMMARY_COLUMNS = ["step", "n_classes", "top1", "bias_rate", "eta",
                   "avg_inc_acc_so_far"]


@dataclass
class StepReport:
    step: int
    n_classes: int
    top1: float
    confusion: np.ndarray
    bias_rate: float
    eta: float
    loss_trace: list[float] = field(default_factory=list)
    eta_trace: list[float] = field(default_factory=list)
    finetune_loss_trace: list[float] = field(default_factory=list)
    first_distill: float | None = None
    wall_clock: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "n_classes": self.n_classes,
            "top1": self.top1,
            "confusion": self.confusion.tolist(),
            "bias_rate": self.bias_rate,
            "eta": self.eta,
            "loss_trace": self.loss_trace,
            "eta_trace": self.eta_trace,
            "finetune_loss_trace": self.finetune_loss_trace,
            "first_distill": self.first_distill,
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "StepReport":
        d = dict(d)
        d["confusion"] = np.asarray(d["confusion"], dtype=np.int64)
        return cls(**d)


def confusion_matrix(true_labels, predicted_labels, n_classes: int) -> np.ndarray:
    """counts[i, j] = #{true == i, predicted == j}."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ConfigError(f"label arrays differ in shape: {t.shape} vs {p.shape}")
    for name, arr in (("true", t), ("predicted", p)):
        if len(arr) and (arr.min() < 0 or arr.max() >= n_classes):
            raise ConfigError(
                f"{name} label out of range [0, {n_classes}): "
                f"{int(arr.min())}..{int(arr.max())}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def old_to_new_bias_rate(cm: np.ndarray, n_old: int) -> float:
    """Fraction of old-class test samples predicted as any new class."""
    if not 0 <= n_old <= cm.shape[0]:
        raise ConfigError(f"n_old {n_old} outside [0, {cm.shape[0]}]")
    if n_old == 0:
        return 0.0
    old_total = cm[:n_old].sum()
    if old_total == 0:
        return 0.0
    return float(cm[:n_old, n_old:].sum() / old_total)


def average_incremental_accuracy(step_accuracies,
                                 include_initial: bool = True) -> float:
    accs = list(step_accuracies)
    if not include_initial:
        accs = accs[1:]
    if not accs:
        raise ConfigError("no step accuracies to average")
    return float(np.mean(accs))


def evaluate(state: ModelState, images: np.ndarray, labels: np.ndarray,
             n_classes: int, batch_size: int = 512) -> tuple[float, np.ndarray]:
    """Deterministic eval-mode top-1 and confusion over the first n_classes."""
    if state.spec.num_classes < n_classes:
        raise ConfigError(
            f"model has {state.spec.num_classes} classes, asked for {n_classes}")
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.empty(len(labels), dtype=np.int64)
    for start in range(0, len(labels), batch_size):
        chunk = images[start:start + batch_size]
        if chunk.dtype == np.uint8:
            chunk = chunk.astype(np.float64) / 255.0
        feats = forward_features(state, Tensor(chunk), mode="eval")
        probs = cosine_logits(state, feats).data
        preds[start:start + len(chunk)] = probs[:, :n_classes].argmax(axis=1)
    cm = confusion_matrix(labels, preds, n_classes)
    top1 = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    return top1, cm


# ---------------------------------------------------------------------------
# report files

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_reports_jsonl(reports: list[StepReport], path) -> None:
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_json_dict(), sort_keys=True) + "\n")


def read_reports_jsonl(path) -> list[StepReport]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(StepReport.from_json_dict(json.loads(line)))
    return out


def write_summary_csv(reports: list[StepReport], path) -> None:
    """One row per step; the running average includes the initial step."""
    lines = [",".join(SUMMARY_COLUMNS)]
    accs: list[float] = []
    for r in reports:
        accs.append(r.top1)
        avg = average_incremental_accuracy(accs)
        lines.append(",".join([
            str(r.step), str(r.n_classes), _fmt(r.top1), _fmt(r.bias_rate),
            _fmt(r.eta), _fmt(avg)]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_summary_csv(path) -> list[dict]:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        vals = ln.split(",")
        row = dict(zip(header, vals))
        rows.append({k: (int(v) if k in ("step", "n_classes") else float(v))
                     for k, v in row.items()})
    return rows
