"""One-vs-rest AUC and confusion-based per-class metrics, assembled into reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .dataset import LabelSchema

ABSENT_NAMES = ("ABS",)


def auc_ovr(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties; 0 when either side is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.0
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_columns(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``auc_ovr`` for every column of an ``(n, C)`` score matrix at once."""
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum(axis=0)
    n_neg = labels.shape[0] - n_pos
    ranks = rankdata(scores, axis=0)
    u = (ranks * labels).sum(axis=0) - n_pos * (n_pos + 1) / 2.0
    out = np.zeros(scores.shape[1])
    ok = (n_pos > 0) & (n_neg > 0)
    out[ok] = u[ok] / (n_pos[ok] * n_neg[ok])
    return out


def mean_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(auc_columns(scores, labels).mean())


def hard_labels(probs: np.ndarray, schema: LabelSchema) -> np.ndarray:
    """One-hot within-category argmax; ties go to the lowest index."""
    out = np.zeros_like(probs)
    rows = np.arange(probs.shape[0])
    for block in schema.blocks:
        out[rows, block.start + np.argmax(probs[:, block], axis=1)] = 1.0
    return out


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def class_metrics(probs: np.ndarray, labels: np.ndarray, schema: LabelSchema) -> list[dict]:
    """Per-class confusion counts with precision, sensitivity and specificity."""
    pred = hard_labels(probs, schema).astype(bool)
    truth = np.asarray(labels).astype(bool)
    out = []
    for k in range(schema.n_classes):
        p, t = pred[:, k], truth[:, k]
        tp = int(np.sum(p & t))
        fp = int(np.sum(p & ~t))
        fn = int(np.sum(~p & t))
        tn = int(np.sum(~p & ~t))
        out.append({
            "tp": tp, "fp": fp, "fn": fn, "tn": tn,
            "precision": _ratio(tp, tp + fp),
            "sensitivity": _ratio(tp, tp + fn),
            "specificity": _ratio(tn, tn + fp),
            "support": tp + fn,
        })
    return out


def _r6(x):
    return None if x is None else round(float(x), 6)


@dataclass
class MetricsReport:
    per_class: dict[str, dict]
    per_category_mean_auc: dict[str, float]
    overall_mean_auc: float
    listed_mean_auc: float
    n_cases: int
    ensemble_weights: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "per_class": {
                k: {m: (_r6(v) if isinstance(v, float) else v) for m, v in entry.items()}
                for k, entry in self.per_class.items()
            },
            "per_category_mean_auc": {k: _r6(v) for k, v in self.per_category_mean_auc.items()},
            "overall_mean_auc": _r6(self.overall_mean_auc),
            "listed_mean_auc": _r6(self.listed_mean_auc),
            "n_cases": self.n_cases,
        }
        if self.ensemble_weights is not None:
            doc["ensemble_weights"] = self.ensemble_weights
        if self.extra:
            doc["extra"] = self.extra
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(
            per_class={k: dict(v) for k, v in doc["per_class"].items()},
            per_category_mean_auc=dict(doc["per_category_mean_auc"]),
            overall_mean_auc=doc["overall_mean_auc"],
            listed_mean_auc=doc["listed_mean_auc"],
            n_cases=doc["n_cases"],
            ensemble_weights=doc.get("ensemble_weights"),
            extra=doc.get("extra", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    def save_csv(self, path) -> Path:
        path = Path(path)
        cols = ["auc", "precision", "sensitivity", "specificity", "support"]
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class"] + cols)
            for key, entry in self.per_class.items():
                writer.writerow([key] + [entry[c] for c in cols])
        return path


def build_report(probs: np.ndarray, labels: np.ndarray, schema: LabelSchema, weights: dict | None = None,
                 absent_names=ABSENT_NAMES) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise ValueError("cannot build a report over an empty evaluation split")
    if probs.shape != labels.shape or probs.shape[1] != schema.n_classes:
        raise ValueError(f"predictions {probs.shape} and labels {labels.shape} do not match the schema")
    aucs = auc_columns(probs, labels)
    confusion = class_metrics(probs, labels, schema)
    keys = schema.class_keys
    per_class = {}
    for k, key in enumerate(keys):
        c = confusion[k]
        per_class[key] = {
            "auc": float(aucs[k]),
            "precision": c["precision"],
            "sensitivity": c["sensitivity"],
            "specificity": c["specificity"],
            "support": c["support"],
            "tp": c["tp"], "fp": c["fp"], "fn": c["fn"], "tn": c["tn"],
        }
    per_cat = {name: float(aucs[block].mean()) for name, block in zip(schema.names, schema.blocks)}
    listed = [
        offset + j
        for (_, classes), offset in zip(schema.categories, schema.offsets)
        for j, cls in enumerate(classes)
        if cls not in absent_names
    ]
    return MetricsReport(
        per_class=per_class,
        per_category_mean_auc=per_cat,
        overall_mean_auc=float(aucs.mean()),
        listed_mean_auc=float(aucs[listed].mean()) if listed else float(aucs.mean()),
        n_cases=int(probs.shape[0]),
        ensemble_weights=weights,
    )
