"""Grounding metrics (R1@IoU, mAP, mIoU) and per-query length concentration."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

R1_THRESHOLDS = (0.3, 0.5, 0.7)
MAP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
HIST_BINS = 10


@dataclass
class Prediction:
    sample_id: str
    spans: np.ndarray  # (n, 2) (center, length), most confident first
    scores: np.ndarray  # (n,) descending

    @classmethod
    def ranked(cls, sample_id: str, spans, scores) -> "Prediction":
        spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        order = np.argsort(-scores, kind="stable")
        return cls(sample_id, spans[order], scores[order])


def _bounds(m) -> tuple[float, float]:
    if hasattr(m, "start"):
        return m.start, m.end
    c, w = m
    return c - w / 2, c + w / 2


def temporal_iou(a, b) -> float:
    """Interval IoU of two (center, length) spans or Moment objects."""
    s1, e1 = _bounds(a)
    s2, e2 = _bounds(b)
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = max(e1, e2) - min(s1, s2) if inter > 0 else (e1 - s1) + (e2 - s2)
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    s1, e1 = (a[:, 0] - a[:, 1] / 2)[:, None], (a[:, 0] + a[:, 1] / 2)[:, None]
    s2, e2 = (b[:, 0] - b[:, 1] / 2)[None, :], (b[:, 0] + b[:, 1] / 2)[None, :]
    inter = np.clip(np.minimum(e1, e2) - np.maximum(s1, s2), 0, None)
    union = (e1 - s1) + (e2 - s2) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def _top1_best_iou(pred: Prediction | None, gts) -> float:
    if pred is None or len(pred.spans) == 0:
        return 0.0
    return float(iou_matrix(pred.spans[:1], gts).max())


def recall_at_1(preds: dict[str, Prediction], gts: dict[str, np.ndarray], threshold: float) -> float:
    if not gts:
        return 0.0
    hits = sum(_top1_best_iou(preds.get(k), g) >= threshold for k, g in gts.items())
    return hits / len(gts)


def mean_iou(preds: dict[str, Prediction], gts: dict[str, np.ndarray]) -> float:
    if not gts:
        return 0.0
    return float(np.mean([_top1_best_iou(preds.get(k), g) for k, g in gts.items()]))


def average_precision(spans: np.ndarray, gts: np.ndarray, threshold: float) -> float:
    """AP of one ranked prediction list against one sample's ground truths.

    Predictions claim the unmatched ground truth with highest IoU (lowest
    index on ties) when that IoU reaches ``threshold``. Area under the
    all-point interpolated precision/recall curve.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if len(gts) == 0 or len(spans) == 0:
        return 0.0
    ious = iou_matrix(spans, gts)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(spans))
    for r in range(len(spans)):
        cand = np.where(taken, -1.0, ious[r])
        g = int(np.argmax(cand))
        if cand[g] >= threshold:
            taken[g] = True
            tp[r] = 1.0
    cum = np.cumsum(tp)
    precision = cum / np.arange(1, len(spans) + 1)
    recall = cum / len(gts)
    # monotone envelope, then sum precision over recall increments
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * envelope).sum())


def mean_ap(preds: dict[str, Prediction], gts: dict[str, np.ndarray], thresholds=MAP_THRESHOLDS) -> dict[float, float]:
    """Mean over samples of per-sample AP, for each threshold."""
    out = {}
    for th in thresholds:
        aps = []
        for k, g in gts.items():
            p = preds.get(k)
            aps.append(0.0 if p is None else average_precision(p.spans, g, th))
        out[float(th)] = float(np.mean(aps)) if aps else 0.0
    return out


def population_std(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if not len(v):
        return 0.0
    v = v - v[0]  # shift so constant inputs give exactly 0
    return float(np.sqrt(((v - v.mean()) ** 2).mean()))


def length_histogram(lengths, bins: int = HIST_BINS) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.clip(lengths, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return counts, edges


@dataclass
class Concentration:
    query: int
    lengths: np.ndarray
    std: float
    counts: np.ndarray
    edges: np.ndarray


def concentration_from_lengths(query: int, lengths) -> Concentration:
    lengths = np.asarray(lengths, dtype=np.float64)
    counts, edges = length_histogram(lengths)
    return Concentration(query, lengths, population_std(lengths), counts, edges)


@dataclass
class MetricsReport:
    r1: dict[float, float]
    map: dict[float, float]
    map_avg: float
    miou: float
    n_samples: int
    length_accuracy: float | None = None
    query_std: list[float] = field(default_factory=list)
    scale: str = "fraction"  # metrics in [0, 1]

    def flat(self) -> dict[str, float]:
        row = {f"R1@{k:.1f}": v for k, v in self.r1.items()}
        row["mAP@0.5"] = self.map[0.5]
        row["mAP@0.75"] = self.map[0.75]
        row["mAP_avg"] = self.map_avg
        row["mIoU"] = self.miou
        if self.length_accuracy is not None:
            row["length_acc"] = self.length_accuracy
        row["n_samples"] = self.n_samples
        return row

    def to_json(self, path, extra: dict | None = None) -> None:
        payload = {"scale": self.scale, "metrics": self.flat(), "query_length_std": self.query_std}
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    def to_csv(self, path) -> None:
        row = self.flat()
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)


def evaluate(preds: dict[str, Prediction], gts: dict[str, np.ndarray]) -> MetricsReport:
    aps = mean_ap(preds, gts)
    return MetricsReport(
        r1={th: recall_at_1(preds, gts, th) for th in R1_THRESHOLDS},
        map=aps,
        map_avg=float(np.mean(list(aps.values()))),
        miou=mean_iou(preds, gts),
        n_samples=len(gts),
    )
