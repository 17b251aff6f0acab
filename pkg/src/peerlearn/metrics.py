"""Scene-level recall metrics: R@K, mR@K, the four-number mean, group stats.

Predictions are ranked by vote score within each scene (ties keep instance
order); an entry counts as recalled at K when it is in its scene's top K and
its predicted label matches the ground truth. One prediction per ground-truth
relation is assumed, which corresponds to the predicate-classification
setting.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError
from .taxonomy import GROUP_ORDER, Group, GroupPartition

DEFAULT_KS = (20, 50, 100)


@dataclass(frozen=True)
class SceneResults:
    """Flat arrays, one entry per evaluated relation instance."""

    scene_ids: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.scene_ids, self.y_true, self.y_pred, self.scores)]
        n = len(arrays[0])
        if any(a.ndim != 1 or len(a) != n for a in arrays):
            raise InputError("scene_ids, y_true, y_pred and scores must be 1-d and equally long")
        for name, a in zip(("scene_ids", "y_true", "y_pred", "scores"), arrays):
            object.__setattr__(self, name, a)

    def __len__(self):
        return len(self.y_true)

    @classmethod
    def from_records(cls, records):
        """Build from ``(scene_id, y_true, y_pred, score)`` tuples."""
        records = list(records)
        if not records:
            return cls(np.array([]), np.array([], int), np.array([], int), np.array([]))
        scene, truth, pred, score = zip(*records)
        return cls(np.asarray(scene), np.asarray(truth, dtype=np.int64),
                   np.asarray(pred, dtype=np.int64), np.asarray(score, dtype=np.float64))


def scene_ranks(scene_ids, scores) -> np.ndarray:
    """0-based rank of each entry within its scene, by descending score.

    Equal scores keep their original order.
    """
    scene_ids = np.asarray(scene_ids)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores, scene_ids))
    ranks = np.empty(len(scores), dtype=np.int64)
    sorted_scenes = scene_ids[order]
    start = 0
    for i in range(1, len(order) + 1):
        if i == len(order) or sorted_scenes[i] != sorted_scenes[start]:
            ranks[order[start:i]] = np.arange(i - start)
            start = i
    return ranks


def _hits(results: SceneResults, k: int) -> np.ndarray:
    if k < 1:
        raise InputError(f"K must be >= 1, got {k}")
    if len(results) == 0:
        raise InputError("no results to evaluate")
    ranks = scene_ranks(results.scene_ids, results.scores)
    return (ranks < k) & (results.y_pred == results.y_true)


def recall_at_k(results: SceneResults, k: int) -> float:
    return 100.0 * float(_hits(results, k).sum()) / len(results)


def per_class_recall(results: SceneResults, k: int, num_classes: int) -> np.ndarray:
    """Recall@K per ground-truth class; NaN for classes absent from the truth."""
    hits = _hits(results, k)
    totals = np.bincount(results.y_true, minlength=num_classes)[:num_classes]
    got = np.bincount(results.y_true, weights=hits, minlength=num_classes)[:num_classes]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, 100.0 * got / np.maximum(totals, 1), np.nan)


def mean_recall_at_k(results: SceneResults, k: int, num_classes: int) -> float:
    """Average of per-class recalls over classes present in the ground truth."""
    return float(np.nanmean(per_class_recall(results, k, num_classes)))


def mean_metric(mr50, mr100, r50, r100) -> float:
    """Average of mR@50, mR@100, R@50, R@100, rounded to two decimals."""
    values = (mr50, mr100, r50, r100)
    for v in values:
        if not 0.0 <= v <= 100.0:
            raise InputError(f"metric {v} outside [0, 100]")
    return round(sum(values) / 4.0, 2)


@dataclass(frozen=True)
class GroupStat:
    mean: float
    variance: float
    n_classes: int


def group_report(per_class, partition: GroupPartition):
    """Mean and population variance of class recalls inside each group.

    Classes with no ground truth (NaN recall) are skipped and returned in the
    second element. A group without any evaluable class is absent from the
    first element rather than reported as zero.
    """
    per_class = np.asarray(per_class, dtype=np.float64)
    if len(per_class) != partition.num_classes:
        raise InputError(
            f"{len(per_class)} class recalls for a {partition.num_classes}-class partition")
    excluded = [c for c in range(len(per_class)) if np.isnan(per_class[c])]
    stats = {}
    for g in GROUP_ORDER:
        vals = np.array([per_class[c] for c in partition.members(g) if not np.isnan(per_class[c])])
        if vals.size:
            stats[g] = GroupStat(float(vals.mean()), float(vals.var()), int(vals.size))
    return stats, excluded


@dataclass
class MetricsReport:
    recall_at: dict
    mean_recall_at: dict
    mean: float
    per_class_recall: list
    group_stats: dict = field(default_factory=dict)
    excluded_classes: list = field(default_factory=list)
    group_k: int = 100

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "mean_recall_at": {str(k): v for k, v in self.mean_recall_at.items()},
            "mean": self.mean,
            "per_class_recall": [None if np.isnan(v) else v for v in self.per_class_recall],
            "group_k": self.group_k,
            "group_stats": {
                g.label: {"mean": s.mean, "variance": s.variance, "n_classes": s.n_classes}
                for g, s in self.group_stats.items()
            },
            "excluded_classes": list(self.excluded_classes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def csv_rows(self):
        rows = [("recall", f"R@{k}", _fmt(v), "") for k, v in self.recall_at.items()]
        rows += [("mean_recall", f"mR@{k}", _fmt(v), "") for k, v in self.mean_recall_at.items()]
        rows.append(("mean", "mean", _fmt(self.mean), ""))
        for g, s in self.group_stats.items():
            rows.append(("group", g.label, _fmt(s.mean), _fmt(s.variance)))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("kind", "name", "value", "variance"))
        writer.writerows(self.csv_rows())
        return buf.getvalue()

    def group_mean(self, group) -> float:
        stat = self.group_stats.get(Group(group))
        return float("nan") if stat is None else stat.mean


def _fmt(v) -> str:
    return f"{v:.4f}"


def evaluate(results: SceneResults, num_classes: int, ks=DEFAULT_KS,
             partition: GroupPartition = None, group_k: int = None) -> MetricsReport:
    """Compute the full report.

    ``mean`` needs K=50 and K=100 among ``ks``; it is NaN otherwise. Group
    statistics use per-class recall at ``group_k`` (default: the largest K).
    """
    ks = tuple(sorted(int(k) for k in ks))
    recall = {k: recall_at_k(results, k) for k in ks}
    mrecall = {k: mean_recall_at_k(results, k, num_classes) for k in ks}
    if 50 in ks and 100 in ks:
        mean = mean_metric(mrecall[50], mrecall[100], recall[50], recall[100])
    else:
        mean = float("nan")
    group_k = group_k or ks[-1]
    pcr = per_class_recall(results, group_k, num_classes)
    stats, excluded = ({}, [c for c in range(num_classes) if np.isnan(pcr[c])])
    if partition is not None:
        stats, excluded = group_report(pcr, partition)
    return MetricsReport(recall, mrecall, mean, [float(v) for v in pcr], stats, excluded, group_k)
