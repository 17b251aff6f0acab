"""Synthetic long-tailed datasets and the line-delimited JSON file formats.

Every file starts with a one-line JSON header carrying a ``format`` tag and a
``version``; each following line is one JSON record. See README.md for the
field lists.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .exceptions import ConfigError, InputError, ParseError
from .voting import PeerPrediction

DATASET_FORMAT = "peerlearn-dataset"
PREDICTIONS_FORMAT = "peerlearn-predictions"
FORMAT_VERSION = 1


class SchemaError(ParseError):
    """A well-formed record that disagrees with its file header."""


@dataclass(eq=False)
class LabeledDataset:
    instance_ids: np.ndarray
    scene_ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        self.scene_ids = np.asarray(self.scene_ids, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        n = len(self.y)
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise InputError(f"X must have shape ({n}, feature_dim), got {self.X.shape}")
        if len(self.instance_ids) != n or len(self.scene_ids) != n:
            raise InputError("instance_ids, scene_ids and y must be equally long")
        bad = np.flatnonzero((self.y < 0) | (self.y >= self.num_classes))
        if bad.size:
            i = int(bad[0])
            raise InputError(
                f"instance {self.instance_ids[i]} has label {self.y[i]} "
                f"outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.instance_ids[index], self.scene_ids[index],
                              self.X[index], self.y[index], self.num_classes)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and self.X.shape == other.X.shape
                and np.array_equal(self.instance_ids, other.instance_ids)
                and np.array_equal(self.scene_ids, other.scene_ids)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.X, other.X))


@dataclass(frozen=True)
class ZipfSpec:
    num_classes: int = 20
    zipf_exponent: float = 2.0
    instances_total: int = 10_000
    scene_size_range: Tuple[int, int] = (8, 32)
    feature_dim: int = 16
    class_separation: float = 3.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scene_size_range", tuple(int(v) for v in self.scene_size_range))
        if self.num_classes < 3:
            raise ConfigError("num_classes must be >= 3 for a head/body/tail split")
        if self.instances_total < self.num_classes:
            raise ConfigError("instances_total must be >= num_classes")
        if self.zipf_exponent <= 0:
            raise ConfigError("zipf_exponent must be > 0")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.class_separation <= 0 or self.noise_scale <= 0:
            raise ConfigError("class_separation and noise_scale must be > 0")
        lo, hi = self.scene_size_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"infeasible scene_size_range {self.scene_size_range}")

    @classmethod
    def from_dict(cls, d) -> "ZipfSpec":
        return cls(**dict(d))


def zipf_probabilities(num_classes: int, exponent: float) -> np.ndarray:
    """Class probabilities proportional to ``1 / rank**exponent`` (class 0 = rank 1)."""
    w = np.arange(1, num_classes + 1, dtype=np.float64) ** -float(exponent)
    return w / w.sum()


def generate_dataset(spec: ZipfSpec) -> LabeledDataset:
    """Draw a seeded long-tailed dataset of Gaussian class clusters grouped in scenes."""
    rng = np.random.default_rng(spec.seed)
    k, n, d = spec.num_classes, spec.instances_total, spec.feature_dim
    labels = rng.choice(k, size=n, p=zipf_probabilities(k, spec.zipf_exponent))
    directions = rng.normal(size=(k, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = spec.class_separation * directions
    X = means[labels] + spec.noise_scale * rng.normal(size=(n, d))
    lo, hi = spec.scene_size_range
    scene_ids = np.empty(n, dtype=np.int64)
    start, scene = 0, 0
    # the final scene may come out smaller than lo
    while start < n:
        size = int(rng.integers(lo, hi + 1))
        scene_ids[start:start + size] = scene
        start += size
        scene += 1
    return LabeledDataset(np.arange(n), scene_ids, X, labels, k)


def stratified_split(dataset: LabeledDataset, test_fraction=0.2, seed=0):
    """Seeded per-class train/test split.

    Each class with at least two instances sends ``round(test_fraction * n)``
    of them (at least one, at most ``n - 1``) to the test side; singleton
    classes stay in training. Both sides keep the original instance order.
    """
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(dataset), dtype=bool)
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.y == c)
        if len(idx) < 2:
            continue
        n_test = min(max(int(round(test_fraction * len(idx))), 1), len(idx) - 1)
        test_mask[rng.permutation(idx)[:n_test]] = True
    return dataset.subset(np.flatnonzero(~test_mask)), dataset.subset(np.flatnonzero(test_mask))


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def _ensure_parent(path):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def save_dataset(dataset: LabeledDataset, path) -> None:
    _ensure_parent(path)
    header = {"format": DATASET_FORMAT, "version": FORMAT_VERSION,
              "num_classes": dataset.num_classes, "feature_dim": dataset.feature_dim,
              "num_instances": len(dataset)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps(header) + "\n")
        for i in range(len(dataset)):
            rec = {"id": int(dataset.instance_ids[i]), "scene": int(dataset.scene_ids[i]),
                   "label": int(dataset.y[i]), "x": [float(v) for v in dataset.X[i]]}
            fh.write(_dumps(rec) + "\n")


def _parse_line(line, lineno, path):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{lineno}: malformed record ({exc.msg})", lineno) from None
    if not isinstance(obj, dict):
        raise ParseError(f"{path}:{lineno}: expected a JSON object", lineno)
    return obj


def _read_header(lines, path, fmt):
    if not lines:
        raise ParseError(f"{path}: empty file, expected a {fmt} header", 1)
    header = _parse_line(lines[0], 1, path)
    if header.get("format") != fmt:
        raise SchemaError(f"{path}:1: expected format {fmt!r}, got {header.get('format')!r}", 1)
    if header.get("version") != FORMAT_VERSION:
        raise SchemaError(f"{path}:1: unsupported version {header.get('version')!r}", 1)
    return header


def load_dataset(path) -> LabeledDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = _read_header(lines, path, DATASET_FORMAT)
    try:
        k, d = int(header["num_classes"]), int(header["feature_dim"])
    except (KeyError, TypeError, ValueError):
        raise SchemaError(f"{path}:1: header needs integer num_classes and feature_dim", 1) from None
    ids, scenes, labels, rows = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = _parse_line(line, lineno, path)
        try:
            x = [float(v) for v in rec["x"]]
            ids.append(int(rec["id"]))
            scenes.append(int(rec["scene"]))
            label = int(rec["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: bad or missing field ({exc})", lineno) from None
        if len(x) != d:
            raise SchemaError(f"{path}:{lineno}: {len(x)} features, header says {d}", lineno)
        if not 0 <= label < k:
            raise SchemaError(f"{path}:{lineno}: label {label} outside [0, {k})", lineno)
        labels.append(label)
        rows.append(x)
    expected = header.get("num_instances")
    if expected is not None and expected != len(labels):
        raise ParseError(
            f"{path}:{len(lines) + 1}: file truncated, header promises {expected} "
            f"records, found {len(labels)}", len(lines) + 1)
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), d)
    return LabeledDataset(np.asarray(ids), np.asarray(scenes), X, np.asarray(labels), k)


@dataclass
class PredictionRecords:
    """Per-instance peer votes replayed from a file (or produced by a model)."""

    instance_ids: np.ndarray
    scene_ids: np.ndarray
    y_true: np.ndarray
    votes: list = field(default_factory=list)

    def __len__(self):
        return len(self.votes)

    def select_peers(self, peers) -> "PredictionRecords":
        peers = list(peers)
        votes = []
        for i, v in enumerate(self.votes):
            try:
                votes.append([v[p] for p in peers])
            except IndexError:
                raise InputError(
                    f"record {self.instance_ids[i]} has {len(v)} peers; cannot select {peers}") from None
        return PredictionRecords(self.instance_ids, self.scene_ids, self.y_true, votes)


def save_predictions(records: PredictionRecords, path) -> None:
    _ensure_parent(path)
    n_peers = len(records.votes[0]) if records.votes else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps({"format": PREDICTIONS_FORMAT, "version": FORMAT_VERSION,
                         "num_peers": n_peers}) + "\n")
        for i, votes in enumerate(records.votes):
            rec = {"id": int(records.instance_ids[i]), "scene": int(records.scene_ids[i]),
                   "label": int(records.y_true[i]),
                   "votes": [[int(p.label), float(p.confidence)] for p in votes]}
            fh.write(_dumps(rec) + "\n")


def load_external_predictions(path) -> PredictionRecords:
    """Read a predictions file.

    The header line is optional and an empty file yields zero records.
    Records without ``scene`` become their own one-instance scene (scene id =
    instance id).
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    ids, scenes, truths, votes = [], [], [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        rec = _parse_line(line, lineno, path)
        if "format" in rec:
            if lineno != 1 or rec["format"] != PREDICTIONS_FORMAT:
                raise SchemaError(f"{path}:{lineno}: unexpected header {rec!r}", lineno)
            continue
        try:
            iid = int(rec["id"])
            truth = int(rec["label"])
            pairs = [PeerPrediction(int(lab), float(conf)) for lab, conf in rec["votes"]]
            scene = int(rec.get("scene", iid))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: bad or missing field ({exc})", lineno) from None
        if not pairs:
            raise SchemaError(f"{path}:{lineno}: record {iid} carries no votes", lineno)
        for p in pairs:
            if not (np.isfinite(p.confidence) and 0.0 < p.confidence <= 1.0):
                raise InputError(
                    f"{path}:{lineno}: record {iid} has confidence {p.confidence} outside (0, 1]")
        ids.append(iid)
        scenes.append(scene)
        truths.append(truth)
        votes.append(pairs)
    return PredictionRecords(np.asarray(ids, dtype=np.int64), np.asarray(scenes, dtype=np.int64),
                             np.asarray(truths, dtype=np.int64), votes)
