"""Experiment configuration and the end-to-end pipeline behind ``peerlearn experiment``."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .data import (
    LabeledDataset,
    ZipfSpec,
    generate_dataset,
    load_dataset,
    save_dataset,
    save_predictions,
    stratified_split,
)
from .exceptions import ConfigError, PeerLearningError
from .metrics import DEFAULT_KS, MetricsReport, SceneResults, evaluate
from .peers import PeerClassifier, PeerLearningClassifier, save_model
from .taxonomy import GROUP_ORDER, format_peer_config, parse_peer_config

TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "weight_decay", "momentum",
              "hidden_units")
DEFAULT_TRAIN = {"epochs": 30, "batch_size": 64, "learning_rate": 0.1, "weight_decay": 0.0,
                 "momentum": 0.9, "hidden_units": 0}


class StageError(PeerLearningError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except (PeerLearningError, OSError, ValueError, KeyError, TypeError) as exc:
        raise StageError(name, exc) from exc


@dataclass
class ExperimentConfig:
    """Every knob of one experiment.

    ``dataset`` is either ``{"generate": {...ZipfSpec fields...}}`` or
    ``{"path": "file.jsonl"}``. ``partition`` is ``{"mode": "tertile"}`` or
    ``{"mode": "threshold", "t_head": int, "t_body": int}``.
    """

    dataset: dict = field(default_factory=lambda: {"generate": {}})
    partition: dict = field(default_factory=lambda: {"mode": "tertile"})
    peers: str = "HBT_B_T"
    losses: object = "cross_entropy"
    alphas: Optional[list] = None
    train: dict = field(default_factory=dict)
    ks: tuple = DEFAULT_KS
    test_fraction: float = 0.2
    minority_penalty: float = 1.0
    out: str = "runs/experiment"
    seed: int = 0

    def __post_init__(self):
        parse_peer_config(self.peers)
        unknown = set(self.train) - set(TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        self.train = {**DEFAULT_TRAIN, **self.train}
        mode = self.partition.get("mode", "tertile")
        if mode not in ("tertile", "threshold"):
            raise ConfigError(f"partition mode must be 'tertile' or 'threshold', got {mode!r}")
        if mode == "threshold" and not {"t_head", "t_body"} <= set(self.partition):
            raise ConfigError("threshold partition needs t_head and t_body")
        if ("generate" in self.dataset) == ("path" in self.dataset):
            raise ConfigError("dataset needs exactly one of 'generate' or 'path'")
        self.ks = tuple(int(k) for k in self.ks)

    @property
    def thresholds(self):
        if self.partition.get("mode", "tertile") == "tertile":
            return None, None
        return int(self.partition["t_head"]), int(self.partition["t_body"])

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d or {})
        evaluation = d.pop("eval", {}) or {}
        voting = d.pop("voting", {}) or {}
        if "ks" in evaluation:
            d["ks"] = evaluation["ks"]
        if "test_fraction" in evaluation:
            d["test_fraction"] = evaluation["test_fraction"]
        if "minority_penalty" in voting:
            d["minority_penalty"] = voting["minority_penalty"]
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def zipf_spec(self) -> ZipfSpec:
        params = dict(self.dataset["generate"] or {})
        params.setdefault("seed", self.seed)
        return ZipfSpec.from_dict(params)

    def make_ensemble(self, num_classes=None) -> PeerLearningClassifier:
        t_head, t_body = self.thresholds
        return PeerLearningClassifier(
            peers=self.peers, losses=self.losses, alphas=self.alphas, t_head=t_head,
            t_body=t_body, num_classes=num_classes, minority_penalty=self.minority_penalty,
            random_state=self.seed, **self.train)

    def make_baseline(self, num_classes) -> PeerClassifier:
        return PeerClassifier(loss="cross_entropy", classes=range(num_classes),
                              random_state=self.seed, **self.train)


def load_or_generate(config: ExperimentConfig) -> LabeledDataset:
    if "path" in config.dataset:
        return load_dataset(config.dataset["path"])
    return generate_dataset(config.zipf_spec())


def summary_row(config_str, model_name, report: MetricsReport, ks) -> list:
    def fmt(v):
        return "" if v is None or np.isnan(v) else f"{v:.4f}"

    row = [config_str, model_name]
    row += [fmt(report.mean_recall_at.get(k)) for k in ks]
    row += [fmt(report.recall_at.get(k)) for k in ks]
    row.append(fmt(report.mean))
    for g in GROUP_ORDER:
        s = report.group_stats.get(g)
        row += [fmt(s.mean), fmt(s.variance)] if s else ["", ""]
    return row


def summary_csv(rows, ks=DEFAULT_KS) -> str:
    header = ["config", "model"] + [f"mR@{k}" for k in ks] + [f"R@{k}" for k in ks] + [
        "mean", "head", "head_var", "body", "body_var", "tail", "tail_var"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_report(report: MetricsReport, out_dir, name) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out_dir, f"{name}.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())


def evaluate_model(model: PeerLearningClassifier, test: LabeledDataset, ks=DEFAULT_KS) -> dict:
    """Reports for every peer on its own and for the voted ensemble."""
    k = len(model.classes_)
    reports = {}
    labels, conf = model.predict_peers(test.X)
    for i in range(model.n_peers):
        res = SceneResults(test.scene_ids, test.y, labels[:, i], conf[:, i])
        reports[f"peer{i}"] = evaluate(res, k, ks, model.partition_)
    voted, scores = model.vote(test.X)
    reports["pscv"] = evaluate(SceneResults(test.scene_ids, test.y, voted, scores),
                               k, ks, model.partition_)
    return reports


@dataclass
class ExperimentResult:
    reports: dict
    summary: str
    model: PeerLearningClassifier
    baseline: PeerClassifier


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Generate or load data, split, train baseline and peers, vote, evaluate, write files."""
    out_dir = out_dir or config.out
    with stage("data"):
        dataset = load_or_generate(config)
        os.makedirs(out_dir, exist_ok=True)
        if "generate" in config.dataset:
            save_dataset(dataset, os.path.join(out_dir, "dataset.jsonl"))
        train, test = stratified_split(dataset, config.test_fraction, config.seed)
    k = dataset.num_classes
    with stage("train"):
        model = config.make_ensemble(num_classes=k).fit(train.X, train.y)
        baseline = config.make_baseline(k).fit(train.X, train.y)
        save_model(model, os.path.join(out_dir, "model.jsonl"))
        with open(os.path.join(out_dir, "partition.json"), "w", encoding="utf-8") as fh:
            json.dump(model.partition_.to_dict(), fh, indent=2)
            fh.write("\n")
    with stage("predict"):
        save_predictions(model.prediction_records(test), os.path.join(out_dir, "predictions.jsonl"))
    with stage("evaluate"):
        reports = {}
        b_labels, b_conf = baseline.predict_with_confidence(test.X)
        reports["baseline"] = evaluate(SceneResults(test.scene_ids, test.y, b_labels, b_conf),
                                       k, config.ks, model.partition_)
        reports.update(evaluate_model(model, test, config.ks))
        spec = format_peer_config(model.group_sets_)
        rows = []
        for name, report in reports.items():
            write_report(report, os.path.join(out_dir, "reports"), name)
            rows.append(summary_row("CE" if name == "baseline" else spec, name, report, config.ks))
        summary = summary_csv(rows, config.ks)
        with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8") as fh:
            fh.write(summary)
    return ExperimentResult(reports, summary, model, baseline)
