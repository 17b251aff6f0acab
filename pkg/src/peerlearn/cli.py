"""``peerlearn`` command-line interface."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data as D
from .experiment import (
    ExperimentConfig,
    StageError,
    evaluate_model,
    load_or_generate,
    run_experiment,
    stage,
    summary_csv,
    summary_row,
    write_report,
)
from .exceptions import InputError, PeerLearningError
from .metrics import DEFAULT_KS, SceneResults, evaluate
from .peers import load_model, save_model
from .taxonomy import (
    FrequencyPartitioner,
    GroupPartition,
    compute_frequencies,
    format_peer_config,
)
from .voting import batch_vote

logger = logging.getLogger("peerlearn")


def _config(args) -> ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
        raw = cfg.__dict__.copy()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if getattr(args, "peers", None):
        overrides["peers"] = args.peers
    if getattr(args, "data", None):
        overrides["dataset"] = {"path": args.data}
    raw.update(overrides)
    return ExperimentConfig(**raw)


def _ks(text):
    return tuple(int(k) for k in text.split(",")) if text else DEFAULT_KS


def _write(path, text):
    D._ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def cmd_generate(args):
    cfg = _config(args)
    with stage("generate"):
        if "generate" not in cfg.dataset:
            raise InputError("config has no dataset.generate section")
        dataset = load_or_generate(cfg)
        path = os.path.join(cfg.out, "dataset.jsonl")
        D.save_dataset(dataset, path)
        freq = compute_frequencies(dataset.y, dataset.num_classes)
        rows = "class,count\n" + "".join(f"{c},{n}\n" for c, n in enumerate(freq.counts))
        _write(os.path.join(cfg.out, "frequencies.csv"), rows)
    print(f"wrote {len(dataset)} instances to {path}")


def cmd_partition(args):
    cfg = _config(args)
    with stage("partition"):
        dataset = load_or_generate(cfg)
        t_head, t_body = cfg.thresholds
        if args.t_head is not None or args.t_body is not None:
            t_head, t_body = args.t_head, args.t_body
        part = FrequencyPartitioner(t_head, t_body, dataset.num_classes).fit(dataset.y)
        record = part.partition_.to_dict()
        record["counts"] = list(part.frequencies_.counts)
        _write(os.path.join(cfg.out, "partition.json"), json.dumps(record, indent=2) + "\n")
    sizes = part.partition_.sizes()
    print("t_head={} t_body={} ".format(*part.partition_.thresholds)
          + " ".join(f"{g.label}={n}" for g, n in sizes.items()))


def cmd_train(args):
    cfg = _config(args)
    with stage("train"):
        dataset = load_or_generate(cfg)
        model = cfg.make_ensemble(dataset.num_classes).fit(dataset.X, dataset.y)
        path = os.path.join(cfg.out, "model.jsonl")
        save_model(model, path)
    print(f"trained {model.n_peers} peers ({format_peer_config(model.group_sets_)}) -> {path}")


def cmd_predict(args):
    cfg = _config(args)
    with stage("predict"):
        model = load_model(args.model)
        dataset = load_or_generate(cfg)
        path = os.path.join(cfg.out, "predictions.jsonl")
        D.save_predictions(model.prediction_records(dataset), path)
    print(f"wrote {len(dataset)} prediction records to {path}")


def _load_partition(path):
    with open(path, encoding="utf-8") as fh:
        return GroupPartition.from_dict(json.load(fh))


def cmd_vote(args):
    out = getattr(args, "out", None) or "."
    with stage("vote"):
        records = D.load_external_predictions(args.predictions)
        if len(records) == 0:
            raise InputError(f"{args.predictions} holds no prediction records")
        if args.peers_subset:
            records = records.select_peers(int(p) for p in args.peers_subset.split(","))
        partition = _load_partition(args.partition) if args.partition else None
        if partition is not None:
            num_classes = partition.num_classes
        elif args.num_classes:
            num_classes = args.num_classes
        else:
            seen = [records.y_true.max()] + [p.label for v in records.votes for p in v]
            num_classes = int(max(seen)) + 1
        results = batch_vote(records.votes, args.minority_penalty)
        voted = np.array([r.label for r in results], dtype=np.int64)
        scores = np.array([r.score for r in results])
        report = evaluate(SceneResults(records.scene_ids, records.y_true, voted, scores),
                          num_classes, _ks(args.ks), partition)
        write_report(report, out, "vote_report")
        lines = "".join(
            json.dumps({"id": int(i), "label": int(t), "pred": int(p), "score": float(s)},
                       separators=(",", ":")) + "\n"
            for i, t, p, s in zip(records.instance_ids, records.y_true, voted, scores))
        _write(os.path.join(out, "voted.jsonl"), lines)
    print(report.to_json(), end="")
    return report


def cmd_evaluate(args):
    cfg = _config(args)
    with stage("evaluate"):
        model = load_model(args.model)
        dataset = load_or_generate(cfg)
        reports = evaluate_model(model, dataset, _ks(args.ks))
        spec = format_peer_config(model.group_sets_)
        rows = []
        for name, report in reports.items():
            write_report(report, os.path.join(cfg.out, "reports"), name)
            rows.append(summary_row(spec, name, report, _ks(args.ks)))
        text = summary_csv(rows, _ks(args.ks))
        _write(os.path.join(cfg.out, "summary.csv"), text)
    print(text, end="")


def cmd_experiment(args):
    cfg = _config(args)
    result = run_experiment(cfg)
    print(result.summary, end="")
    return result


def build_parser() -> argparse.ArgumentParser:
    # shared flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--peers", default=argparse.SUPPRESS, help="peer spec, e.g. HBT_B_T")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="peerlearn", parents=[common],
                                     description="Peer learning with consensus voting for long-tailed classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic Zipf dataset")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("partition", parents=[common], help="head/body/tail split of a dataset")
    p.add_argument("--data", help="dataset file (overrides the config)")
    p.add_argument("--t-head", type=int)
    p.add_argument("--t-body", type=int)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", parents=[common], help="train a peer ensemble")
    p.add_argument("--data", help="training dataset file (overrides the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write per-peer predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset file to predict (overrides the config)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("vote", parents=[common], help="replay a predictions file through voting")
    p.add_argument("predictions")
    p.add_argument("--ks", default=None, help="comma separated K values (default 20,50,100)")
    p.add_argument("--peers-subset", default=None, help="comma separated peer indices to keep")
    p.add_argument("--partition", default=None, help="partition.json for group statistics")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--minority-penalty", type=float, default=1.0)
    p.set_defaults(func=cmd_vote)

    p = sub.add_parser("evaluate", parents=[common], help="per-peer and voted metrics of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="evaluation dataset file (overrides the config)")
    p.add_argument("--ks", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", parents=[common], help="run the whole pipeline")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"peerlearn {args.command}: error {exc}", file=sys.stderr)
        return 1
    except (PeerLearningError, OSError) as exc:
        print(f"peerlearn {args.command}: error [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
