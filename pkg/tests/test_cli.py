import csv
import json

import pytest
import yaml

from peerlearn import load_dataset, load_external_predictions, load_model
from peerlearn.cli import main

SMALL = {
    "dataset": {"generate": {"num_classes": 9, "instances_total": 900,
                             "scene_size_range": [20, 60], "feature_dim": 6}},
    "train": {"epochs": 3, "batch_size": 128, "momentum": 0.9},
    "seed": 3,
}


def write_config(tmp_path, **changes):
    cfg = {**SMALL, **changes}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "g")]) == 0
    ds = load_dataset(tmp_path / "g" / "dataset.jsonl")
    assert len(ds) == 900 and ds.num_classes == 9
    rows = read_csv(tmp_path / "g" / "frequencies.csv")
    assert sum(int(r["count"]) for r in rows) == 900
    assert "900 instances" in capsys.readouterr().out


def test_global_flags_before_or_after_subcommand(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", cfg, "--seed", "5", "--out", str(a), "generate"]) == 0
    assert main(["generate", "--config", cfg, "--seed", "5", "--out", str(b)]) == 0
    assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    assert (a / "dataset.jsonl").read_bytes() != (tmp_path / "c" / "dataset.jsonl").read_bytes()


def test_partition_thresholds(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "p"
    assert main(["partition", "--config", cfg, "--out", str(out),
                 "--t-head", "100", "--t-body", "20"]) == 0
    record = json.loads((out / "partition.json").read_text())
    assert (record["t_head"], record["t_body"]) == (100, 20)
    for count, letter in zip(record["counts"], record["groups"]):
        assert letter == ("H" if count >= 100 else "B" if count >= 20 else "T")
    assert capsys.readouterr().out.startswith("t_head=100 t_body=20")


def test_partition_bad_thresholds(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(["partition", "--config", cfg, "--out", str(tmp_path),
                 "--t-head", "5", "--t-body", "9"])
    assert code == 1
    assert "[partition]" in capsys.readouterr().err


def test_train_predict_evaluate(tmp_path):
    cfg = write_config(tmp_path)
    gen = tmp_path / "gen"
    assert main(["generate", "--config", cfg, "--out", str(gen)]) == 0
    data = str(gen / "dataset.jsonl")
    assert main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path / "m"),
                 "--peers", "HBT_T"]) == 0
    model_path = str(tmp_path / "m" / "model.jsonl")
    assert load_model(model_path).n_peers == 2

    assert main(["predict", "--model", model_path, "--data", data,
                 "--out", str(tmp_path / "pr")]) == 0
    rec = load_external_predictions(tmp_path / "pr" / "predictions.jsonl")
    assert len(rec) == 900 and all(len(v) == 2 for v in rec.votes)

    assert main(["evaluate", "--model", model_path, "--data", data, "--ks", "5,10",
                 "--out", str(tmp_path / "ev")]) == 0
    rows = read_csv(tmp_path / "ev" / "summary.csv")
    assert [r["model"] for r in rows] == ["peer0", "peer1", "pscv"]
    assert {"mR@5", "mR@10", "R@5", "R@10"} <= set(rows[0])
    assert (tmp_path / "ev" / "reports" / "pscv.json").exists()


def test_predict_missing_model(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code = main(["predict", "--config", cfg, "--model", str(tmp_path / "nope.jsonl")])
    assert code == 1
    assert "peerlearn predict: error [predict]" in capsys.readouterr().err


UNANIMOUS = (
    '{"id":0,"scene":0,"label":1,"votes":[[1,0.2],[1,0.7],[1,0.4]]}\n'
    '{"id":1,"scene":0,"label":0,"votes":[[0,0.9],[0,0.5],[0,0.6]]}\n'
)

HAND_TRACE = (
    '{"id":0,"scene":0,"label":3,"votes":[[3,0.2],[3,0.5],[3,0.4]]}\n'
    '{"id":1,"scene":0,"label":2,"votes":[[2,0.3],[2,0.8],[5,0.6]]}\n'
    '{"id":2,"scene":1,"label":2,"votes":[[2,0.3],[2,0.4],[5,0.9]]}\n'
)


def voted(out):
    return [json.loads(line) for line in (out / "voted.jsonl").read_text().splitlines()]


def test_vote_unanimous(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(UNANIMOUS)
    assert main(["vote", str(path), "--out", str(tmp_path)]) == 0
    assert [(r["pred"], r["score"]) for r in voted(tmp_path)] == [(1, 0.7), (0, 0.9)]
    report = json.loads((tmp_path / "vote_report.json").read_text())
    assert report["recall_at"]["20"] == 100.0


def test_vote_hand_traces(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(HAND_TRACE)
    assert main(["vote", str(path), "--out", str(tmp_path), "--num-classes", "6"]) == 0
    assert [(r["pred"], r["score"]) for r in voted(tmp_path)] == [(3, 0.5), (2, 0.8), (5, 0.9)]


def test_vote_peers_subset(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(HAND_TRACE)
    assert main(["vote", str(path), "--out", str(tmp_path), "--peers-subset", "0,2"]) == 0
    # peers 0 and 2 only: trace 2 becomes {2: 0.3, 5: 0.6}
    assert [(r["pred"], r["score"]) for r in voted(tmp_path)] == [(3, 0.4), (5, 0.6), (5, 0.9)]


def test_vote_empty_file(tmp_path, capsys):
    path = tmp_path / "p.jsonl"
    path.write_text("")
    assert main(["vote", str(path), "--out", str(tmp_path)]) == 1
    assert "[vote]" in capsys.readouterr().err


def test_vote_malformed_line(tmp_path, capsys):
    path = tmp_path / "p.jsonl"
    path.write_text(HAND_TRACE + "{oops\n")
    assert main(["vote", str(path), "--out", str(tmp_path)]) == 1
    assert "p.jsonl:4: malformed record" in capsys.readouterr().err


def test_experiment_outputs(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["experiment", "--config", cfg, "--out", str(out)]) == 0
    rows = read_csv(out / "summary.csv")
    assert [r["model"] for r in rows] == ["baseline", "peer0", "peer1", "peer2", "pscv"]
    assert rows[0]["config"] == "CE" and rows[-1]["config"] == "HBT_B_T"
    for name in ("dataset.jsonl", "model.jsonl", "partition.json", "predictions.jsonl"):
        assert (out / name).exists()
    # the stored predictions replay to the same voted metrics
    assert main(["vote", str(out / "predictions.jsonl"), "--out", str(tmp_path / "replay"),
                 "--partition", str(out / "partition.json")]) == 0
    replay = read_csv(tmp_path / "replay" / "vote_report.csv")
    original = read_csv(out / "reports" / "pscv.csv")
    assert replay == original


def test_experiment_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["experiment", "--config", cfg, "--out", str(a)]) == 0
    assert main(["experiment", "--config", cfg, "--out", str(b)]) == 0
    for rel in sorted(p.relative_to(a) for p in a.rglob("*.csv")):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


@pytest.mark.parametrize("spec", ["H_B_T", "HBT_B_T", "HBT_BT_T", "HB_HT_BT", "HBT_HT_BT",
                                  "HBT_T", "HBT_B", "HBT_H_B_T", "HBT_HB_BT_HT"])
def test_every_peer_config_runs(tmp_path, spec):
    cfg = write_config(tmp_path, train={"epochs": 1, "batch_size": 256})
    out = tmp_path / "run"
    assert main(["experiment", "--config", cfg, "--peers", spec, "--out", str(out)]) == 0
    rows = read_csv(out / "summary.csv")
    n_peers = spec.count("_") + 1
    assert len(rows) == n_peers + 2
    assert {r["config"] for r in rows[1:]} == {spec}


def test_experiment_mixed_losses(tmp_path):
    cfg = write_config(tmp_path, losses=["cross_entropy", "focal", "ldam"])
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    model = load_model(tmp_path / "run" / "model.jsonl")
    assert [p.loss for p in model.estimators_] == ["cross_entropy", "focal", "ldam"]


@pytest.mark.parametrize("changes,needle", [
    ({"peers": "HBX"}, "unknown group letter"),
    ({"partition": {"mode": "quantile"}}, "partition mode"),
    ({"train": {"epoch": 3}}, "unknown train keys"),
    ({"bogus": 1}, "unknown config keys"),
])
def test_config_errors(tmp_path, capsys, changes, needle):
    cfg = write_config(tmp_path, **changes)
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    assert needle in capsys.readouterr().err


def test_uncovered_class_is_a_train_stage_error(tmp_path, capsys):
    cfg = write_config(tmp_path, peers="H_B")
    assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    err = capsys.readouterr().err
    assert "[train]" in err and "without a peer" in err
