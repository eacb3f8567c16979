import csv
import json

import pytest
import yaml

from gavebid.cli import MANIFEST_NAME, main

TINY = {
    "env": {"num_steps": 6, "impressions_mean": 15, "num_agents": 3},
    "data": {"episodes": 2},
    "model": {"layers": 1, "heads": 2, "width": 8, "context": 2, "max_timestep": 6},
    "train": {"max_steps": 6, "batch_size": 4, "checkpoint_every": 3},
    "eval": {"rounds": 1},
    "suite": {"seeds": [0, 1], "select_checkpoint": False},
}


@pytest.fixture()
def cfg_path(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def _manifests(d):
    return list(d.glob(MANIFEST_NAME))


@pytest.fixture()
def dataset(tmp_path, cfg_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def test_gen_data(tmp_path, cfg_path, dataset):
    lines = (dataset / "trajectories.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 3
    assert all(len(json.loads(l)["actions"]) == 6 for l in lines)
    assert len(_manifests(dataset)) == 1
    again = tmp_path / "again"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(again)]) == 0
    for name in ("trajectories.jsonl", "manifest.json"):
        assert (again / name).read_bytes() == (dataset / name).read_bytes()


def test_gen_data_default_horizon(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"env": {"impressions_mean": 5, "num_agents": 2}, "data": {"episodes": 1}}))
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == 0
    rec = json.loads((tmp_path / "d" / "trajectories.jsonl").read_text().splitlines()[0])
    assert len(rec["actions"]) == 48


def test_invalid_config(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"env": {"num_steps": 0}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text(yaml.safe_dump({"nonsense": {}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text(":\n  - [unclosed")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert main(["frobnicate"]) == 2


def test_train_and_eval(tmp_path, cfg_path, dataset):
    tr = tmp_path / "train"
    assert main(["train", "--config", str(cfg_path), "--data", str(dataset), "--out", str(tr),
                 "--variant", "dt"]) == 0
    assert (tr / "metrics.csv").read_text().splitlines()[0] == "step,L_r,L_a,L_o"
    assert json.loads((tr / "final.json").read_text())["meta"]["variant"] == "dt"
    assert len(_manifests(tr)) == 1

    ev = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(tr), "--budget-ratio", "0.5,1.0,1.5",
                 "--out", str(ev)]) == 0
    rows = list(csv.DictReader((ev / "report.csv").open()))
    assert len(rows) == 3
    for r in rows:
        assert float(r["score"]) <= float(r["value"]) + 1e-9
        assert r["env_hash"] and r["eval_hash"]
    slots = list(csv.DictReader((ev / "slots.csv").open()))
    assert all(float(r["score"]) <= float(r["value"]) + 1e-9 for r in slots)

    ev2 = tmp_path / "eval2"
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(tr / "final.json"), "--budget-ratio", "1.0",
                 "--oracle", "--out", str(ev2)]) == 0
    rows = list(csv.DictReader((ev2 / "report.csv").open()))
    assert [r["label"] for r in rows] == ["dt", "oracle"]


def test_train_refusals(tmp_path, cfg_path, dataset):
    assert main(["train", "--config", str(cfg_path), "--data", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "t")]) == 2
    other = tmp_path / "other.yaml"
    cfg = json.loads(json.dumps(TINY))
    cfg["model"]["context"] = 4
    other.write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(other), "--data", str(dataset), "--out", str(tmp_path / "t")]) == 2


def test_eval_refusals(tmp_path, cfg_path, dataset):
    tr = tmp_path / "train"
    assert main(["train", "--config", str(cfg_path), "--data", str(dataset), "--out", str(tr)]) == 0
    other = tmp_path / "other.yaml"
    cfg = json.loads(json.dumps(TINY))
    cfg["model"]["context"] = 4
    other.write_text(yaml.safe_dump(cfg))
    assert main(["eval", "--config", str(other), "--checkpoint", str(tr), "--out", str(tmp_path / "e")]) == 2
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "e")]) == 2
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(tr), "--budget-ratio", "a,b"]) == 2


def test_ablate_and_align(tmp_path, cfg_path, dataset):
    ab = tmp_path / "ablate"
    assert main(["ablate", "--config", str(cfg_path), "--data", str(dataset), "--out", str(ab)]) == 0
    rows = list(csv.DictReader((ab / "ablation_runs.csv").open()))
    assert len(rows) == 4 * 2
    assert {r["variant"] for r in rows} == {"gave", "gave-v", "gave-va", "dt"}
    assert all(r["config_hash"] for r in rows)
    al = tmp_path / "align"
    assert main(["align", "--config", str(cfg_path), "--data", str(dataset), "--out", str(al)]) == 0
    lines = (al / "alignment.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].split(",")[:4] == ["train\\eval", "S1", "S2", "S3"]
    assert all(l.split(",")[-1] for l in lines[1:])
    assert len(_manifests(al)) == 1


def test_flags_override_file_and_env_root(tmp_path, cfg_path, monkeypatch):
    monkeypatch.setenv("GAVEBID_OUT", str(tmp_path / "root"))
    assert main(["gen-data", "--config", str(cfg_path), "--seed", "9", "--variant", "S3"]) == 0
    (out,) = (tmp_path / "root").iterdir()
    man = json.loads((out / MANIFEST_NAME).read_text())
    assert man["config"]["data"]["seed"] == 9 and man["config"]["data"]["variant"] == "S3"
    assert man["config"]["data"]["episodes"] == 2  # from the file
    assert man["config"]["train"]["learning_rate"] == 3e-4  # default
    assert man["seeds"] == {"data": 9} and man["command"] == "gen-data" and man["tool_version"]
    ds = json.loads((out / "manifest.json").read_text())
    assert ds["score_config"]["variant"] == "S3"
