import json

import numpy as np
import pytest

from slidegcd.cli import cell_seed, parse_grid, run_cli
from slidegcd.errors import ConfigError

TINY = dict(buffer_size=16, k=3, batch_size=4, embed_dim=8, proj_dim=8, attn_dim=8, warmup_epochs=2,
            total_epochs=4, lr_warmup=2e-3, lr_formal=1e-3,
            synthetic={"slides_per_class": 20, "patches_min": 4, "patches_max": 10, "patch_dim": 8})


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**TINY, "out_dir": str(tmp_path / "run")}))
    return p


@pytest.fixture
def trained(cfg_path, tmp_path):
    assert run_cli(["train", "--config", str(cfg_path)]) == 0
    return tmp_path / "run"


def test_train_outputs(trained):
    assert (trained / "checkpoint.sgck").exists() and (trained / "train_log.jsonl").exists()
    doc = json.loads((trained / "metrics.json").read_text())
    for key in ("accuracy", "macro_f1", "macro_auc", "per_class", "config_hash"):
        assert key in doc
    lines = (trained / "train_log.jsonl").read_text().splitlines()
    assert all({"record", "stage", "lr", "total"} <= set(json.loads(l)) for l in lines)


def test_train_idempotent(cfg_path, tmp_path, trained):
    assert run_cli(["train", "--config", str(cfg_path), "--out", str(tmp_path / "again")]) == 0
    for name in ("checkpoint.sgck", "metrics.json", "train_log.jsonl"):
        assert (tmp_path / "again" / name).read_bytes() == (trained / name).read_bytes()


def test_unknown_flag(capsys):
    assert run_cli(["train", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({**TINY, "lerning_rate": 1, "out_dir": str(tmp_path / "out")}))
    assert run_cli(["train", "--config", str(p)]) == 2
    assert "lerning_rate" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_invalid_config_leaves_nothing(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({**TINY, "k": 0, "out_dir": str(tmp_path / "out")}))
    assert run_cli(["train", "--config", str(p)]) == 2
    assert not (tmp_path / "out").exists()


def test_runtime_failure_exit_1(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**TINY, "buffer_size": 200, "out_dir": str(tmp_path / "out")}))
    assert run_cli(["train", "--config", str(p)]) == 1


def test_eval_and_infer(trained, cfg_path, tmp_path, capsys):
    ck = str(trained / "checkpoint.sgck")
    assert run_cli(["eval", "--checkpoint", ck, "--config", str(cfg_path), "--out", str(tmp_path / "ev")]) == 0
    ev = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    tr = json.loads((trained / "metrics.json").read_text())
    assert ev["accuracy"] == tr["accuracy"] and ev["config_hash"] == tr["config_hash"]
    assert run_cli(["make-synthetic", "--config", str(cfg_path), "--out", str(tmp_path / "data")]) == 0
    capsys.readouterr()
    assert run_cli(["infer", "--checkpoint", ck, "--manifest", str(tmp_path / "data" / "test.tsv")]) == 0
    out = capsys.readouterr().out
    assert "predicted=" in out and out.count("neighbor node=") == 3 * out.count("predicted=")


def test_eval_needs_bags(trained):
    assert run_cli(["eval", "--checkpoint", str(trained / "checkpoint.sgck")]) == 2


def test_corrupt_checkpoint(trained, tmp_path):
    bad = tmp_path / "bad.sgck"
    bad.write_bytes((trained / "checkpoint.sgck").read_bytes()[:100])
    assert run_cli(["eval", "--checkpoint", str(bad), "--manifest", "x"]) == 1


def test_sweep(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert run_cli(["sweep", "--config", str(cfg_path), "--grid", "k=2,3,4", "--out", str(out)]) == 0
    rows = (out / "sweep.tsv").read_text().splitlines()
    header = rows[0].split("\t")
    assert "k" in header and len(rows) == 4
    assert [r.split("\t")[header.index("k")] for r in rows[1:]] == ["2", "3", "4"]
    assert all((out / f"cell_{i:03d}" / "metrics.json").exists() for i in range(3))


def test_sweep_bad_cell_writes_nothing(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert run_cli(["sweep", "--config", str(cfg_path), "--grid", "k=3,99", "--out", str(out)]) == 2
    assert not out.exists()


def test_parse_grid():
    assert parse_grid(["L=8,16", "t=0.5,1"]) == {"buffer_size": [8, 16], "kd_temperature": [0.5, 1.0]}
    with pytest.raises(ConfigError):
        parse_grid(["nope=1"])
    with pytest.raises(ConfigError):
        parse_grid(["k=a"])
    assert cell_seed(0, 1) == cell_seed(0, 1) != cell_seed(0, 2)


def test_export_graph(trained, cfg_path, tmp_path):
    ck = str(trained / "checkpoint.sgck")
    assert run_cli(["export-graph", "--checkpoint", ck, "--out", str(tmp_path / "g")]) == 0
    nodes = (tmp_path / "g" / "nodes.tsv").read_text().splitlines()[1:]
    edges = (tmp_path / "g" / "edges.tsv").read_text().splitlines()[1:]
    assert len(nodes) == len(edges) == 16
    assert all(len(e.split("\t")[2].split(",")) == 4 for e in edges)

    run_cli(["make-synthetic", "--config", str(cfg_path), "--out", str(tmp_path / "data")])
    one = tmp_path / "one.tsv"
    one.write_text((tmp_path / "data" / "test.tsv").read_text().splitlines()[0].replace(
        "bags/", str(tmp_path / "data" / "bags") + "/") + "\n")
    assert run_cli(["export-graph", "--checkpoint", ck, "--out", str(tmp_path / "q"), "--manifest", str(one)]) == 0
    nodes = (tmp_path / "q" / "nodes.tsv").read_text().splitlines()[1:]
    assert len(nodes) == 17 and nodes[-1].split("\t")[1] == "batch"
    assert len((tmp_path / "q" / "edges.tsv").read_text().splitlines()) == 18
