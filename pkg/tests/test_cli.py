import json

import numpy as np
import pytest
import yaml

from abrforge.cli import EXIT_CONFIG, EXIT_INFRA, EXIT_OK, main

TINY = {
    "generation": {"n": 6},
    "training": {"n_epochs": 20, "ckpt_interval": 2, "n_seeds": 2, "n_chunks": 6},
    "early_stop": {"prefix_epochs": 10, "length": 10},
}


def write_config(path, name, kind="state", **extra):
    doc = {"name": name, "output_dir": name, **TINY, **extra}
    doc["generation"] = {**doc["generation"], "kind": kind}
    path.write_text(yaml.safe_dump(doc))
    return path


def test_generate_and_filter(tmp_path, capsys):
    assert main(["generate", "--kind", "state", "--n", "50", "--out", str(tmp_path / "corpus")]) == EXIT_OK
    assert "50 parsed, 0 failed of 50 requested" in capsys.readouterr().out
    rc = main(["filter", str(tmp_path / "corpus"), "--out", str(tmp_path / "f.json")])
    out = capsys.readouterr().out
    assert rc == EXIT_OK and "30 (60.0%)" in out and "18 (36.0%)" in out
    assert json.loads((tmp_path / "f.json").read_text())["summary"]["compilable"] == 30


def test_replay_miss_is_infrastructure(tmp_path, capsys):
    rc = main(["generate", "--kind", "state", "--n", "1", "--store", str(tmp_path / "none.jsonl"),
               "--out", str(tmp_path / "c")])
    assert rc == EXIT_INFRA and "infrastructure" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["campaign", str(tmp_path / "absent.yaml")]) == EXIT_CONFIG


def test_campaign_missing_dataset(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", "bad", dataset="missing.yaml")
    assert main(["campaign", str(cfg)]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "bad").exists()


def test_train_then_score(tmp_path, capsys):
    rc = main(["train", "--epochs", "20", "--ckpt-interval", "2", "--seeds", "0", "1",
               "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert rc == EXIT_OK and "final score" in out
    logs = sorted(str(p) for p in tmp_path.glob("*@*.jsonl") if not p.name.endswith(".summary.json"))
    logs = [p for p in logs if ".summary" not in p]
    assert len(logs) == 2 and len(list((tmp_path / "checkpoints").glob("*.npz"))) == 20
    assert main(["score", *logs, "--baseline", "1.0"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["per_seed"]) == {"0", "1"} and doc["improvement"].endswith("%")


def test_score_refuses_short_logs(tmp_path, capsys):
    log = tmp_path / "r.jsonl"
    log.write_text("".join(json.dumps({"epoch": i, "test_eval": 1.0}) + "\n" for i in range(3)))
    assert main(["score", str(log)]) == EXIT_CONFIG


def test_cv_synthetic(tmp_path, capsys):
    rc = main(["cv", "--synthetic", "300", "--prefix-epochs", "20", "--length", "20",
               "--methods", "heuristic_max", "heuristic_last", "--out", str(tmp_path / "cv.json")])
    out = capsys.readouterr().out
    assert rc == EXIT_OK and "True negative rate" in out
    assert [d["method"] for d in json.loads((tmp_path / "cv.json").read_text())] == \
        ["heuristic_max", "heuristic_last"]


def test_ingest(tmp_path, capsys):
    src = tmp_path / "raw"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(5):
        rows = "\n".join(f"{t} {rng.uniform(1, 5):.3f}" for t in range(30))
        (src / f"trace{i}.txt").write_text(rows + "\n")
    (src / "junk.txt").write_text("not a trace\n")
    rc = main(["ingest", str(src), "--name", "mini", "--out", str(tmp_path / "ds"), "--scale", "starlink"])
    assert rc == EXIT_OK and "mini" in capsys.readouterr().out
    assert (tmp_path / "ds" / "manifest.yaml").exists()


def test_state_and_network_campaigns_then_combine(tmp_path, capsys):
    s_cfg = write_config(tmp_path / "s.yaml", "states")
    n_cfg = write_config(tmp_path / "n.yaml", "nets", kind="network")
    assert main(["campaign", str(s_cfg)]) == EXIT_OK
    assert main(["campaign", str(n_cfg), "--workers", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "(original)" in out
    nets = json.loads((tmp_path / "nets" / "reports" / "filter_table.json").read_text())
    assert nets["well_normalized"] is None
    rc = main(["combine", "--states", str(tmp_path / "states"), "--networks", str(tmp_path / "nets"),
               "--k", "1", "--dry-run", "--out", str(tmp_path / "dry")])
    assert rc == EXIT_OK and "1 combination jobs" in capsys.readouterr().out
    rc = main(["combine", "--states", str(tmp_path / "states"), "--networks", str(tmp_path / "nets"),
               "--k", "1", "--out", str(tmp_path / "comb")])
    assert rc == EXIT_CONFIG
    rc = main(["combine", "--states", str(tmp_path / "states"), "--networks", str(tmp_path / "nets"),
               "--k", "1", "--config", str(s_cfg), "--out", str(tmp_path / "comb")])
    assert rc == EXIT_OK
    scores = json.loads((tmp_path / "comb" / "combination_scores.json").read_text())
    assert len(scores["scores"]) + len(scores["stopped"]) + len(scores["failed"]) == 1
    rc = main(["combine", "--states", str(tmp_path / "states"), "--networks", str(tmp_path / "nets"),
               "--k", "99", "--dry-run", "--out", str(tmp_path / "dry2")])
    assert rc == EXIT_CONFIG and "scored states" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "states"), "--style", "improvement_table"]) == EXIT_OK
    assert "Impr." in capsys.readouterr().out
