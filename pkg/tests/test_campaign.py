import json
import shutil

import pytest
import yaml

from abrforge.campaign import (AccountingError, CampaignConfig, CampaignLedger, ConfigError, combine_top,
                               emit_reports, format_combination_table, leaderboard, reconcile,
                               run_campaign, run_combination)
from abrforge.trainer import ScoreReport

TINY = {
    "generation": {"n": 8},
    "training": {"profile": "micro", "n_epochs": 20, "ckpt_interval": 2, "n_seeds": 2, "n_chunks": 6},
    "early_stop": {"prefix_epochs": 10, "length": 10},
}


def tiny(tmp_path, name="c", **over):
    doc = {"name": name, "output_dir": str(tmp_path / name), **TINY}
    for k, v in over.items():
        doc[k] = {**doc.get(k, {}), **v} if isinstance(v, dict) else v
    return CampaignConfig.from_dict(doc)


@pytest.fixture(scope="module")
def done(tmp_path_factory):
    root = tmp_path_factory.mktemp("camp")
    return run_campaign(tiny(root)), root


def test_campaign_outputs(done):
    res, root = done
    acc = res.accounting
    assert acc["requested"] == 8 and acc["total"] == 8
    assert acc["scored"] + acc["early_stopped"] + acc["training_failures"] == acc["trained"]
    assert acc["leaderboard_rows"] == acc["scored"] + 1
    assert sum(r.baseline for r in res.leaderboard) == 1
    finals = [r.final for r in res.leaderboard]
    assert finals == sorted(finals, reverse=True)
    for style in ("filter_table", "score_table", "improvement_table", "curve_data"):
        assert res.reports[style]
    board = json.loads((root / "c" / "reports" / "leaderboard.json").read_text())
    assert [r["candidate_id"] for r in board] == [r.candidate_id for r in res.leaderboard]


def test_ledger_is_append_only_history(done):
    res, root = done
    ledger = CampaignLedger(root / "c" / "ledger.jsonl")
    assert [e["seq"] for e in ledger.events] == list(range(len(ledger.events)))
    for cid in ledger.first("batch_created")["candidate_ids"]:
        hist = ledger.status_history(cid)
        assert hist[0] == "raw" and hist[-1] in ("rejected", "compiled", "normalized", "scored")
    assert reconcile(ledger) == res.accounting


def test_rerun_is_a_no_op(done):
    res, root = done
    before = (root / "c" / "ledger.jsonl").read_bytes()
    again = run_campaign(tiny(root))
    assert (root / "c" / "ledger.jsonl").read_bytes() == before
    assert [r.to_dict() for r in again.leaderboard] == [r.to_dict() for r in res.leaderboard]


def test_resume_after_interruption(done, tmp_path):
    res, root = done
    src = root / "c"
    dst = tmp_path / "c"
    shutil.copytree(src, dst)
    lines = (src / "ledger.jsonl").read_text().splitlines(keepends=True)
    finished = [i for i, line in enumerate(lines) if '"run_finished"' in line]
    cut = finished[len(finished) // 2] + 1
    (dst / "ledger.jsonl").write_text("".join(lines[:cut]))
    shutil.rmtree(dst / "reports")
    resumed = run_campaign(tiny(tmp_path))
    assert (dst / "ledger.jsonl").read_text() == "".join(lines)
    assert [r.to_dict() for r in resumed.leaderboard] == [r.to_dict() for r in res.leaderboard]


def test_ledger_independent_of_location(done, tmp_path):
    _, root = done
    run_campaign(tiny(tmp_path))
    assert (tmp_path / "c" / "ledger.jsonl").read_bytes() == (root / "c" / "ledger.jsonl").read_bytes()


def test_config_change_refused(done):
    _, root = done
    with pytest.raises(ConfigError):
        run_campaign(tiny(root, training={"n_epochs": 40}))


def test_tampered_run_log_aborts(done, tmp_path):
    from abrforge.campaign import CampaignAbort
    _, root = done
    shutil.copytree(root / "c", tmp_path / "c")
    log = next((tmp_path / "c" / "runs").glob("*.jsonl"))
    log.write_text(log.read_text() + "\n")
    with pytest.raises(CampaignAbort):
        emit_reports(tmp_path / "c", ["curve_data"])


def test_early_stop_does_not_change_survivor_scores(done, tmp_path):
    res, _ = done
    strict = run_campaign(tiny(tmp_path, "strict", early_stop={"threshold": 1.0}))
    off = run_campaign(tiny(tmp_path, "off", early_stop={"enabled": False}))
    on_scores = {r.candidate_id: r.final for r in res.leaderboard}
    off_scores = {r.candidate_id: r.final for r in off.leaderboard}
    strict_scores = {r.candidate_id: r.final for r in strict.leaderboard}
    assert off.accounting["early_stopped"] == 0
    assert strict.accounting["early_stopped"] > 0
    for scores in (on_scores, strict_scores):
        assert all(off_scores[c] == s for c, s in scores.items())


def test_missing_dataset_aborts_before_generation(tmp_path):
    cfg = tiny(tmp_path, dataset="nowhere/manifest.json")
    with pytest.raises(ConfigError, match="not found"):
        run_campaign(cfg)
    assert not (tmp_path / "c").exists()


@pytest.mark.parametrize("doc", [
    {"name": "x"},
    {"name": "x", "output_dir": "o", "surprise": 1},
    {"name": "x", "output_dir": "o", "training": {"profile": "huge"}},
    {"name": "x", "output_dir": "o", "training": {"n_epochs": 30, "ckpt_interval": 7}},
    {"name": "x", "output_dir": "o", "early_stop": {"method": "reward_only"}},
    {"name": "x", "output_dir": "o", "early_stop": {"prefix_epochs": 500}},
    {"name": "x", "output_dir": "o", "generation": {"kind": "both"}},
    {"name": "x", "output_dir": "o", "filter": {"threshold": -1}},
])
def test_config_errors(doc):
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict(doc)


def test_yaml_load_relative_paths(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"name": "y", "output_dir": "out", **TINY}))
    cfg = CampaignConfig.load(tmp_path / "c.yaml")
    assert cfg.out == tmp_path / "out" and cfg.training.n_epochs == 20
    assert cfg.digest == tiny(tmp_path, "y").digest


def reports(prefix, n):
    return [ScoreReport(f"{prefix}{i:02d}", {0: float(i)}, float(i), float(i)) for i in range(n)]


def test_combine_top_counts_and_order():
    jobs = combine_top(reports("s", 40), reports("n", 35), 30)
    assert len(jobs) == 900 and len(set(jobs)) == 900
    assert jobs[0] == ("s39", "n34") and jobs[1] == ("s39", "n33") and jobs[30] == ("s38", "n34")
    assert combine_top(reports("s", 5), reports("n", 5), 1) == [("s04", "n04")]


def test_combine_top_deficient_list_named():
    with pytest.raises(ValueError, match="networks"):
        combine_top(reports("s", 5), reports("n", 2), 3)
    with pytest.raises(ValueError, match="states"):
        combine_top(reports("s", 2), reports("n", 5), 3)


def test_combine_ties_by_id():
    tied = [ScoreReport(i, {0: 1.0}, 1.0, 1.0) for i in ("b", "a", "c")]
    assert combine_top(tied, tied, 2) == [("a", "a"), ("a", "b"), ("b", "a"), ("b", "b")]


def _fake_campaign(root, prefix, n):
    ledger = CampaignLedger(root / "ledger.jsonl")
    for r in reports(prefix, n):
        ledger.append("scored", candidate_id=r.candidate_id, per_seed=r.per_seed, final=r.final,
                      best=r.best, dataset="demo", baseline=False)
    return root


def test_combination_dry_run_on_mocked_scores(tmp_path):
    s = _fake_campaign(tmp_path / "s", "s", 31)
    n = _fake_campaign(tmp_path / "n", "n", 30)
    res = run_combination(s, n, tmp_path / "comb", 30, dry_run=True)
    assert len(res.jobs) == 900
    assert len(json.loads((tmp_path / "comb" / "combination_jobs.json").read_text())) == 900


def test_combination_table_reports_both_aggregates():
    from abrforge.campaign import CombinationResult
    r = CombinationResult([("s", "n")], {("s", "n"): ScoreReport("s+n", {0: 1.1, 1: 1.3}, 1.1, 1.3)})
    table = format_combination_table("demo", 1.0, [ScoreReport("s", {}, 1.05, 1.05)],
                                     [ScoreReport("n", {}, 1.02, 1.02)], r)
    assert "Combined (median)" in table and "10.0%" in table and "30.0%" in table


def test_leaderboard_requires_baseline():
    with pytest.raises(AccountingError):
        leaderboard(reports("s", 3), "missing")
    rows = leaderboard(reports("s", 3), "s01")
    assert [r.rank for r in rows] == [1, 2, 3] and rows[1].baseline and rows[0].improvement == 1.0


def test_improvement_table_needs_baseline(tmp_path):
    _fake_campaign(tmp_path, "s", 3)
    with pytest.raises(AccountingError):
        emit_reports(tmp_path, ["improvement_table"])
