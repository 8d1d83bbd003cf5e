import json
from importlib import resources

import numpy as np
import pytest

from abrforge.candidates import CandidateDesign, builtin
from abrforge.filters import (NOT_NORMALIZED, FuzzConfig, compile_check, count_pct, format_filter_table,
                              normalization_check, run_prefilter, sample_observations)
from abrforge.generator import generate_batch
from abrforge.llm import make_client

RECORDED = resources.files("abrforge") / "data" / "recorded"
MANIFEST = json.loads((RECORDED / "fixture_manifest.json").read_text())


def replay_batch(kind):
    client = make_client("replay", MANIFEST["model"], RECORDED / f"{kind}_responses.jsonl")
    return generate_batch(client, kind, 50)


@pytest.mark.parametrize("kind", ["state", "network"])
def test_fixture_corpus_counts(kind):
    batch = replay_batch(kind)
    rep = run_prefilter(batch)
    exp = MANIFEST["expected"][kind]
    assert batch.n_requested == exp["requested"]
    assert (rep.total, rep.compilable, rep.well_normalized) == (
        exp["total"], exp["compilable"], exp["well_normalized"])
    # subset law: passed ⊆ compiled ⊆ total
    compiled = {o.candidate_id for o in rep.outcomes if o.compiled}
    assert set(rep.passed_ids) <= compiled <= {c.id for c in batch.candidates}
    for c in batch.candidates:
        assert c.status in (("normalized", "rejected") if kind == "state" else ("compiled", "rejected"))


def raw_bytes_state():
    return CandidateDesign("raw", "state", "import numpy as np\n\n"
                           "def build_state(next_chunk_sizes_bytes):\n"
                           "    return np.asarray(next_chunk_sizes_bytes)[None, :]\n")


def test_raw_bytes_rejected_at_100():
    c = raw_bytes_state()
    assert compile_check(c).compiled
    ok, value, reason = normalization_check(c, FuzzConfig(threshold=100.0))
    assert not ok and reason == NOT_NORMALIZED and abs(value) > 1e6
    assert c.status == "rejected" and "T=100" in c.rejection_reason


def test_threshold_boundary_inclusive():
    c = CandidateDesign("edge", "state", "import numpy as np\n\n"
                        "def build_state():\n    return np.full((1, 2), 100.0)\n")
    compile_check(c)
    assert normalization_check(c, FuzzConfig(threshold=100.0))[0]


def test_nan_feature_rejected():
    c = CandidateDesign("nan", "state", "import numpy as np\n\n"
                        "def build_state(buffer_level_s):\n"
                        "    return np.array([[np.log(buffer_level_s - 30.0)]])\n")
    assert compile_check(c).compiled
    ok, value, _ = normalization_check(c)
    assert not ok and not np.isfinite(value)


def test_baseline_passes():
    c = builtin("pensieve_original")
    rep = run_prefilter([c])
    assert rep.passed_ids == ["pensieve_original"]


def test_stage_order_enforced():
    c = builtin("pensieve_original")
    with pytest.raises(ValueError):
        normalization_check(c)


def test_fuzz_sampling_deterministic_and_in_range():
    cfg = FuzzConfig(n_samples=200, seed=5)
    a, b = sample_observations(cfg), sample_observations(cfg)
    assert all(np.array_equal(x.throughput_hist_mbps, y.throughput_hist_mbps) for x, y in zip(a, b))
    thr = np.concatenate([o.throughput_hist_mbps for o in a])
    nz = thr[thr > 0]
    assert nz.min() >= 0.1 and nz.max() <= 100.0 and (thr == 0).any()
    assert all(np.all(np.diff(o.next_sizes_bytes) >= 0) for o in a)


def test_parallel_prefilter_matches_serial():
    serial = run_prefilter(replay_batch("state").candidates[:12])
    parallel = run_prefilter(replay_batch("state").candidates[:12], workers=3)
    assert serial.summary() == parallel.summary()
    assert serial.passed_ids == parallel.passed_ids


def test_table_rendering():
    rep = run_prefilter([builtin("pensieve_original"), raw_bytes_state()])
    table = format_filter_table([("Synthetic", rep)])
    assert "2 (100.0%)" in table and "1 (50.0%)" in table
    assert count_pct(1234, 2468) == "1,234 (50.0%)"
