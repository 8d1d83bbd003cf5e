import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abrforge.traces import (STARLINK_SCALE, Trace, TraceDataset, TraceError, dataset_stats,
                             demo_dataset, ingest_directory, load_manifest, parse_trace_text,
                             split_dataset, stats_for, subsample_hours, throughput_at,
                             write_manifest)


def test_starlink_scaling(tmp_path):
    (tmp_path / "sl1").write_text("0.0 8.0\n10.0 16.0\n")
    res = ingest_directory(tmp_path, scale_factor=STARLINK_SCALE, source_tag="starlink")
    assert res.traces[0].samples[1] == (10.0, 2.0)


def test_empty_directory(tmp_path):
    with pytest.raises(TraceError, match="no traces found"):
        ingest_directory(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_directory(tmp_path / "nope")


def test_negative_throughput_file_rejected(tmp_path):
    (tmp_path / "good").write_text("0 1.0\n1 2.0\n")
    (tmp_path / "bad").write_text("0 1.0\n5.0 -1.0\n")
    res = ingest_directory(tmp_path)
    assert [t.id for t in res.traces] == ["good"]
    assert "negative" in res.rejected["bad"] or "invalid throughput" in res.rejected["bad"]


def test_non_monotone_rejected():
    with pytest.raises(TraceError, match="strictly increasing"):
        parse_trace_text("0 1\n2 1\n1 1\n", "x")


def test_single_hour_stats():
    tr = Trace.from_samples("h", [(0, 2.0), (3600, 2.0)])
    st_ = stats_for([tr])
    assert (st_.n_traces, st_.total_hours, st_.mean_throughput_mbps) == (1, 1.0, 2.0)


def test_empty_split_error():
    ds = TraceDataset("d", [Trace.from_samples("a", [(0, 1), (1, 1)])], [])
    with pytest.raises(TraceError):
        dataset_stats(ds, "test")


def test_split_deterministic_and_sized():
    traces = [Trace.from_samples(f"t{i}", [(0, 1), (1, 1)]) for i in range(10)]
    a = split_dataset(traces, 0.5, 7)
    b = split_dataset(traces, 0.5, 7)
    assert [t.id for t in a[0]] == [t.id for t in b[0]]
    assert len(a[0]) == len(a[1]) == 5
    with pytest.raises(ValueError):
        split_dataset(traces[:1], 0.5, 0)


def test_overlapping_ids_rejected():
    t = Trace.from_samples("same", [(0, 1), (1, 1)])
    with pytest.raises(TraceError):
        TraceDataset("d", [t], [t])


def test_throughput_step_and_wrap():
    tr = Trace(id="w", times_s=[0, 10], mbps=[2, 4])
    assert throughput_at(tr, 5) == 2
    assert throughput_at(tr, 0) == 2
    # period is 20 s (last sample holds for one more gap), so t=25 wraps to t=5
    assert tr.period_s == 20
    assert throughput_at(tr, 25) == 2
    assert throughput_at(tr, 15) == 4


def test_arrays_read_only():
    tr = Trace.from_samples("r", [(0, 1), (1, 2)])
    with pytest.raises(ValueError):
        tr.mbps[0] = 5


def test_manifest_roundtrip(tmp_path):
    ds = demo_dataset(n_traces=4, seconds=20)
    write_manifest(ds, tmp_path / "manifest.yaml")
    back = load_manifest(tmp_path / "manifest.yaml")
    assert [t.id for t in back.train] == [t.id for t in ds.train]
    for a, b in zip(back.test, ds.test):
        np.testing.assert_array_equal(a.mbps, b.mbps)


def test_subsample_hours_reaches_target():
    traces = [Trace.from_samples(f"t{i}", [(0, 1), (1800, 1)]) for i in range(10)]
    chosen = subsample_hours(traces, 2.0, 0)
    assert sum(t.duration_s for t in chosen) / 3600 >= 2.0
    assert subsample_hours(traces, 2.0, 0) == chosen


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=20), st.floats(0, 1e4))
def test_throughput_at_is_a_sample_value(rates, t):
    tr = Trace.from_samples("p", list(enumerate(rates)))
    assert throughput_at(tr, t) in rates
