"""Network throughput traces: ingestion, scaling, splitting and summary stats.

A trace file holds one sample per line, two whitespace-separated columns:
``time_s throughput_mbps``. Traces are replayed cyclically by the simulator
when a video outlasts them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

log = logging.getLogger(__name__)

SOURCE_TAGS = ("fcc", "starlink", "cellular_4g", "cellular_5g", "custom")
TRACE_FORMATS = ("columns",)

# Published corpus summary (train/test counts, hours, mean Mbps, epochs, test interval).
REFERENCE_DATASETS = {
    "fcc": dict(train_traces=85, train_hours=10.0, test_traces=290, test_hours=25.7,
                throughput_mbps=1.3, train_epochs=40_000, test_interval=500, ladder="low"),
    "starlink": dict(train_traces=13, train_hours=0.9, test_traces=12, test_hours=0.8,
                     throughput_mbps=1.6, train_epochs=4_000, test_interval=100, ladder="low"),
    "4g": dict(train_traces=119, train_hours=10.0, test_traces=121, test_hours=10.0,
               throughput_mbps=19.8, train_epochs=40_000, test_interval=500, ladder="high"),
    "5g": dict(train_traces=117, train_hours=10.0, test_traces=119, test_hours=10.0,
               throughput_mbps=30.2, train_epochs=40_000, test_interval=500, ladder="high"),
}

STARLINK_SCALE = 1.0 / 8.0


class TraceError(ValueError):
    """A trace or trace directory violates the file contract."""


@dataclass(frozen=True, eq=False)
class Trace:
    id: str
    times_s: np.ndarray
    mbps: np.ndarray
    source_tag: str = "custom"

    def __post_init__(self):
        times = np.asarray(self.times_s, dtype=float)
        rates = np.asarray(self.mbps, dtype=float)
        if times.ndim != 1 or times.shape != rates.shape:
            raise TraceError(f"{self.id}: times and throughputs must be equal-length 1-D")
        if times.size == 0:
            raise TraceError(f"{self.id}: empty trace")
        if times[0] < 0:
            raise TraceError(f"{self.id}: first timestamp {times[0]} is negative")
        if np.any(np.diff(times) <= 0):
            bad = int(np.argmax(np.diff(times) <= 0)) + 1
            raise TraceError(f"{self.id}: timestamps not strictly increasing at sample {bad}")
        if not np.all(np.isfinite(rates)) or np.any(rates < 0):
            bad = int(np.argmax(~(np.isfinite(rates) & (rates >= 0))))
            raise TraceError(f"{self.id}: invalid throughput {rates[bad]} at sample {bad}")
        if self.source_tag not in SOURCE_TAGS:
            raise TraceError(f"{self.id}: unknown source tag {self.source_tag!r}")
        times.setflags(write=False)
        rates.setflags(write=False)
        object.__setattr__(self, "times_s", times)
        object.__setattr__(self, "mbps", rates)

    @classmethod
    def from_samples(cls, id: str, samples: Iterable[tuple[float, float]], source_tag="custom"):
        pts = list(samples)
        return cls(id, [p[0] for p in pts], [p[1] for p in pts], source_tag)

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.times_s.tolist(), self.mbps.tolist()))

    @property
    def duration_s(self) -> float:
        """Last timestamp minus first (used for dataset hours)."""
        return float(self.times_s[-1] - self.times_s[0])

    @property
    def period_s(self) -> float:
        """Length of one replay cycle.

        The final sample holds for one more sampling interval (the last gap), so
        a trace sampled every second at 0..N replays with period N+1.
        """
        if self.times_s.size == 1:
            return 1.0
        return self.duration_s + float(self.times_s[-1] - self.times_s[-2])

    @property
    def offsets_s(self) -> np.ndarray:
        return self.times_s - self.times_s[0]

    def scaled(self, factor: float) -> "Trace":
        return Trace(self.id, self.times_s.copy(), self.mbps * factor, self.source_tag)


@dataclass(frozen=True)
class DatasetStats:
    n_traces: int
    total_hours: float
    mean_throughput_mbps: float


@dataclass
class TraceDataset:
    name: str
    train: list[Trace]
    test: list[Trace]
    scale_factor: float = 1.0
    bitrate_ladder_id: str = "low"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.scale_factor > 0:
            raise TraceError(f"scale_factor must be positive, got {self.scale_factor}")
        overlap = {t.id for t in self.train} & {t.id for t in self.test}
        if overlap:
            raise TraceError(f"train/test share trace ids: {sorted(overlap)[:5]}")

    def split(self, which: str) -> list[Trace]:
        if which not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {which!r}")
        return self.train if which == "train" else self.test


def parse_trace_text(text: str, id: str, scale_factor: float = 1.0,
                     source_tag: str = "custom") -> Trace:
    times, rates = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise TraceError(f"{id}:{lineno}: expected 'time_s throughput_mbps'")
        try:
            t, r = float(parts[0]), float(parts[1])
        except ValueError as exc:
            raise TraceError(f"{id}:{lineno}: {exc}") from None
        if r < 0:
            raise TraceError(f"{id}:{lineno}: negative throughput {r}")
        times.append(t)
        rates.append(r * scale_factor)
    return Trace(id, times, rates, source_tag)


def load_trace(path: str | Path, scale_factor: float = 1.0, source_tag: str = "custom") -> Trace:
    path = Path(path)
    return parse_trace_text(path.read_text(), path.name, scale_factor, source_tag)


def write_trace(trace: Trace, path: str | Path) -> None:
    lines = [f"{t!r} {r!r}" for t, r in trace.samples]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class IngestResult:
    traces: list[Trace]
    rejected: dict[str, str]


def ingest_directory(path: str | Path, format: str = "columns", scale_factor: float = 1.0,
                     source_tag: str = "custom") -> IngestResult:
    """Load every regular file in ``path`` as a trace.

    Throughputs are multiplied by ``scale_factor`` (e.g. 1/8 for the peak-hour
    Starlink condition). Files that fail to parse are collected in
    ``rejected`` with a diagnostic instead of being dropped silently.
    """
    if format not in TRACE_FORMATS:
        raise ValueError(f"unknown trace format {format!r}")
    if not scale_factor > 0:
        raise ValueError("scale_factor must be positive")
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"trace directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.is_file() and not p.name.startswith("."))
    traces, rejected = [], {}
    for f in files:
        try:
            traces.append(load_trace(f, scale_factor, source_tag))
        except TraceError as exc:
            rejected[f.name] = str(exc)
            log.warning("rejected trace file %s: %s", f.name, exc)
    if not traces:
        detail = f" ({len(rejected)} files rejected)" if rejected else ""
        raise TraceError(f"no traces found in {root}{detail}")
    traces.sort(key=lambda t: t.id)
    return IngestResult(traces, rejected)


def dataset_stats(ds: TraceDataset, split: str) -> DatasetStats:
    """Trace count, summed hours and duration-weighted mean throughput."""
    traces = ds.split(split)
    if not traces:
        raise TraceError(f"dataset {ds.name!r} has an empty {split} split")
    return stats_for(traces)


def stats_for(traces: Sequence[Trace]) -> DatasetStats:
    if not traces:
        raise TraceError("no traces")
    total_s = 0.0
    weighted = 0.0
    for tr in traces:
        dt = np.diff(tr.times_s)
        total_s += float(dt.sum())
        weighted += float(np.dot(tr.mbps[:-1], dt))
    if total_s > 0:
        mean = weighted / total_s
    else:
        mean = float(np.mean([tr.mbps.mean() for tr in traces]))
    return DatasetStats(len(traces), total_s / 3600.0, mean)


def split_dataset(traces: Sequence[Trace], test_fraction: float, seed: int):
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    if len(traces) < 2:
        raise ValueError("need at least 2 traces to split")
    ordered = sorted(traces, key=lambda t: t.id)
    n_test = min(max(int(round(test_fraction * len(ordered))), 1), len(ordered) - 1)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    test_idx = set(perm[:n_test].tolist())
    train = [t for i, t in enumerate(ordered) if i not in test_idx]
    test = [t for i, t in enumerate(ordered) if i in test_idx]
    return train, test


def subsample_hours(traces: Sequence[Trace], target_hours: float, seed: int) -> list[Trace]:
    """Seeded random subset of traces whose total duration first reaches ``target_hours``."""
    order = np.random.default_rng(seed).permutation(len(traces))
    chosen, hours = [], 0.0
    for i in order:
        if hours >= target_hours:
            break
        chosen.append(traces[i])
        hours += traces[i].duration_s / 3600.0
    return sorted(chosen, key=lambda t: t.id)


def throughput_at(trace: Trace, t: float) -> float:
    """Throughput in effect at time ``t`` (seconds from trace start), cyclic."""
    if t < 0:
        raise ValueError("t must be non-negative")
    u = math.fmod(t, trace.period_s)
    idx = int(np.searchsorted(trace.offsets_s, u, side="right")) - 1
    return float(trace.mbps[max(idx, 0)])


# -- manifests ---------------------------------------------------------------

def load_manifest(path: str | Path) -> TraceDataset:
    """Read a dataset manifest (YAML) and the trace files it lists.

    Keys: ``name``, ``trace_dir``, ``train``/``test`` (lists of trace ids),
    ``scale_factor``, ``ladder``, ``source_tag``. Paths are relative to the
    manifest file.
    """
    path = Path(path)
    spec = yaml.safe_load(path.read_text())
    base = path.parent / spec.get("trace_dir", ".")
    scale = float(spec.get("scale_factor", 1.0))
    tag = spec.get("source_tag", "custom")

    def load(ids):
        return [load_trace(base / tid, scale, tag) for tid in ids]

    return TraceDataset(spec["name"], load(spec["train"]), load(spec["test"]), scale,
                        spec.get("ladder", "low"), meta={"manifest": str(path)})


def write_manifest(ds: TraceDataset, path: str | Path, trace_dir: str = "traces") -> None:
    """Write ``ds`` as a manifest plus one trace file per trace under ``trace_dir``.

    Stored throughputs are already scaled, so the written manifest records
    ``scale_factor: 1.0`` and keeps the original factor under ``ingest_scale``.
    """
    path = Path(path)
    tdir = path.parent / trace_dir
    tdir.mkdir(parents=True, exist_ok=True)
    for tr in ds.train + ds.test:
        write_trace(tr, tdir / tr.id)
    tags = {t.source_tag for t in ds.train + ds.test}
    doc = {
        "name": ds.name,
        "trace_dir": trace_dir,
        "scale_factor": 1.0,
        "ingest_scale": ds.scale_factor,
        "ladder": ds.bitrate_ladder_id,
        "source_tag": tags.pop() if len(tags) == 1 else "custom",
        "train": [t.id for t in ds.train],
        "test": [t.id for t in ds.test],
    }
    path.write_text(yaml.safe_dump(doc, sort_keys=False))


def demo_dataset(name: str = "demo", n_traces: int = 12, seconds: int = 320, seed: int = 0,
                 test_fraction: float = 0.25, ladder: str = "low") -> TraceDataset:
    """Small synthetic dataset for offline runs: per-second samples of a regime-switching link.

    Each trace wanders between a few throughput regimes (0.3 to 6 Mbps) with
    log-normal jitter, roughly the spread of mobile traces.
    """
    rng = np.random.default_rng(seed)
    regimes = np.array([0.4, 1.0, 2.0, 3.5, 6.0])
    traces = []
    for i in range(n_traces):
        state = int(rng.integers(len(regimes)))
        rates = []
        for _ in range(seconds):
            if rng.random() < 0.05:
                state = int(np.clip(state + rng.choice([-1, 1]), 0, len(regimes) - 1))
            rates.append(max(0.05, regimes[state] * rng.lognormal(0.0, 0.25)))
        traces.append(Trace.from_samples(f"{name}-{i:03d}", enumerate(rates)))
    train, test = split_dataset(traces, test_fraction, seed)
    return TraceDataset(name, train, test, 1.0, ladder, meta={"synthetic": True, "seed": seed})


def format_stats(name: str, train: DatasetStats, test: DatasetStats) -> str:
    """Trace count, hours and mean throughput per split, one line each."""
    rows = [("Dataset", "Split", "Traces", "Hours", "Mean Mbps")]
    for split, st in (("train", train), ("test", test)):
        rows.append((name, split, str(st.n_traces), f"{st.total_hours:.2f}",
                     f"{st.mean_throughput_mbps:.2f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    return "\n".join("  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(r, widths))) for r in rows)
