"""Chunk-level, trace-driven video streaming simulator with the linear QoE reward."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .traces import Trace

BITS_PER_BYTE = 8


class SimulationError(RuntimeError):
    pass


class PolicyFailure(SimulationError):
    """A decision function raised while streaming; carries the chunk index."""

    def __init__(self, chunk_index: int, cause: BaseException):
        super().__init__(f"policy failed at chunk {chunk_index}: {type(cause).__name__}: {cause}")
        self.chunk_index = chunk_index
        self.cause = cause


@dataclass(frozen=True)
class BitrateLadder:
    levels_kbps: tuple[float, ...]
    id: str = "custom"

    def __post_init__(self):
        levels = tuple(float(x) for x in self.levels_kbps)
        if len(levels) < 2:
            raise ValueError("a ladder needs at least two levels")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"ladder must be strictly ascending: {levels}")
        if levels[0] <= 0:
            raise ValueError("bitrates must be positive")
        object.__setattr__(self, "levels_kbps", levels)

    def __len__(self):
        return len(self.levels_kbps)

    @property
    def levels_mbps(self) -> np.ndarray:
        return np.asarray(self.levels_kbps) / 1000.0


LADDERS = {
    "low": BitrateLadder((300, 750, 1200, 1850, 2850, 4300), "low"),
    "high": BitrateLadder((1850, 2850, 4300, 12000, 24000, 53000), "high"),
}


def get_ladder(ladder: str | BitrateLadder | Sequence[float]) -> BitrateLadder:
    if isinstance(ladder, BitrateLadder):
        return ladder
    if isinstance(ladder, str):
        try:
            return LADDERS[ladder]
        except KeyError:
            raise KeyError(f"unknown ladder {ladder!r}; known: {sorted(LADDERS)}") from None
    return BitrateLadder(tuple(ladder))


@dataclass(frozen=True, eq=False)
class VideoManifest:
    n_chunks: int
    chunk_duration_s: float
    sizes_bytes: np.ndarray  # [level][chunk]
    ladder: BitrateLadder

    def __post_init__(self):
        sizes = np.asarray(self.sizes_bytes, dtype=float)
        if sizes.shape != (len(self.ladder), self.n_chunks):
            raise ValueError(f"size matrix {sizes.shape} does not match "
                             f"({len(self.ladder)} levels, {self.n_chunks} chunks)")
        if np.any(sizes <= 0):
            raise ValueError("chunk sizes must be positive")
        if np.any(np.diff(sizes, axis=0) <= 0):
            raise ValueError("chunk sizes must increase strictly across levels")
        sizes.setflags(write=False)
        object.__setattr__(self, "sizes_bytes", sizes)

    def save(self, path: str | Path) -> None:
        doc = {
            "ladder_kbps": list(self.ladder.levels_kbps),
            "ladder_id": self.ladder.id,
            "n_chunks": self.n_chunks,
            "chunk_duration_s": self.chunk_duration_s,
            "sizes_bytes": self.sizes_bytes.tolist(),
        }
        Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "VideoManifest":
        doc = yaml.safe_load(Path(path).read_text())
        ladder = BitrateLadder(tuple(doc["ladder_kbps"]), doc.get("ladder_id", "custom"))
        return cls(int(doc["n_chunks"]), float(doc["chunk_duration_s"]),
                   np.asarray(doc["sizes_bytes"], dtype=float), ladder)


def synth_manifest(ladder, n_chunks: int = 48, chunk_duration_s: float = 4.0,
                   jitter: float = 0.0, seed: int = 0) -> VideoManifest:
    """Nominal chunk sizes ``kbps * duration * 125`` bytes, with optional jitter.

    Each chunk's sizes are redrawn until strictly increasing across levels.
    """
    ladder = get_ladder(ladder)
    if not 0 <= jitter < 0.5:
        raise ValueError("jitter must lie in [0, 0.5)")
    nominal = np.asarray(ladder.levels_kbps) * chunk_duration_s * 125.0
    sizes = np.empty((len(ladder), n_chunks))
    rng = np.random.default_rng(seed)
    for c in range(n_chunks):
        while True:
            col = nominal * (1.0 + rng.uniform(-jitter, jitter, size=len(ladder)))
            if jitter == 0 or np.all(np.diff(col) > 0):
                break
        sizes[:, c] = col
    return VideoManifest(n_chunks, chunk_duration_s, sizes, ladder)


# -- link model --------------------------------------------------------------

def download_chunk(trace: Trace, size_bytes: float, start_time_s: float) -> tuple[float, float]:
    """Exact transfer time of ``size_bytes`` over the cyclic step-function link.

    Returns ``(duration_s, mean_throughput_mbps)``.
    """
    if not size_bytes > 0:
        raise ValueError("chunk size must be positive")
    if start_time_s < 0:
        raise ValueError("start time must be non-negative")
    offsets = trace.offsets_s
    rates = trace.mbps
    period = trace.period_s
    ends = np.append(offsets[1:], period)
    cycle_mbit = float(np.dot(rates, ends - offsets))
    if cycle_mbit <= 0:
        raise SimulationError("link permanently dead: zero throughput over a full cycle")

    remaining = size_bytes * BITS_PER_BYTE / 1e6
    u = math.fmod(start_time_s, period)
    i = max(int(np.searchsorted(offsets, u, side="right")) - 1, 0)
    elapsed = 0.0
    n = len(offsets)
    while True:
        seg_left = ends[i] - u
        cap = rates[i] * seg_left
        if rates[i] > 0 and cap >= remaining:
            elapsed += remaining / rates[i]
            break
        remaining -= cap
        elapsed += seg_left
        i += 1
        if i == n:
            i, u = 0, 0.0
            whole = math.floor(remaining / cycle_mbit) - 1
            if whole > 0:
                remaining -= whole * cycle_mbit
                elapsed += whole * period
        else:
            u = offsets[i]
    return elapsed, size_bytes * BITS_PER_BYTE / 1e6 / elapsed


def qoe_lin(level_kbps: float, prev_level_kbps: float, rebuffer_s: float,
            rebuf_penalty: float = 4.3, smooth_penalty: float = 1.0) -> float:
    """Bitrate utility (Mbps) minus rebuffering and switching penalties."""
    if level_kbps < 0 or prev_level_kbps < 0 or rebuffer_s < 0:
        raise ValueError("qoe_lin inputs must be non-negative")
    q = level_kbps / 1000.0
    q_prev = prev_level_kbps / 1000.0
    return math.fsum((q, -rebuf_penalty * rebuffer_s, -smooth_penalty * abs(q - q_prev)))


# -- sessions ----------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    history_len: int = 8
    buffer_cap_s: float = 60.0
    rebuf_penalty: float = 4.3
    smooth_penalty: float = 1.0
    start_level: int = 0


@dataclass(frozen=True, eq=False)
class StreamObservation:
    throughput_hist_mbps: np.ndarray
    download_time_hist_s: np.ndarray
    next_sizes_bytes: np.ndarray
    buffer_s: float
    chunks_remaining: int
    last_level: int
    buffer_hist_s: np.ndarray
    ladder_kbps: tuple[float, ...] = ()
    total_chunks: int = 0

    @property
    def last_bitrate_kbps(self) -> float:
        return self.ladder_kbps[self.last_level]


@dataclass(frozen=True)
class StepResult:
    level: int
    level_kbps: float
    download_time_s: float
    rebuffer_s: float
    idle_wait_s: float
    smooth_mbps: float
    reward: float
    done: bool


class Session:
    """One playback of ``manifest`` over ``trace``; a single-owner state machine."""

    def __init__(self, trace: Trace, manifest: VideoManifest, config: SimConfig = SimConfig(),
                 start_time_s: float = 0.0):
        self.trace = trace
        self.manifest = manifest
        self.ladder = manifest.ladder
        self.config = config
        self.start_time_s = float(start_time_s)
        self.clock_s = 0.0
        self.buffer_s = 0.0
        self.chunk_index = 0
        self.last_level = config.start_level
        if not 0 <= self.last_level < len(self.ladder):
            raise ValueError("start_level outside the ladder")
        h = config.history_len
        self._thr = np.zeros(h)
        self._dl = np.zeros(h)
        self._buf = np.zeros(h)

    @property
    def done(self) -> bool:
        return self.chunk_index >= self.manifest.n_chunks

    def observation(self) -> StreamObservation:
        m = self.manifest
        if self.done:
            nxt = np.zeros(len(self.ladder))
        else:
            nxt = m.sizes_bytes[:, self.chunk_index].copy()
        return StreamObservation(
            throughput_hist_mbps=self._thr.copy(),
            download_time_hist_s=self._dl.copy(),
            next_sizes_bytes=nxt,
            buffer_s=self.buffer_s,
            chunks_remaining=m.n_chunks - self.chunk_index,
            last_level=self.last_level,
            buffer_hist_s=self._buf.copy(),
            ladder_kbps=self.ladder.levels_kbps,
            total_chunks=m.n_chunks,
        )

    def step(self, level: int) -> tuple[StepResult, StreamObservation]:
        """Download the next chunk at ``level`` and advance playback.

        The first chunk's download is startup delay and is not counted as
        rebuffering. When the buffer would exceed its cap the player idles until
        the new chunk fits.
        """
        if self.done:
            raise SimulationError("step() called on a finished session")
        level = int(level)
        if not 0 <= level < len(self.ladder):
            raise ValueError(f"level {level} outside ladder of {len(self.ladder)}")
        cfg = self.config
        size = self.manifest.sizes_bytes[level, self.chunk_index]
        dl, thr = download_chunk(self.trace, size, self.start_time_s + self.clock_s)

        rebuf = max(dl - self.buffer_s, 0.0) if self.chunk_index > 0 else 0.0
        buf = max(self.buffer_s - dl, 0.0) + self.manifest.chunk_duration_s
        idle = max(buf - cfg.buffer_cap_s, 0.0)
        buf -= idle

        level_kbps = self.ladder.levels_kbps[level]
        prev_kbps = self.ladder.levels_kbps[self.last_level]
        reward = qoe_lin(level_kbps, prev_kbps, rebuf, cfg.rebuf_penalty, cfg.smooth_penalty)

        self.clock_s += dl + idle
        self.buffer_s = buf
        self.last_level = level
        self.chunk_index += 1
        for hist, val in ((self._thr, thr), (self._dl, dl), (self._buf, buf)):
            hist[:-1] = hist[1:]
            hist[-1] = val
        res = StepResult(level, level_kbps, dl, rebuf, idle,
                         abs(level_kbps - prev_kbps) / 1000.0, reward, self.done)
        return res, self.observation()


@dataclass
class RolloutResult:
    total_reward: float
    steps: list[StepResult] = field(default_factory=list)

    @property
    def mean_reward(self) -> float:
        return self.total_reward / len(self.steps) if self.steps else 0.0


def rollout(policy: Callable[[StreamObservation], int], session: Session) -> RolloutResult:
    """Stream a fresh session to the end, asking ``policy`` for every chunk's level."""
    if session.chunk_index != 0:
        raise SimulationError("rollout requires a fresh session")
    obs = session.observation()
    steps = []
    while not session.done:
        try:
            level = policy(obs)
        except Exception as exc:
            raise PolicyFailure(session.chunk_index, exc) from exc
        res, obs = session.step(level)
        steps.append(res)
    return RolloutResult(float(sum(s.reward for s in steps)), steps)


def write_rollout_log(result: RolloutResult, path: str | Path) -> None:
    with open(path, "w") as fh:
        for i, s in enumerate(result.steps):
            fh.write(json.dumps({"chunk": i, "level": s.level, "download_time": s.download_time_s,
                                 "rebuffer": s.rebuffer_s, "reward": s.reward}) + "\n")


def fixed_policy(level: int) -> Callable[[StreamObservation], int]:
    return lambda obs: level
