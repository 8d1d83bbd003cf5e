"""Pre-training checks: trial execution and fuzzed normalization of state features."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .candidates import CandidateDesign, CandidateFailure, SandboxPolicy
from .candidates.sandbox import INFRA, execute_state_many, format_failure, probe_network
from .sim import LADDERS, Session, SimConfig, StreamObservation, fixed_policy, synth_manifest
from .traces import Trace

log = logging.getLogger(__name__)

FUZZ_ERROR = "execution error under fuzz"
NOT_NORMALIZED = "feature magnitude above threshold"


@dataclass(frozen=True)
class FuzzConfig:
    n_samples: int = 100
    threshold: float = 100.0
    seed: int = 0
    throughput_mbps: tuple[float, float] = (0.1, 100.0)
    download_time_s: tuple[float, float] = (0.05, 60.0)
    buffer_s: tuple[float, float] = (0.0, 60.0)
    max_chunks: int = 48
    history_len: int = 8
    ladders: tuple[str, ...] = ("low", "high")
    size_jitter: float = 0.4

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size=size))


def sample_observations(cfg: FuzzConfig) -> list[StreamObservation]:
    """Random observations covering every environment's ladder and link range.

    Rates and download times are drawn log-uniformly; a random number of the
    oldest history slots stay zero, as they do early in a session.
    """
    rng = np.random.default_rng(cfg.seed)
    h = cfg.history_len
    out = []
    for _ in range(cfg.n_samples):
        ladder = LADDERS[cfg.ladders[rng.integers(len(cfg.ladders))]]
        n_levels = len(ladder)
        filled = int(rng.integers(0, h + 1))
        thr = np.zeros(h)
        dl = np.zeros(h)
        buf_hist = np.zeros(h)
        if filled:
            thr[h - filled:] = _log_uniform(rng, *cfg.throughput_mbps, filled)
            dl[h - filled:] = _log_uniform(rng, *cfg.download_time_s, filled)
            buf_hist[h - filled:] = rng.uniform(*cfg.buffer_s, filled)
        nominal = np.asarray(ladder.levels_kbps) * 4.0 * 125.0
        sizes = np.sort(nominal * (1 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, n_levels)))
        out.append(StreamObservation(
            throughput_hist_mbps=thr,
            download_time_hist_s=dl,
            next_sizes_bytes=sizes,
            buffer_s=float(buf_hist[-1]) if filled else 0.0,
            chunks_remaining=int(rng.integers(0, cfg.max_chunks + 1)),
            last_level=int(rng.integers(n_levels)),
            buffer_hist_s=buf_hist,
            ladder_kbps=ladder.levels_kbps,
            total_chunks=cfg.max_chunks,
        ))
    return out


def probe_observations(history_len: int = 8) -> list[StreamObservation]:
    """Start-of-session and mid-session observations from a 3 Mbps link."""
    cfg = SimConfig(history_len=history_len)
    session = Session(Trace.from_samples("probe", [(0, 3.0), (1, 3.0)]),
                      synth_manifest("low"), cfg)
    probes = [session.observation()]
    step = fixed_policy(2)
    for _ in range(history_len + 2):
        _, obs = session.step(step(None))
    probes.append(obs)
    return probes


@dataclass
class CheckOutcome:
    candidate_id: str
    kind: str
    compiled: bool
    normalized: bool | None = None
    reason: str | None = None
    offending_value: float | None = None
    state_shape: tuple[int, int] | None = None
    infrastructure_error: bool = False


def compile_check(candidate: CandidateDesign, probes: Sequence[StreamObservation] | None = None,
                  state_shape: tuple[int, int] = (6, 8), n_actions: int = 6,
                  policy: SandboxPolicy = SandboxPolicy()) -> CheckOutcome:
    """Trial-run a candidate; any exception rejects it.

    States are executed on probe observations, networks are built for
    ``state_shape`` and probed. A sandbox infrastructure failure is retried
    once and then reported without blaming the candidate.
    """
    if candidate.status != "raw":
        raise ValueError(f"{candidate.id} is {candidate.status}, compile_check needs raw")
    probes = list(probes) if probes is not None else probe_observations(state_shape[1])
    outcome = CheckOutcome(candidate.id, candidate.kind, compiled=False)
    for attempt in range(2):
        try:
            if candidate.kind == "state":
                tensors = execute_state_many(candidate, probes, policy)
                outcome.state_shape = tuple(tensors[0].shape)
            else:
                probe_network(candidate, state_shape, n_actions, 0, policy)
                outcome.state_shape = tuple(state_shape)
        except CandidateFailure as exc:
            if exc.reason == INFRA and attempt == 0:
                log.warning("sandbox infrastructure failure on %s, retrying", candidate.id)
                continue
            outcome.reason = exc.reason
            if exc.reason == INFRA:
                outcome.infrastructure_error = True
            else:
                candidate.reject(format_failure(exc))
            return outcome
        break
    outcome.compiled = True
    candidate.advance("compiled")
    return outcome


def normalization_check(candidate: CandidateDesign, cfg: FuzzConfig = FuzzConfig(),
                        policy: SandboxPolicy = SandboxPolicy(),
                        observations: Sequence[StreamObservation] | None = None):
    """Fuzz a compiled state; fail on any non-finite feature or one with |value| > threshold.

    Returns ``(passed, offending_value, reason)``.
    """
    if candidate.kind != "state":
        raise ValueError("the normalization check applies to state candidates only")
    if candidate.status != "compiled":
        raise ValueError(f"{candidate.id} is {candidate.status}, normalization needs compiled")
    observations = observations if observations is not None else sample_observations(cfg)
    try:
        tensors = execute_state_many(candidate, observations, policy)
    except CandidateFailure as exc:
        candidate.reject(f"{FUZZ_ERROR} ({format_failure(exc)})")
        return False, None, FUZZ_ERROR
    offending = None
    for t in tensors:
        bad = ~np.isfinite(t)
        if bad.any():
            offending = float(t[bad][0])
            break
        peak = float(np.max(np.abs(t)))
        if peak > cfg.threshold:
            offending = float(t.flat[np.argmax(np.abs(t))])
            break
    if offending is not None:
        candidate.reject(f"{NOT_NORMALIZED} ({offending:.6g} vs T={cfg.threshold:g})")
        return False, offending, NOT_NORMALIZED
    candidate.advance("normalized")
    return True, None, None


@dataclass
class FilterReport:
    total: int
    compilable: int
    well_normalized: int | None
    outcomes: list[CheckOutcome] = field(default_factory=list)
    infrastructure_errors: int = 0

    @property
    def passed_ids(self) -> list[str]:
        if self.well_normalized is None:
            return [o.candidate_id for o in self.outcomes if o.compiled]
        return [o.candidate_id for o in self.outcomes if o.normalized]

    def to_records(self) -> list[dict]:
        return [asdict(o) for o in self.outcomes]

    def summary(self) -> dict:
        return {"total": self.total, "compilable": self.compilable,
                "well_normalized": self.well_normalized,
                "infrastructure_errors": self.infrastructure_errors}

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "outcomes": self.to_records()}, indent=2)


def count_pct(count: int, total: int) -> str:
    pct = 100.0 * count / total if total else 0.0
    return f"{count:,} ({pct:.1f}%)"


def format_filter_table(rows: Iterable[tuple[str, FilterReport]]) -> str:
    """Aligned text table: label, total, compilable, well normalized."""
    header = ("", "Total", "Compilable", "Well Normalized")
    body = []
    for label, rep in rows:
        wn = "n/a" if rep.well_normalized is None else count_pct(rep.well_normalized, rep.total)
        body.append((label, f"{rep.total:,}", count_pct(rep.compilable, rep.total), wn))
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    lines = []
    for r in [header, *body]:
        lines.append("  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]))
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def run_prefilter(candidates: Iterable[CandidateDesign], cfg: FuzzConfig = FuzzConfig(),
                  policy: SandboxPolicy = SandboxPolicy(), workers: int = 1,
                  exclude_infrastructure: bool = False,
                  state_shape: tuple[int, int] = (6, 8), n_actions: int = 6) -> FilterReport:
    """Compile-check every candidate, then fuzz the surviving states.

    Percentages downstream are count/total; candidates hit by sandbox
    infrastructure errors leave the total only when ``exclude_infrastructure``.
    """
    cands = list(getattr(candidates, "candidates", candidates))
    fuzz_obs = sample_observations(cfg)
    probes = probe_observations(cfg.history_len)

    def check(c: CandidateDesign) -> CheckOutcome:
        out = compile_check(c, probes, state_shape, n_actions, policy)
        if out.compiled and c.kind == "state":
            ok, value, reason = normalization_check(c, cfg, policy, fuzz_obs)
            out.normalized, out.offending_value = ok, value
            if not ok:
                out.reason = reason
        elif c.kind == "state":
            out.normalized = False
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(check, cands))
    else:
        outcomes = [check(c) for c in cands]

    infra = sum(o.infrastructure_error for o in outcomes)
    counted = [o for o in outcomes if not (exclude_infrastructure and o.infrastructure_error)]
    has_states = any(o.kind == "state" for o in counted)
    return FilterReport(
        total=len(counted),
        compilable=sum(o.compiled for o in counted),
        well_normalized=sum(bool(o.normalized) for o in counted) if has_states else None,
        outcomes=outcomes,
        infrastructure_errors=infra,
    )
