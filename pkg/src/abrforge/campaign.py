"""Campaign orchestration: generate, filter, train with early stopping, score, report.

All progress goes through an append-only JSONL ledger in the output
directory. Re-running a campaign against the same directory replays the
ledger and performs only the work it does not already record.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import early_stop as es
from .candidates import (BASELINE_NETWORK, BASELINE_STATE, CandidateDesign, SandboxPolicy, builtin,
                         load_corpus_dir, save_corpus_dir)
from .filters import FilterReport, FuzzConfig, format_filter_table, run_prefilter
from .generator import generate_batch
from .llm import ReplayMiss, make_client
from .trainer import (PROFILES, ScoreReport, TrainConfig, TrainingRun, final_score,
                      format_improvement, improvement, train)
from .traces import TraceDataset, demo_dataset, load_manifest

log = logging.getLogger(__name__)

REPORT_STYLES = ("filter_table", "score_table", "improvement_table", "curve_data", "cv_table")


class ConfigError(ValueError):
    pass


class CampaignAbort(RuntimeError):
    """Infrastructure failure; the ledger is left in a resumable state."""


class AccountingError(RuntimeError):
    pass


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class GenerationConfig:
    kind: str = "state"
    model: str = "fixture-llm"
    n: int = 50
    mode: str = "replay"
    store: str | None = None
    seed: int = 0
    temperature: float = 1.0
    parallelism: int = 1

    def store_path(self) -> Path:
        if self.store:
            return Path(self.store)
        return Path(str(resources.files("abrforge") / "data" / "recorded" / f"{self.kind}_responses.jsonl"))


@dataclass(frozen=True)
class EarlyStopConfig:
    enabled: bool = True
    method: str = "heuristic_max"
    prefix_epochs: int = 50
    length: int = 50
    threshold: float | str = "baseline"
    labeled_runs: str | None = None
    true_fraction: float = es.TRUE_FRACTION
    smoothed_fraction: float = es.SMOOTHED_FRACTION
    apply_to_combinations: bool = True


@dataclass(frozen=True)
class CombinationConfig:
    top_k_states: int = 30
    top_k_nets: int = 30


def _build(cls, doc: dict | None):
    doc = dict(doc or {})
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**doc)


def training_config(doc: dict | None) -> TrainConfig:
    doc = dict(doc or {})
    profile = doc.pop("profile", "micro")
    if profile not in PROFILES:
        raise ConfigError(f"unknown training profile {profile!r}; choose from {sorted(PROFILES)}")
    sim = doc.pop("sim", None)
    base = PROFILES[profile]
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown training keys: {sorted(unknown)}")
    try:
        cfg = replace(base, **doc)
        if sim:
            cfg = replace(cfg, sim=replace(cfg.sim, **sim))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc
    return cfg


def fuzz_config(doc: dict | None) -> FuzzConfig:
    doc = {k: tuple(v) if isinstance(v, list) else v for k, v in dict(doc or {}).items()}
    try:
        return _build(FuzzConfig, doc)
    except ValueError as exc:
        raise ConfigError(f"invalid filter config: {exc}") from exc


@dataclass(frozen=True)
class CampaignConfig:
    name: str
    output_dir: str
    dataset: str = "demo"
    ladder: str | None = None
    generation: GenerationConfig = GenerationConfig()
    filter: FuzzConfig = FuzzConfig()
    training: TrainConfig = PROFILES["micro"]
    early_stop: EarlyStopConfig = EarlyStopConfig()
    combination: CombinationConfig = CombinationConfig()
    workers: int = 1
    base_dir: str = "."

    def __post_init__(self):
        g = self.generation
        if g.kind not in ("state", "network"):
            raise ConfigError(f"generation.kind must be state or network, got {g.kind!r}")
        if g.n < 1:
            raise ConfigError("generation.n must be at least 1")
        if g.mode not in ("live", "record", "replay"):
            raise ConfigError(f"generation.mode {g.mode!r} unknown")
        if min(self.combination.top_k_states, self.combination.top_k_nets) < 1:
            raise ConfigError("combination top_k values must be at least 1")
        e = self.early_stop
        if e.method not in es.METHODS:
            raise ConfigError(f"early_stop.method {e.method!r} unknown")
        if e.enabled and e.prefix_epochs > self.training.n_epochs:
            raise ConfigError("early_stop.prefix_epochs exceeds training.n_epochs")
        if e.enabled and e.labeled_runs is None and e.method in es.LEARNED:
            raise ConfigError(f"{e.method} needs early_stop.labeled_runs to learn from")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "CampaignConfig":
        doc = dict(doc)
        for key in ("name", "output_dir"):
            if key not in doc:
                raise ConfigError(f"config needs {key!r}")
        known = {"name", "output_dir", "dataset", "ladder", "generation", "filter", "training",
                 "early_stop", "combination", "workers"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            name=doc["name"], output_dir=str(doc["output_dir"]),
            dataset=str(doc.get("dataset", "demo")), ladder=doc.get("ladder"),
            generation=_build(GenerationConfig, doc.get("generation")),
            filter=fuzz_config(doc.get("filter")),
            training=training_config(doc.get("training")),
            early_stop=_build(EarlyStopConfig, doc.get("early_stop")),
            combination=_build(CombinationConfig, doc.get("combination")),
            workers=int(doc.get("workers", 1)), base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return cls.from_dict(doc, base_dir=path.parent)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def identity(self) -> dict:
        """Settings that define the campaign's results; where and how fast it runs are excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return d

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.identity(), sort_keys=True, default=str).encode()).hexdigest()[:16]

    def load_dataset(self) -> TraceDataset:
        """``demo`` (optionally ``demo:<seed>``) or a path to a dataset manifest."""
        if self.dataset == "demo" or self.dataset.startswith("demo:"):
            seed = int(self.dataset.split(":", 1)[1]) if ":" in self.dataset else 0
            ds = demo_dataset(seed=seed, ladder=self.ladder or "low")
        else:
            path = self.resolve(self.dataset)
            if not path.is_file():
                raise ConfigError(f"dataset manifest not found: {path}")
            ds = load_manifest(path)
        if self.ladder and self.ladder != ds.bitrate_ladder_id:
            ds = replace(ds, bitrate_ladder_id=self.ladder)
        from .sim import LADDERS
        if ds.bitrate_ladder_id not in LADDERS:
            raise ConfigError(f"unknown ladder {ds.bitrate_ladder_id!r}")
        return ds


# -- ledger ------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class CampaignLedger:
    """Append-only event log; each event is one fsynced JSON line with a sequence number."""

    def __init__(self, path):
        self.path = Path(path)
        self.events: list[dict] = []
        if self.path.exists():
            with open(self.path) as fh:
                for line in fh:
                    if line.strip():
                        self.events.append(json.loads(line))

    def append(self, event: str, **data) -> dict:
        rec = {"seq": len(self.events), "event": event, **data}
        line = json.dumps(rec, sort_keys=True, default=_jsonable)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.events.append(json.loads(line))
        return rec

    def find(self, event: str, **match) -> list[dict]:
        return [e for e in self.events
                if e["event"] == event and all(e.get(k) == v for k, v in match.items())]

    def first(self, event: str, **match) -> dict | None:
        found = self.find(event, **match)
        return found[0] if found else None

    def status_history(self, candidate_id: str) -> list[str]:
        return [e["status"] for e in self.find("candidate_status", candidate_id=candidate_id)]

    def status_of(self, candidate_id: str) -> str | None:
        hist = self.status_history(candidate_id)
        return hist[-1] if hist else None

    def rejection_reason(self, candidate_id: str) -> str | None:
        found = self.find("candidate_status", candidate_id=candidate_id, status="rejected")
        return found[-1].get("reason") if found else None


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, tuple)):
        return list(obj)
    return str(obj)


def _record_transitions(ledger: CampaignLedger, cand: CandidateDesign, start: int) -> None:
    for status in cand.history[start:]:
        extra = {"reason": cand.rejection_reason} if status == "rejected" else {}
        ledger.append("candidate_status", candidate_id=cand.id, status=status, **extra)


def _restore(cand: CandidateDesign, history: Sequence[str], reason: str | None) -> CandidateDesign:
    """Bring a freshly loaded candidate to the status recorded in the ledger."""
    for status in history[1:]:
        if status == "rejected":
            cand.reject(reason or "rejected")
        else:
            cand.advance(status)
    return cand


# -- results -----------------------------------------------------------------

@dataclass
class LeaderboardRow:
    rank: int
    candidate_id: str
    baseline: bool
    final: float
    best: float
    per_seed: dict
    improvement: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CampaignResult:
    config: CampaignConfig
    ledger: CampaignLedger
    leaderboard: list[LeaderboardRow]
    filter_summary: dict
    accounting: dict
    reports: dict[str, list[str]] = field(default_factory=dict)


def leaderboard(reports: Sequence[ScoreReport], baseline_id: str) -> list[LeaderboardRow]:
    """Sorted by final score descending, ties by candidate id; improvements against the baseline row."""
    base = next((r for r in reports if r.candidate_id == baseline_id), None)
    if base is None:
        raise AccountingError(f"baseline {baseline_id!r} missing from scored candidates")
    ordered = sorted(reports, key=lambda r: (-r.final, r.candidate_id))
    return [LeaderboardRow(i + 1, r.candidate_id, r.candidate_id == baseline_id, r.final, r.best,
                           {str(k): v for k, v in sorted(r.per_seed.items())},
                           improvement(r.final, base.final) if base.final else None)
            for i, r in enumerate(ordered)]


# -- early stopping ------------------------------------------------------------

def build_stop_predictor(cfg: CampaignConfig, baseline_runs: Sequence[TrainingRun]) -> es.StopPredictor | None:
    e = cfg.early_stop
    if not e.enabled:
        return None
    if e.labeled_runs:
        runs = es.read_labeled_runs(cfg.resolve(e.labeled_runs))
        pred = es.train_predictor(e.method, es.relabel(runs, e.smoothed_fraction))
        return pred.with_threshold(es.tune_threshold(pred, es.relabel(runs, e.true_fraction)))
    pred = es.StopPredictor(e.method, length=e.length, prefix_epochs=e.prefix_epochs)
    if e.threshold == "baseline":
        # every baseline seed must be allowed to continue
        labeled = []
        for r in baseline_runs:
            f = es.PrefixFeatures.of(r.reward_curve, e.prefix_epochs, e.length)
            labeled.append(es.LabeledRun(r.run_id, f.pooled, f.max, f.last, 0.0, 0, 1, True))
        return pred.with_threshold(es.tune_threshold(pred, labeled))
    try:
        return pred.with_threshold(float(e.threshold))
    except ValueError:
        raise ConfigError(f"early_stop.threshold must be a number or 'baseline', got {e.threshold!r}")


# -- training jobs -----------------------------------------------------------

@dataclass
class _Job:
    candidate: CandidateDesign
    state: CandidateDesign
    network: CandidateDesign
    seeds: tuple[int, ...]
    done: dict  # seed -> ledger record of an already finished run


def _run_candidate(job: _Job, ds: TraceDataset, tcfg: TrainConfig, pred, decision_epoch: int,
                   runs_dir: Path, sandbox: SandboxPolicy) -> list[tuple[int, TrainingRun | None]]:
    """All seeds of one candidate, stopping at the first stopped or rejected run."""
    out = []
    for seed in job.seeds:
        if seed in job.done:
            rec = job.done[seed]
            out.append((seed, None))
            if rec["outcome"] != "complete":
                break
            continue
        hook = es.StopHook(pred, decision_epoch) if pred is not None else None
        run = train(job.state, job.network, ds, tcfg, seed, hook, sandbox,
                    run_id=f"{job.candidate.id}@s{seed}")
        run.write_log(runs_dir / f"{_safe(run.run_id)}.jsonl")
        out.append((seed, run))
        if not run.complete:
            break
    return out


def _safe(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_.@" else "_" for ch in text)


def _outcome(run: TrainingRun) -> str:
    return "rejected" if run.rejected else "stopped" if run.stopped_early else "complete"


def _load_run(rec: dict, runs_dir: Path) -> TrainingRun:
    path = runs_dir / f"{_safe(rec['run_id'])}.jsonl"
    if sha256_file(path) != rec["log_sha256"]:
        raise CampaignAbort(f"run log {path} does not match the ledger")
    run = TrainingRun.read_log(path, run_id=rec["run_id"], state_id=rec["state_id"],
                               network_id=rec["network_id"], seed=rec["seed"],
                               dataset=rec.get("dataset", ""))
    run.stopped_early = rec["outcome"] == "stopped"
    run.stop_epoch = rec.get("stop_epoch")
    run.rejected = rec.get("reason") if rec["outcome"] == "rejected" else None
    return run


def _execute(jobs: list[_Job], cfg: CampaignConfig, ds, pred, ledger: CampaignLedger, runs_dir: Path,
             sandbox: SandboxPolicy) -> dict[str, list[TrainingRun]]:
    """Run every job, recording each candidate's runs in the ledger as soon as it finishes."""
    decision = cfg.early_stop.prefix_epochs
    args = (ds, cfg.training, pred, decision, runs_dir, sandbox)
    all_runs: dict[str, list[TrainingRun]] = {}

    def record(job: _Job, res) -> None:
        runs = []
        for seed, run in res:
            if run is None:
                runs.append(_load_run(job.done[seed], runs_dir))
                continue
            path = runs_dir / f"{_safe(run.run_id)}.jsonl"
            ledger.append("run_finished", run_id=run.run_id, candidate_id=job.candidate.id,
                          state_id=run.state_id, network_id=run.network_id, seed=seed,
                          dataset=ds.name, outcome=_outcome(run), epochs=run.epochs_completed,
                          stop_epoch=run.stop_epoch, reason=run.rejected,
                          rejected_epoch=run.rejected_epoch, n_test_evals=len(run.test_evals),
                          log_sha256=sha256_file(path))
            runs.append(run)
        all_runs[job.candidate.id] = runs

    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers, mp_context=mp.get_context("fork")) as pool:
            # map yields in submission order, so the ledger order is independent of timing
            for job, res in zip(jobs, pool.map(_run_candidate, jobs, *[[a] * len(jobs) for a in args])):
                record(job, res)
    else:
        for job in jobs:
            record(job, _run_candidate(job, *args))
    return all_runs


def _jobs_for(cands: Sequence[CandidateDesign], kind: str, seeds, ledger: CampaignLedger,
              partner: CandidateDesign) -> list[_Job]:
    jobs = []
    for c in cands:
        state, net = (c, partner) if kind == "state" else (partner, c)
        done = {r["seed"]: r for r in ledger.find("run_finished", candidate_id=c.id)}
        jobs.append(_Job(c, state, net, tuple(seeds), done))
    return jobs


# -- campaign ----------------------------------------------------------------

def run_campaign(cfg: CampaignConfig, sandbox: SandboxPolicy = SandboxPolicy(),
                 styles: Sequence[str] = ("filter_table", "score_table", "improvement_table",
                                          "curve_data")) -> CampaignResult:
    ds = cfg.load_dataset()
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    ledger = CampaignLedger(out / "ledger.jsonl")
    started = ledger.first("campaign_started")
    if started and started["config_digest"] != cfg.digest:
        raise ConfigError(f"{out} holds a different campaign (config digest {started['config_digest']})")
    if not started:
        ledger.append("campaign_started", name=cfg.name, config_digest=cfg.digest, dataset=ds.name,
                      kind=cfg.generation.kind, config=cfg.identity())
    kind = cfg.generation.kind

    # generation
    corpus_dir = out / "candidates"
    batch_ev = ledger.first("batch_created")
    if batch_ev is None:
        g = cfg.generation
        store = g.store_path() if g.mode != "live" else None
        if g.mode == "replay" and not store.exists():
            raise ConfigError(f"replay store not found: {store}")
        client = make_client(g.mode, g.model, store)
        try:
            batch = generate_batch(client, kind, g.n, seed=g.seed, temperature=g.temperature,
                                   parallelism=g.parallelism)
        except ReplayMiss as exc:
            raise CampaignAbort(f"replay store is missing a response: {exc}") from exc
        save_corpus_dir(batch.candidates, corpus_dir)
        ids = [c.id for c in batch.candidates]
        batch_ev = ledger.append(
            "batch_created", batch_id=batch.batch_id, kind=kind, model=batch.model_name,
            n_requested=batch.n_requested, n_parsed=len(ids), failures=batch.failures,
            failure_reasons={str(k): v for k, v in batch.failure_reasons.items()},
            candidate_ids=ids, corpus_sha256=_corpus_digest(batch.candidates))
        for c in batch.candidates:
            ledger.append("candidate_status", candidate_id=c.id, status="raw")
    cands = {c.id: c for c in load_corpus_dir(corpus_dir)} if corpus_dir.exists() else {}
    cands = [cands[i] for i in batch_ev["candidate_ids"]]
    if _corpus_digest(cands) != batch_ev["corpus_sha256"]:
        raise CampaignAbort("candidate corpus on disk does not match the ledger")
    for c in cands:
        _restore(c, ledger.status_history(c.id), ledger.rejection_reason(c.id))

    # prefilter
    filt_ev = ledger.first("filter_report")
    if filt_ev is None:
        report = run_prefilter([c for c in cands if c.status == "raw"], cfg.filter, sandbox,
                               state_shape=(6, cfg.training.sim.history_len))
        if report.infrastructure_errors:
            raise CampaignAbort(f"{report.infrastructure_errors} sandbox infrastructure errors during filtering")
        for c in cands:
            _record_transitions(ledger, c, 1)
        (out / "filter_report.json").write_text(report.to_json() + "\n")
        filt_ev = ledger.append("filter_report", **report.summary())
    gate = "normalized" if kind == "state" else "compiled"
    passed = [c for c in cands if gate in c.history]

    # baseline first: it anchors the leaderboard and the early-stop threshold
    seeds = list(range(cfg.training.n_seeds))
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    baseline = builtin(BASELINE_STATE if kind == "state" else BASELINE_NETWORK)
    partner = builtin(BASELINE_NETWORK if kind == "state" else BASELINE_STATE)
    base_runs = _execute(_jobs_for([baseline], kind, seeds, ledger, partner), cfg, ds, None, ledger,
                         runs_dir, sandbox)[baseline.id]
    if not all(r.complete for r in base_runs):
        bad = next(r for r in base_runs if not r.complete)
        raise CampaignAbort(f"baseline run {bad.run_id} failed: {bad.rejected}")
    pred = build_stop_predictor(cfg, base_runs)
    if pred is not None and not ledger.find("early_stop_ready"):
        ledger.append("early_stop_ready", method=pred.method, threshold=pred.decision_threshold,
                      decision_epoch=cfg.early_stop.prefix_epochs)

    todo = [c for c in passed if c.status == gate]
    runs = _execute(_jobs_for(todo, kind, seeds, ledger, partner), cfg, ds, pred, ledger, runs_dir,
                    sandbox)

    # scoring
    reports = [final_score(base_runs, baseline.id)]
    for c in passed:
        if c.status == "scored":
            ev = ledger.first("scored", candidate_id=c.id)
            reports.append(ScoreReport(c.id, {int(k): v for k, v in ev["per_seed"].items()},
                                       ev["final"], ev["best"], ev.get("dataset", "")))
        if c.status != gate:
            continue
        crun = runs[c.id]
        failed = next((r for r in crun if not r.complete), None)
        if failed is None:
            c.advance("trained")
            rep = final_score(crun, c.id)
            c.advance("scored")
            reports.append(rep)
        elif failed.stopped_early:
            c.reject(f"early-stopped at epoch {failed.stop_epoch} (seed {failed.seed})")
        else:
            c.reject(f"training failure (seed {failed.seed}): {failed.rejected}")
        if ledger.status_of(c.id) != c.status:
            start = len(ledger.status_history(c.id))
            _record_transitions(ledger, c, start)
    for rep in reports:
        if not ledger.find("scored", candidate_id=rep.candidate_id):
            ledger.append("scored", candidate_id=rep.candidate_id, per_seed=rep.per_seed,
                          final=rep.final, best=rep.best, dataset=ds.name,
                          baseline=rep.candidate_id == baseline.id)

    board = leaderboard(reports, baseline.id)
    result = CampaignResult(cfg, ledger, board, {k: filt_ev[k] for k in
                                                  ("total", "compilable", "well_normalized")},
                            reconcile(ledger))
    result.reports = emit_reports(out, styles, ledger)
    return result


def _corpus_digest(cands: Sequence[CandidateDesign]) -> str:
    h = hashlib.sha256()
    for c in cands:
        h.update(c.id.encode() + b"\0" + c.source_text.encode() + b"\0")
    return h.hexdigest()[:16]


# -- accounting --------------------------------------------------------------

def reconcile(ledger: CampaignLedger) -> dict:
    """Check that every count the ledger implies agrees with every other; return the counts."""
    batch = ledger.first("batch_created")
    filt = ledger.first("filter_report")
    if batch is None or filt is None:
        raise AccountingError("ledger lacks generation or filter records")
    ids = batch["candidate_ids"]
    kind = batch["kind"]
    problems = []
    if batch["n_parsed"] + batch["failures"] != batch["n_requested"]:
        problems.append("parsed + failures != requested")
    if filt["total"] != len(ids):
        problems.append(f"filter total {filt['total']} != {len(ids)} candidates")
    hist = {i: ledger.status_history(i) for i in ids}
    compiled = sum("compiled" in h for h in hist.values())
    normalized = sum("normalized" in h for h in hist.values())
    if compiled != filt["compilable"]:
        problems.append(f"compiled {compiled} != filter compilable {filt['compilable']}")
    if kind == "state" and normalized != filt["well_normalized"]:
        problems.append(f"normalized {normalized} != filter well_normalized {filt['well_normalized']}")
    gate = "normalized" if kind == "state" else "compiled"
    passed = [i for i, h in hist.items() if gate in h]
    scored = [i for i in passed if hist[i][-1] == "scored"]
    stopped = [i for i in passed if hist[i][-1] == "rejected"
               and (ledger.rejection_reason(i) or "").startswith("early-stopped")]
    failed = [i for i in passed if hist[i][-1] == "rejected" and i not in stopped]
    pending = [i for i in passed if hist[i][-1] == gate]
    if len(scored) + len(stopped) + len(failed) + len(pending) != len(passed):
        problems.append("trained candidates do not partition into scored/stopped/failed/pending")
    score_events = ledger.find("scored")
    non_base = [e for e in score_events if not e.get("baseline")]
    if sorted(e["candidate_id"] for e in non_base) != sorted(scored):
        problems.append("scored events disagree with candidate statuses")
    if sum(bool(e.get("baseline")) for e in score_events) != 1:
        problems.append("expected exactly one baseline score")
    if problems:
        raise AccountingError("; ".join(problems))
    return {"requested": batch["n_requested"], "parsed": batch["n_parsed"],
            "generation_failures": batch["failures"], "total": len(ids), "compilable": compiled,
            "well_normalized": normalized if kind == "state" else None, "trained": len(passed),
            "scored": len(scored), "early_stopped": len(stopped), "training_failures": len(failed),
            "pending": len(pending), "leaderboard_rows": len(score_events),
            "runs": len(ledger.find("run_finished"))}


# -- reports -----------------------------------------------------------------

def format_score_table(rows: Sequence[LeaderboardRow], dataset: str) -> str:
    header = ("Rank", "Dataset", "Method", "Score", "Best seed", "Impr.")
    body = []
    for r in rows:
        method = f"{r.candidate_id} (original)" if r.baseline else r.candidate_id
        impr = "" if r.baseline or r.improvement is None else f"{100 * r.improvement:.1f}%"
        body.append((str(r.rank), dataset, method, f"{r.final:.3f}", f"{r.best:.3f}", impr))
    return _table(header, body, left=(1, 2))


def _table(header, body, left=(0,)) -> str:
    """Aligned text table; columns listed in ``left`` are left-justified, the rest right."""
    widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) if i in left else str(c).rjust(w)
                       for i, (c, w) in enumerate(zip(row, widths))).rstrip()
             for row in [header, *body]]
    lines.insert(1, "-" * max(len(l) for l in lines))
    return "\n".join(lines) + "\n"


def _rows_from_ledger(ledger: CampaignLedger) -> tuple[list[LeaderboardRow], str]:
    events = ledger.find("scored")
    base = [e for e in events if e.get("baseline")]
    if not base:
        raise AccountingError("missing baseline row")
    reps = [ScoreReport(e["candidate_id"], {int(k): v for k, v in e["per_seed"].items()}, e["final"],
                        e["best"], e.get("dataset", "")) for e in events]
    return leaderboard(reps, base[0]["candidate_id"]), events[0].get("dataset", "")


def emit_reports(out_dir, styles: Sequence[str], ledger: CampaignLedger | None = None) -> dict[str, list[str]]:
    """Write the requested report files under ``out_dir/reports`` and log them in the ledger."""
    out = Path(out_dir)
    ledger = ledger or CampaignLedger(out / "ledger.jsonl")
    rep_dir = out / "reports"
    rep_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, list[str]] = {}
    for style in styles:
        if style not in REPORT_STYLES:
            raise ValueError(f"unknown report style {style!r}")
        files = _EMITTERS[style](ledger, out, rep_dir)
        written[style] = [str(p) for p in files]
        for p in files:
            digest = sha256_file(p)
            rel = str(p.relative_to(out))
            if not ledger.find("report_emitted", style=style, path=rel, sha256=digest):
                ledger.append("report_emitted", style=style, path=rel, sha256=digest)
    return written


def _emit_filter(ledger, out, rep_dir):
    path = out / "filter_report.json"
    if not path.exists():
        raise AccountingError("ledger lacks filter results")
    data = json.loads(path.read_text())
    rep = FilterReport(**data["summary"])
    batch = ledger.first("batch_created")
    label = f"{batch['kind']} ({batch['model']})" if batch else "candidates"
    txt = rep_dir / "filter_table.txt"
    txt.write_text(format_filter_table([(label, rep)]))
    js = rep_dir / "filter_table.json"
    js.write_text(json.dumps({"label": label, **data["summary"]}, indent=2, sort_keys=True) + "\n")
    return [js, txt]


def _emit_scores(ledger, out, rep_dir):
    rows, dataset = _rows_from_ledger(ledger)
    js = rep_dir / "leaderboard.json"
    js.write_text(json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n")
    txt = rep_dir / "score_table.txt"
    txt.write_text(format_score_table(rows, dataset))
    return [js, txt]


def _emit_improvement(ledger, out, rep_dir):
    rows, dataset = _rows_from_ledger(ledger)
    base = next(r for r in rows if r.baseline)
    best = next((r for r in rows if not r.baseline), None)
    kind = (ledger.first("batch_created") or {}).get("kind", "")
    rec = {"dataset": dataset, "kind": kind, "baseline_id": base.candidate_id,
           "baseline_score": base.final,
           "best_id": best.candidate_id if best else None,
           "best_score": best.final if best else None,
           "improvement": improvement(best.final, base.final) if best else None}
    js = rep_dir / "improvement.json"
    js.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    impr = format_improvement(best.final, base.final) if best else "n/a"
    body = [(dataset, kind, f"{base.final:.3f}", f"{best.final:.3f}" if best else "n/a",
             best.candidate_id if best else "", impr)]
    txt = rep_dir / "improvement_table.txt"
    txt.write_text(_table(("Dataset", "Kind", "Original", "Best", "Best design", "Impr."), body,
                          left=(0, 1, 4)))
    return [js, txt]


def _emit_curves(ledger, out, rep_dir):
    train_buf, test_buf = io.StringIO(), io.StringIO()
    tw, vw = csv.writer(train_buf, lineterminator="\n"), csv.writer(test_buf, lineterminator="\n")
    tw.writerow(["candidate_id", "seed", "epoch", "train_reward"])
    vw.writerow(["candidate_id", "seed", "epoch", "test_eval"])
    for rec in sorted(ledger.find("run_finished"), key=lambda e: (e["candidate_id"], e["seed"])):
        run = _load_run(rec, out / "runs")
        for e, r in enumerate(run.reward_curve, 1):
            tw.writerow([rec["candidate_id"], rec["seed"], e, repr(r)])
        for e, v in run.test_evals:
            vw.writerow([rec["candidate_id"], rec["seed"], e, repr(v)])
    a, b = rep_dir / "train_curves.csv", rep_dir / "test_curves.csv"
    a.write_text(train_buf.getvalue())
    b.write_text(test_buf.getvalue())
    return [a, b]


def _emit_cv(ledger, out, rep_dir):
    src = out / "cv.json"
    if not src.exists():
        raise AccountingError(f"no cross-validation results at {src}")
    data = json.loads(src.read_text())
    reports = [es.CVReport(d["method"], d["k_folds"], d["fold_of"], d["fnr"], d["tnr"],
                           d["thresholds"], d["counts"], d["skipped"], d.get("tuning_fnr", []))
               for d in data]
    txt = rep_dir / "cv_table.txt"
    txt.write_text(es.format_cv_table(reports))
    return [txt]


_EMITTERS = {"filter_table": _emit_filter, "score_table": _emit_scores,
             "improvement_table": _emit_improvement, "curve_data": _emit_curves,
             "cv_table": _emit_cv}


# -- combination study -------------------------------------------------------

def _ranked(reports: Sequence[ScoreReport]) -> list[ScoreReport]:
    return sorted(reports, key=lambda r: (-r.final, r.candidate_id))


def combine_top(states: Sequence[ScoreReport], nets: Sequence[ScoreReport], k: int,
                k_nets: int | None = None) -> list[tuple[str, str]]:
    """The top-k states crossed with the top-k networks, state rank major."""
    k_nets = k if k_nets is None else k_nets
    if k < 1 or k_nets < 1:
        raise ValueError("k must be at least 1")
    for name, lst, need in (("states", states, k), ("networks", nets, k_nets)):
        if len({r.candidate_id for r in lst}) < need:
            raise ValueError(f"combine_top needs {need} scored {name}, have {len(lst)}")
    top_s = [r.candidate_id for r in _ranked(states)[:k]]
    top_n = [r.candidate_id for r in _ranked(nets)[:k_nets]]
    return [(s, n) for s in top_s for n in top_n]


def scored_reports(campaign_dir, include_baseline: bool = False) -> list[ScoreReport]:
    ledger = CampaignLedger(Path(campaign_dir) / "ledger.jsonl")
    return [ScoreReport(e["candidate_id"], {int(k): v for k, v in e["per_seed"].items()}, e["final"],
                        e["best"], e.get("dataset", ""))
            for e in ledger.find("scored") if include_baseline or not e.get("baseline")]


@dataclass
class CombinationResult:
    jobs: list[tuple[str, str]]
    scores: dict[tuple[str, str], ScoreReport] = field(default_factory=dict)
    stopped: list[tuple[str, str]] = field(default_factory=list)
    failed: list[tuple[str, str]] = field(default_factory=list)


def run_combination(state_dir, net_dir, out_dir, k_states: int, k_nets: int | None = None,
                    ds: TraceDataset | None = None, tcfg: TrainConfig | None = None,
                    stop_pred: es.StopPredictor | None = None, decision_epoch: int = 0,
                    dry_run: bool = False, sandbox: SandboxPolicy = SandboxPolicy()) -> CombinationResult:
    """Train every top-state x top-network pair; a dry run only lists the jobs."""
    jobs = combine_top(scored_reports(state_dir), scored_reports(net_dir), k_states, k_nets)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "combination_jobs.json").write_text(json.dumps(jobs, indent=1) + "\n")
    result = CombinationResult(jobs)
    if dry_run:
        return result
    if ds is None or tcfg is None:
        raise ValueError("training a combination needs a dataset and a training config")
    states = {c.id: c for c in load_corpus_dir(Path(state_dir) / "candidates")}
    nets = {c.id: c for c in load_corpus_dir(Path(net_dir) / "candidates")}
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    for s_id, n_id in jobs:
        pair = CandidateDesign(f"{s_id}+{n_id}", "state", states[s_id].source_text)
        job = _Job(pair, states[s_id], nets[n_id], tuple(range(tcfg.n_seeds)), {})
        runs = [r for _, r in _run_candidate(job, ds, tcfg, stop_pred, decision_epoch, runs_dir, sandbox)]
        if all(r.complete for r in runs):
            result.scores[(s_id, n_id)] = final_score(runs, pair.id)
        elif any(r.stopped_early for r in runs):
            result.stopped.append((s_id, n_id))
        else:
            result.failed.append((s_id, n_id))
    base_state = {r.candidate_id: r for r in scored_reports(state_dir, include_baseline=True)}
    base = next((r for cid, r in base_state.items() if cid == BASELINE_STATE), None)
    records = [{"state": s, "network": n, "median": r.final, "best": r.best,
                "per_seed": {str(k): v for k, v in r.per_seed.items()}}
               for (s, n), r in result.scores.items()]
    (out / "combination_scores.json").write_text(json.dumps({
        "baseline": base.final if base else None, "scores": records,
        "stopped": result.stopped, "failed": result.failed}, indent=1) + "\n")
    if base is not None and result.scores:
        (out / "combination_table.txt").write_text(format_combination_table(
            ds.name, base.final, scored_reports(state_dir), scored_reports(net_dir), result))
    return result


def format_combination_table(dataset: str, baseline: float, states: Sequence[ScoreReport],
                             nets: Sequence[ScoreReport], result: CombinationResult) -> str:
    """Best state, best network and best pair relative to the original design.

    The pair column is given twice: by median over seeds and by best seed.
    """
    best_s = max(r.final for r in states)
    best_n = max(r.final for r in nets)
    best_med = max(r.final for r in result.scores.values())
    best_best = max(r.best for r in result.scores.values())
    row = (dataset, format_improvement(best_s, baseline), format_improvement(best_n, baseline),
           format_improvement(best_med, baseline), format_improvement(best_best, baseline))
    return _table(("Dataset", "State", "Neural Net", "Combined (median)", "Combined (best of seeds)"),
                  [row])


__all__ = ["AccountingError", "CampaignAbort", "CampaignConfig", "CampaignLedger", "CampaignResult",
           "CombinationConfig", "ConfigError", "EarlyStopConfig", "GenerationConfig", "LeaderboardRow",
           "REPORT_STYLES", "combine_top", "emit_reports", "leaderboard", "reconcile",
           "run_campaign", "run_combination", "scored_reports"]
