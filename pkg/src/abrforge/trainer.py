"""Actor-critic training of (state, network) candidate pairs and the scoring protocol."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .candidates import (CandidateDesign, CandidateFailure, PolicyHandle, SandboxPolicy,
                         StateProgram, instantiate_network)
from .sim import LADDERS, Session, SimConfig, VideoManifest, synth_manifest
from .traces import Trace, TraceDataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "abrforge-ckpt-1"
SMOOTHING_WINDOW = 10

torch.set_num_threads(1)


class TrainingError(RuntimeError):
    pass


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_epochs: int = 40_000
    ckpt_interval: int = 500
    n_seeds: int = 5
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    entropy_start: float = 1.0
    entropy_end: float = 0.1
    n_chunks: int = 48
    chunk_duration_s: float = 4.0
    size_jitter: float = 0.0
    video_seed: int = 0
    random_start: bool = True
    keep_checkpoints: bool = True
    sim: SimConfig = SimConfig()

    def __post_init__(self):
        if self.n_epochs < 1 or self.ckpt_interval < 1:
            raise ValueError("n_epochs and ckpt_interval must be positive")
        if self.n_epochs % self.ckpt_interval:
            raise ValueError("ckpt_interval must divide n_epochs")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be at least 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def entropy_weight(self, epoch: int) -> float:
        """Linear decay from ``entropy_start`` at epoch 0 to ``entropy_end`` at the last epoch."""
        frac = min(epoch / max(self.n_epochs - 1, 1), 1.0)
        return self.entropy_start + (self.entropy_end - self.entropy_start) * frac

    def manifest(self, ladder) -> VideoManifest:
        return synth_manifest(ladder, self.n_chunks, self.chunk_duration_s, self.size_jitter,
                              self.video_seed)

    def to_dict(self) -> dict:
        return asdict(self)


# named profiles; full-scale budgets follow the published per-dataset schedule
PROFILES = {
    "full": TrainConfig(),
    "full-starlink": TrainConfig(n_epochs=4_000, ckpt_interval=100),
    "micro": TrainConfig(n_epochs=200, ckpt_interval=20, n_seeds=3, n_chunks=24),
    "smoke": TrainConfig(n_epochs=500, ckpt_interval=50, n_seeds=1),
}


class EarlyStopHook(Protocol):
    decision_epoch: int

    def __call__(self, run: "TrainingRun") -> str: ...


@dataclass
class TrainingRun:
    run_id: str
    state_id: str
    network_id: str
    seed: int
    reward_curve: list[float] = field(default_factory=list)
    checkpoints: list[tuple[int, np.ndarray]] = field(default_factory=list)
    test_evals: list[tuple[int, float]] = field(default_factory=list)
    stopped_early: bool = False
    stop_epoch: int | None = None
    rejected: str | None = None
    rejected_epoch: int | None = None
    dataset: str = ""
    state_shape: tuple[int, int] | None = None

    @property
    def epochs_completed(self) -> int:
        return len(self.reward_curve)

    @property
    def complete(self) -> bool:
        return not self.stopped_early and self.rejected is None

    def summary(self) -> dict:
        return {"run_id": self.run_id, "state_id": self.state_id, "network_id": self.network_id,
                "seed": self.seed, "epochs": self.epochs_completed,
                "stopped_early": self.stopped_early, "stop_epoch": self.stop_epoch,
                "rejected": self.rejected, "rejected_epoch": self.rejected_epoch,
                "n_test_evals": len(self.test_evals), "dataset": self.dataset}

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for e, r in enumerate(self.reward_curve, 1):
                fh.write(json.dumps({"epoch": e, "train_reward": r}) + "\n")
            for e, v in self.test_evals:
                fh.write(json.dumps({"epoch": e, "test_eval": v}) + "\n")

    @classmethod
    def read_log(cls, path, **fields) -> "TrainingRun":
        run = cls(**fields)
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if "train_reward" in rec:
                    run.reward_curve.append(rec["train_reward"])
                else:
                    run.test_evals.append((rec["epoch"], rec["test_eval"]))
        return run


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: np.ndarray, epoch: int, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    with open(path, "wb") as fh:
        np.savez(fh, version=np.array(CHECKPOINT_VERSION), epoch=np.array(epoch),
                 params=np.asarray(params, dtype="<f8"), meta=np.array(json.dumps(meta)))


def load_checkpoint(path) -> tuple[np.ndarray, int, dict]:
    with np.load(path) as data:
        version = str(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        return data["params"].copy(), int(data["epoch"]), json.loads(str(data["meta"]))


# -- evaluation --------------------------------------------------------------

def _probe_shape(prog: StateProgram, manifest: VideoManifest, sim: SimConfig) -> tuple[int, int]:
    probe = Trace.from_samples("shape-probe", [(0, 1.0), (1, 1.0)])
    return tuple(_state_of(prog, Session(probe, manifest, sim).observation()).shape)


def _state_of(prog: StateProgram, obs) -> np.ndarray:
    x = prog(obs)
    if not np.all(np.isfinite(x)):
        raise CandidateFailure("non-finite state", f"state contains {x[~np.isfinite(x)][0]}")
    return x


def evaluate_checkpoint(policy: PolicyHandle, state_prog: StateProgram, test_traces: Sequence[Trace],
                        manifest: VideoManifest, sim: SimConfig = SimConfig()) -> float:
    """Mean per-chunk reward of greedy (argmax) play, each test trace streamed once from its start."""
    if not test_traces:
        raise TrainingError("evaluation needs at least one test trace")
    sessions = [Session(t, manifest, sim) for t in test_traces]
    obs = [s.observation() for s in sessions]
    total, count = 0.0, 0
    while not sessions[0].done:
        states = []
        for tr, o in zip(test_traces, obs):
            try:
                states.append(_state_of(state_prog, o))
            except CandidateFailure as exc:
                raise TrainingError(f"state failed on test trace {tr.id}: {exc}") from exc
        x = torch.as_tensor(np.stack(states), dtype=torch.float32)
        with torch.no_grad():
            logits, _ = policy.logits_values(x)
        actions = torch.argmax(logits, dim=-1).tolist()
        for i, (s, a) in enumerate(zip(sessions, actions)):
            res, obs[i] = s.step(a)
            total += res.reward
            count += 1
    return total / count


# -- training ----------------------------------------------------------------

def _discounted(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def a2c_loss(policy: PolicyHandle, states: torch.Tensor, actions: torch.Tensor,
             returns: torch.Tensor, entropy_weight: float, advantage: torch.Tensor | None = None):
    """Policy-gradient loss with a critic baseline, entropy bonus and value regression.

    ``advantage`` defaults to returns minus the (detached) critic estimate.
    Returns ``(total, policy_term, value_term, entropy)``.
    """
    logits, values = policy.logits_values(states)
    log_probs = torch.log_softmax(logits, dim=-1)
    probs = log_probs.exp()
    chosen = log_probs.gather(1, actions[:, None])[:, 0]
    if advantage is None:
        advantage = (returns - values).detach()
    policy_term = -(chosen * advantage).mean()
    entropy = -(probs * log_probs).sum(-1).mean()
    value_term = 0.5 * ((returns - values) ** 2).mean()
    return policy_term - entropy_weight * entropy + value_term, policy_term, value_term, entropy


def make_optimizer(policy: PolicyHandle, cfg: TrainConfig) -> torch.optim.Optimizer:
    groups = [{"params": policy.actor_params, "lr": cfg.actor_lr}]
    if policy.critic_params:
        groups.append({"params": policy.critic_params, "lr": cfg.critic_lr})
    return torch.optim.Adam(groups)


def train(state_c: CandidateDesign, net_c: CandidateDesign, ds: TraceDataset, cfg: TrainConfig,
          seed: int, early_stop_hook: EarlyStopHook | None = None,
          sandbox: SandboxPolicy = SandboxPolicy(), run_id: str | None = None,
          checkpoint_dir=None, on_epoch: Callable[[int, float], None] | None = None) -> TrainingRun:
    """Train one seeded session.

    Each epoch streams one uniformly drawn training trace with actions sampled
    from the actor, then applies a single update. Every ``ckpt_interval``
    epochs the parameters are snapshotted and evaluated greedily on all test
    traces. Candidate failures mark the run rejected instead of raising.
    """
    if not ds.train or not ds.test:
        raise TrainingError(f"dataset {ds.name!r} needs non-empty train and test splits")
    run = TrainingRun(run_id or f"{state_c.id}+{net_c.id}@{seed}", state_c.id, net_c.id, seed,
                      dataset=ds.name)
    ladder = LADDERS.get(ds.bitrate_ladder_id)
    if ladder is None:
        raise TrainingError(f"unknown ladder {ds.bitrate_ladder_id!r}")
    manifest = cfg.manifest(ladder)
    sim = cfg.sim
    rng = np.random.default_rng(seed)

    try:
        prog = StateProgram(state_c, sandbox)
        shape = _probe_shape(prog, manifest, sim)
        policy = instantiate_network(net_c, shape, len(ladder), seed, sandbox)
    except CandidateFailure as exc:
        run.rejected, run.rejected_epoch = f"setup: {exc}", 0
        return run
    run.state_shape = shape
    opt = make_optimizer(policy, cfg)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None

    for epoch in range(cfg.n_epochs):
        trace = ds.train[int(rng.integers(len(ds.train)))]
        start = float(rng.uniform(0, trace.period_s)) if cfg.random_start else 0.0
        session = Session(trace, manifest, sim, start)
        obs = session.observation()
        states, actions, rewards = [], [], []
        try:
            while not session.done:
                x = _state_of(prog, obs)
                probs = policy.action_probs(x)
                a = int(rng.choice(len(probs), p=probs / probs.sum()))
                res, obs = session.step(a)
                states.append(x)
                actions.append(a)
                rewards.append(res.reward)
        except CandidateFailure as exc:
            run.rejected, run.rejected_epoch = f"state failure: {exc}", epoch + 1
            return run

        returns = _discounted(rewards, cfg.gamma)
        loss, *_ = a2c_loss(policy,
                            torch.as_tensor(np.stack(states), dtype=torch.float32),
                            torch.as_tensor(actions),
                            torch.as_tensor(returns, dtype=torch.float32),
                            cfg.entropy_weight(epoch))
        if not torch.isfinite(loss):
            run.rejected, run.rejected_epoch = "numeric divergence: non-finite loss", epoch + 1
            return run
        opt.zero_grad()
        loss.backward()
        opt.step()

        done = epoch + 1
        run.reward_curve.append(float(np.mean(rewards)))
        if on_epoch:
            on_epoch(done, run.reward_curve[-1])

        if done % cfg.ckpt_interval == 0:
            params = policy.flat_parameters()
            if cfg.keep_checkpoints:
                run.checkpoints.append((done, params.astype(np.float32)))
            if ckpt_dir:
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(ckpt_dir / f"{_safe(run.run_id)}-e{done:06d}.npz", params, done,
                                {"run_id": run.run_id, "state_shape": list(shape),
                                 "n_actions": len(ladder)})
            try:
                value = evaluate_checkpoint(policy, prog, ds.test, manifest, sim)
            except TrainingError as exc:
                run.rejected, run.rejected_epoch = str(exc), done
                return run
            run.test_evals.append((done, value))

        if early_stop_hook is not None and done == early_stop_hook.decision_epoch:
            if early_stop_hook(run) == "stop":
                run.stopped_early, run.stop_epoch = True, done
                return run
    return run


def _safe(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in text)


# -- scoring -----------------------------------------------------------------

def lower_median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    if not ordered:
        raise ScoringError("median of nothing")
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class ScoreReport:
    candidate_id: str
    per_seed: dict[int, float]
    final: float
    best: float
    dataset: str = ""
    network_id: str = ""


def final_score(runs: Sequence[TrainingRun], candidate_id: str | None = None) -> ScoreReport:
    """Median over seeds of the mean of each seed's last 10 test evaluations."""
    if not runs:
        raise ScoringError("no runs to score")
    per_seed = {}
    for r in runs:
        if not r.complete:
            raise ScoringError(f"score requires full runs ({r.run_id} "
                               f"{'stopped early' if r.stopped_early else 'rejected'})")
        if len(r.test_evals) < SMOOTHING_WINDOW:
            raise ScoringError(f"{r.run_id} has {len(r.test_evals)} test evaluations, "
                               f"scoring needs {SMOOTHING_WINDOW}")
        per_seed[r.seed] = math.fsum(v for _, v in r.test_evals[-SMOOTHING_WINDOW:]) / SMOOTHING_WINDOW
    vals = list(per_seed.values())
    return ScoreReport(candidate_id or runs[0].state_id, per_seed, lower_median(vals), max(vals),
                       runs[0].dataset, runs[0].network_id)


def improvement(new: float, baseline: float) -> float:
    if baseline == 0:
        raise ScoringError("baseline score of zero; improvement undefined")
    return (new - baseline) / abs(baseline)


def format_improvement(new: float, baseline: float) -> str:
    return f"{100.0 * improvement(new, baseline):.1f}%"


def train_seeds(state_c, net_c, ds, cfg: TrainConfig, seeds: Sequence[int] | None = None,
                **kwargs) -> list[TrainingRun]:
    seeds = list(seeds) if seeds is not None else list(range(cfg.n_seeds))
    return [train(state_c, net_c, ds, cfg, s, **kwargs) for s in seeds]
