"""Early-stopping predictors over training-curve prefixes.

Runs are ranked by final score, the top fraction is labelled positive, and a
classifier scores the first ``K`` epochs of reward. The decision threshold is
tuned so that no true top run in the tuning set would be stopped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

METHODS = ("reward_only", "text_only", "text_reward", "heuristic_max", "heuristic_last")
LEARNED = ("reward_only", "text_only", "text_reward")
TEXT_METHODS = ("text_only", "text_reward")

DEFAULT_PREFIX_EPOCHS = 10_000
DEFAULT_LENGTH = 1_000
TRUE_FRACTION = 0.01
SMOOTHED_FRACTION = 0.20


class EarlyStopError(ValueError):
    pass


def top_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)``, immune to binary rounding of the product."""
    if not 0 < fraction < 1:
        raise EarlyStopError(f"positive fraction must lie in (0, 1), got {fraction}")
    return math.ceil(round(fraction * n, 9))


# -- prefixes ----------------------------------------------------------------

def downsample(values: Sequence[float], length: int) -> np.ndarray:
    """Mean-pool into ``length`` contiguous bins; shorter input is linearly interpolated."""
    x = np.asarray(values, dtype=float)
    k = x.size
    if k == 0:
        raise EarlyStopError("empty curve prefix")
    if k == length:
        return x.copy()
    if k < length:
        return np.interp(np.linspace(0, k - 1, length), np.arange(k), x)
    edges = (np.arange(length + 1) * k) // length
    sums = np.add.reduceat(x, edges[:-1])
    return sums / np.diff(edges)


@dataclass(frozen=True)
class PrefixFeatures:
    pooled: np.ndarray
    max: float
    last: float

    @classmethod
    def of(cls, curve: Sequence[float], prefix_epochs: int, length: int) -> "PrefixFeatures":
        raw = np.asarray(curve[:prefix_epochs], dtype=float)
        if raw.size < prefix_epochs:
            raise EarlyStopError(f"curve has {raw.size} epochs, prefix needs {prefix_epochs}")
        return cls(downsample(raw, length), float(raw.max()), float(raw[-1]))


@dataclass
class RunRecord:
    """What the labeller needs from a finished run."""

    run_id: str
    reward_curve: Sequence[float]
    final_score: float | None
    code_text: str | None = None
    embedding: np.ndarray | None = None


@dataclass
class LabeledRun:
    run_id: str
    curve_prefix: np.ndarray
    prefix_max: float
    prefix_last: float
    final_score: float
    rank: int
    n_total: int
    label: bool
    code_embedding: np.ndarray | None = None

    @property
    def final_rank_percentile(self) -> float:
        """0 for the best run, approaching 1 for the worst."""
        return self.rank / self.n_total

    def is_top(self, fraction: float) -> bool:
        return self.rank < top_count(fraction, self.n_total)

    def relabel(self, fraction: float) -> "LabeledRun":
        return replace(self, label=self.is_top(fraction))

    @property
    def prefix_digest(self) -> str:
        return hashlib.sha256(np.asarray(self.curve_prefix, dtype="<f8").tobytes()).hexdigest()[:16]


def label_runs(runs: Iterable[RunRecord], positive_fraction: float,
               prefix_epochs: int = DEFAULT_PREFIX_EPOCHS, length: int = DEFAULT_LENGTH,
               embedder=None) -> list[LabeledRun]:
    """Rank by final score (ties: smaller run_id first) and mark the top ``ceil(f*N)`` positive."""
    runs = list(runs)
    for r in runs:
        if r.final_score is None or not math.isfinite(r.final_score):
            raise EarlyStopError(f"run {r.run_id} has no final score")
    n = len(runs)
    n_pos = top_count(positive_fraction, n)
    order = sorted(runs, key=lambda r: (-r.final_score, r.run_id))
    out = []
    for rank, r in enumerate(order):
        feats = PrefixFeatures.of(r.reward_curve, prefix_epochs, length)
        emb = r.embedding
        if emb is None and embedder is not None and r.code_text is not None:
            emb = embedder.embed(r.code_text)
        out.append(LabeledRun(r.run_id, feats.pooled, feats.max, feats.last, float(r.final_score),
                              rank, n, rank < n_pos,
                              None if emb is None else np.asarray(emb, dtype=float)))
    return out


def relabel(runs: Iterable[LabeledRun], fraction: float) -> list[LabeledRun]:
    return [r.relabel(fraction) for r in runs]


def write_labeled_runs(runs: Iterable[LabeledRun], path) -> None:
    with open(path, "w") as fh:
        for r in runs:
            fh.write(json.dumps({
                "run_id": r.run_id, "prefix_digest": r.prefix_digest,
                "percentile": r.final_rank_percentile, "rank": r.rank, "n_total": r.n_total,
                "final_score": r.final_score, "label": r.label,
                "top_1pct": r.is_top(TRUE_FRACTION), "top_20pct": r.is_top(SMOOTHED_FRACTION),
                "prefix": r.curve_prefix.tolist(), "prefix_max": r.prefix_max,
                "prefix_last": r.prefix_last,
                "embedding": None if r.code_embedding is None else r.code_embedding.tolist(),
            }) + "\n")


def read_labeled_runs(path) -> list[LabeledRun]:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            run = LabeledRun(d["run_id"], np.asarray(d["prefix"]), d["prefix_max"],
                             d["prefix_last"], d["final_score"], d["rank"], d["n_total"],
                             d["label"],
                             None if d["embedding"] is None else np.asarray(d["embedding"]))
            if run.prefix_digest != d["prefix_digest"]:
                raise EarlyStopError(f"prefix digest mismatch for {run.run_id}")
            out.append(run)
    return out


# -- models ------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    conv_channels: tuple[int, int] = (8, 16)
    kernel: int = 5
    pool: int = 4
    hidden: int = 32
    epochs: int = 300
    lr: float = 3e-3
    weight_decay: float = 1e-4
    class_weighting: bool = True


class CurveNet(nn.Module):
    """Two conv stages with pooling, then a dense head over pooled features and (max, last)."""

    def __init__(self, cfg: ClassifierConfig, embed_dim: int = 0, use_curve: bool = True):
        super().__init__()
        self.use_curve = use_curve
        c1, c2 = cfg.conv_channels
        n_in = embed_dim
        if use_curve:
            self.conv = nn.Sequential(
                nn.Conv1d(1, c1, cfg.kernel, padding=cfg.kernel // 2), nn.ReLU(), nn.MaxPool1d(cfg.pool),
                nn.Conv1d(c1, c2, cfg.kernel, padding=cfg.kernel // 2), nn.ReLU(),
                nn.AdaptiveMaxPool1d(4))
            n_in += c2 * 4 + 2
        self.head = nn.Sequential(nn.Linear(n_in, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, 1))

    def forward(self, curve, extras, emb):
        parts = []
        if self.use_curve:
            parts += [self.conv(curve[:, None, :]).flatten(1), extras]
        if emb is not None:
            parts.append(emb)
        return self.head(torch.cat(parts, dim=1))[:, 0]


@dataclass
class StopPredictor:
    method: str
    decision_threshold: float | None = None
    model: CurveNet | None = None
    center: float = 0.0
    scale: float = 1.0
    length: int = DEFAULT_LENGTH
    prefix_epochs: int = DEFAULT_PREFIX_EPOCHS
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise EarlyStopError(f"unknown method {self.method!r}")
        if self.method not in LEARNED and self.model is not None:
            raise EarlyStopError("heuristic predictors carry no learned parameters")

    def with_threshold(self, threshold: float) -> "StopPredictor":
        return replace(self, decision_threshold=float(threshold))

    def _tensors(self, runs: Sequence[LabeledRun]):
        curve = torch.as_tensor((np.stack([r.curve_prefix for r in runs]) - self.center) / self.scale,
                                dtype=torch.float32)
        extras = torch.as_tensor([[(r.prefix_max - self.center) / self.scale,
                                   (r.prefix_last - self.center) / self.scale] for r in runs],
                                 dtype=torch.float32)
        emb = None
        if self.method in TEXT_METHODS:
            missing = [r.run_id for r in runs if r.code_embedding is None]
            if missing:
                raise EarlyStopError(f"{self.method} needs code embeddings (missing for {missing[0]})")
            emb = torch.as_tensor(np.stack([r.code_embedding for r in runs]), dtype=torch.float32)
        return curve, extras, emb

    def scores(self, runs: Sequence[LabeledRun]) -> np.ndarray:
        if self.method == "heuristic_max":
            return np.array([r.prefix_max for r in runs], dtype=float)
        if self.method == "heuristic_last":
            return np.array([r.prefix_last for r in runs], dtype=float)
        if self.model is None:
            raise EarlyStopError(f"{self.method} predictor is untrained")
        with torch.no_grad():
            return torch.sigmoid(self.model(*self._tensors(runs))).double().numpy()

    def score(self, run: LabeledRun) -> float:
        return float(self.scores([run])[0])


def train_predictor(method: str, train_set: Sequence[LabeledRun], seed: int = 0,
                    cfg: ClassifierConfig = ClassifierConfig()) -> StopPredictor:
    """Fit a predictor on runs carrying smoothed labels; heuristics need no fit."""
    if method not in METHODS:
        raise EarlyStopError(f"unknown method {method!r}")
    if not train_set:
        raise EarlyStopError("empty training set")
    length = len(train_set[0].curve_prefix)
    if method not in LEARNED:
        return StopPredictor(method, length=length, seed=seed)
    y = np.array([r.label for r in train_set], dtype=float)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise EarlyStopError("training set needs both positive and negative runs")

    values = np.concatenate([r.curve_prefix for r in train_set])
    center = float(np.median(values))
    scale = float(np.std(values)) or 1.0
    torch.manual_seed(seed)
    embed_dim = 0
    if method in TEXT_METHODS:
        if any(r.code_embedding is None for r in train_set):
            raise EarlyStopError(f"{method} needs code embeddings for every training run")
        embed_dim = len(train_set[0].code_embedding)
    model = CurveNet(cfg, embed_dim, use_curve=method != "text_only")
    pred = StopPredictor(method, model=model, center=center, scale=scale, length=length, seed=seed)

    inputs = pred._tensors(train_set)
    target = torch.as_tensor(y, dtype=torch.float32)
    pos_weight = torch.tensor((len(y) - n_pos) / n_pos if cfg.class_weighting else 1.0)
    loss_fn = nn.BCEWithLogitsLoss(pos_weight=pos_weight)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    for _ in range(cfg.epochs):
        opt.zero_grad()
        loss = loss_fn(model(*inputs), target)
        loss.backward()
        opt.step()
    model.eval()
    pred.meta["train_loss"] = loss.item()
    return pred


def tune_threshold(pred: StopPredictor, tuning_set: Sequence[LabeledRun]) -> float:
    """Largest threshold keeping every positive at or above it: the minimum positive score."""
    pos = [r for r in tuning_set if r.label]
    if not pos:
        raise EarlyStopError("tuning set has no positive runs")
    return float(pred.scores(pos).min())


def predict_stop(pred: StopPredictor, prefix, embedding=None) -> str:
    """``"continue"`` iff the score reaches the threshold (ties continue).

    ``prefix`` is either a :class:`LabeledRun` or the raw first-K reward curve.
    """
    if pred.decision_threshold is None:
        raise EarlyStopError("predictor threshold has not been tuned")
    if isinstance(prefix, LabeledRun):
        run = prefix if embedding is None else replace(prefix, code_embedding=np.asarray(embedding))
    else:
        curve = np.asarray(prefix, dtype=float)
        feats = PrefixFeatures.of(curve, curve.size, pred.length)
        run = LabeledRun("query", feats.pooled, feats.max, feats.last, 0.0, 0, 1, False,
                         None if embedding is None else np.asarray(embedding, dtype=float))
    return "continue" if pred.score(run) >= pred.decision_threshold else "stop"


class StopHook:
    """Adapter letting the trainer consult a tuned predictor at epoch ``K``."""

    def __init__(self, pred: StopPredictor, decision_epoch: int, embedding=None):
        self.pred = pred
        self.decision_epoch = decision_epoch
        self.embedding = embedding
        self.decisions: list[tuple[str, str]] = []

    def __call__(self, run) -> str:
        decision = predict_stop(self.pred, run.reward_curve[:self.decision_epoch], self.embedding)
        self.decisions.append((run.run_id, decision))
        return decision


# -- evaluation --------------------------------------------------------------

def rates(pred_continue: np.ndarray, positive: np.ndarray) -> tuple[float | None, float | None, dict]:
    """(FNR, TNR, counts); a rate is None when its denominator is empty."""
    pred_continue = np.asarray(pred_continue, bool)
    positive = np.asarray(positive, bool)
    fn = int(np.sum(positive & ~pred_continue))
    tp = int(np.sum(positive & pred_continue))
    tn = int(np.sum(~positive & ~pred_continue))
    fp = int(np.sum(~positive & pred_continue))
    fnr = fn / (fn + tp) if fn + tp else None
    tnr = tn / (tn + fp) if tn + fp else None
    return fnr, tnr, {"fn": fn, "tp": tp, "tn": tn, "fp": fp}


@dataclass
class CVReport:
    method: str
    k_folds: int
    fold_of: dict[str, int]
    fnr: list[float | None]
    tnr: list[float | None]
    thresholds: list[float | None]
    counts: list[dict]
    skipped: list[int] = field(default_factory=list)
    tuning_fnr: list[float | None] = field(default_factory=list)

    @staticmethod
    def _mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_fnr(self) -> float | None:
        return self._mean(self.fnr)

    @property
    def mean_tnr(self) -> float | None:
        return self._mean(self.tnr)

    @property
    def pooled(self) -> tuple[float | None, float | None]:
        tot = {k: sum(c.get(k, 0) for c in self.counts) for k in ("fn", "tp", "tn", "fp")}
        fnr = tot["fn"] / (tot["fn"] + tot["tp"]) if tot["fn"] + tot["tp"] else None
        tnr = tot["tn"] / (tot["tn"] + tot["fp"]) if tot["tn"] + tot["fp"] else None
        return fnr, tnr

    def to_dict(self) -> dict:
        return {"method": self.method, "k_folds": self.k_folds, "fnr": self.fnr, "tnr": self.tnr,
                "mean_fnr": self.mean_fnr, "mean_tnr": self.mean_tnr,
                "pooled_fnr": self.pooled[0], "pooled_tnr": self.pooled[1],
                "thresholds": self.thresholds, "counts": self.counts, "skipped": self.skipped,
                "tuning_fnr": self.tuning_fnr, "fold_of": self.fold_of}


def assign_folds(runs: Sequence[LabeledRun], k_folds: int, seed: int,
                 true_fraction: float = TRUE_FRACTION) -> dict[str, int]:
    """Seeded fold assignment, stratified on the true label so positives spread evenly."""
    rng = np.random.default_rng(seed)
    fold_of = {}
    for group in (True, False):
        ids = sorted(r.run_id for r in runs if r.is_top(true_fraction) == group)
        for i, j in enumerate(rng.permutation(len(ids))):
            fold_of[ids[j]] = i % k_folds
    return fold_of


def cross_validate(runs: Sequence[LabeledRun], method: str, k_folds: int = 5, seed: int = 0,
                   true_fraction: float = TRUE_FRACTION, smoothed_fraction: float = SMOOTHED_FRACTION,
                   cfg: ClassifierConfig = ClassifierConfig()) -> CVReport:
    """Train on each fold's 1/k share and evaluate on the rest.

    Fitting uses smoothed labels, threshold tuning uses true labels on the
    same training fold, and FNR/TNR are measured against true labels on the
    held-out runs.
    """
    if k_folds < 2:
        raise EarlyStopError("k_folds must be at least 2")
    runs = list(runs)
    fold_of = assign_folds(runs, k_folds, seed, true_fraction)
    report = CVReport(method, k_folds, fold_of, [], [], [], [])
    for fold in range(k_folds):
        train = [r for r in runs if fold_of[r.run_id] == fold]
        held = [r for r in runs if fold_of[r.run_id] != fold]
        if not any(r.is_top(true_fraction) for r in train):
            log.warning("fold %d has no top runs to tune on; skipped", fold)
            report.skipped.append(fold)
            report.fnr.append(None)
            report.tnr.append(None)
            report.thresholds.append(None)
            report.counts.append({})
            report.tuning_fnr.append(None)
            continue
        pred = train_predictor(method, relabel(train, smoothed_fraction), seed + fold, cfg)
        pred = pred.with_threshold(tune_threshold(pred, relabel(train, true_fraction)))
        report.tuning_fnr.append(rates(pred.scores(train) >= pred.decision_threshold,
                                       [r.is_top(true_fraction) for r in train])[0])
        cont = pred.scores(held) >= pred.decision_threshold
        fnr, tnr, counts = rates(cont, [r.is_top(true_fraction) for r in held])
        report.fnr.append(fnr)
        report.tnr.append(tnr)
        report.thresholds.append(pred.decision_threshold)
        report.counts.append(counts)
    return report


def _pct(v):
    return "n/a" if v is None else f"{100 * v:.1f}%"


def format_cv_table(reports: Sequence[CVReport]) -> str:
    """Two-panel layout: false negative rate and true negative rate per method."""
    lines = []
    for title, attr, pooled_i in (("False negative rate", "fnr", 0), ("True negative rate", "tnr", 1)):
        lines.append(title)
        lines.append(f"  {'method':<16}{'mean':>8}{'std':>8}{'pooled':>9}  per-fold")
        for rep in reports:
            vals = [v for v in getattr(rep, attr) if v is not None]
            mean = float(np.mean(vals)) if vals else None
            std = float(np.std(vals)) if vals else None
            folds = " ".join(_pct(v) for v in getattr(rep, attr))
            lines.append(f"  {rep.method:<16}{_pct(mean):>8}{_pct(std):>8}"
                         f"{_pct(rep.pooled[pooled_i]):>9}  {folds}")
        lines.append("")
    return "\n".join(lines)


# -- synthetic run families --------------------------------------------------

def synthetic_runs(n: int = 2000, prefix_epochs: int = 200, seed: int = 0,
                   family: str = "noisy") -> list[RunRecord]:
    """Synthetic (curve, final score) populations for exercising the predictor suite.

    ``noisy``: latent quality q sets the curve's plateau; the final score is q
    plus noise, so the prefix is informative but imperfect.
    ``separable``: three tiers (top 1%, next 19%, bottom 80%) with
    non-overlapping curves; the top tier's curves are noise-free.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(prefix_epochs) / prefix_epochs
    runs = []
    if family == "noisy":
        for i in range(n):
            q = rng.normal()
            curve = q * (1 - np.exp(-5 * t)) + rng.normal(0, 0.5, prefix_epochs)
            runs.append(RunRecord(f"syn-{i:05d}", curve, float(q + rng.normal(0, 0.3)),
                                  code_text=f"design {i} quality {round(q, 1)}"))
        return runs
    if family != "separable":
        raise ValueError(f"unknown family {family!r}")
    n_top = top_count(TRUE_FRACTION, n)
    n_mid = top_count(SMOOTHED_FRACTION, n) - n_top
    shape = 1 - np.exp(-5 * t)
    for i in rng.permutation(n):
        if i < n_top:
            curve, final = 3.0 * shape, 10.0 + i / n
        elif i < n_top + n_mid:
            curve, final = 1.5 * shape + rng.normal(0, 0.1, prefix_epochs), 5.0 + rng.uniform()
        else:
            curve, final = rng.uniform(-1.0, 0.0) * shape + rng.normal(0, 0.1, prefix_epochs), rng.uniform()
        runs.append(RunRecord(f"sep-{i:05d}", curve, float(final), code_text=f"tier design {i}"))
    return runs
