"""Command-line entry point.

Exit codes: 0 on success (candidate-level failures are warnings), 2 for
usage or configuration errors, 3 for infrastructure failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFRA = 3

log = logging.getLogger("abrforge")


def _dataset(arg: str, ladder: str | None = None):
    from .campaign import CampaignConfig

    return CampaignConfig("adhoc", ".", dataset=arg, ladder=ladder).load_dataset()


def _candidate(ref: str, kind: str):
    """A builtin id, a ``.py`` file (sidecar optional) or ``corpus_dir:id``."""
    from .candidates import CandidateDesign, builtin, load_corpus_dir

    path = Path(ref)
    if path.suffix == ".py" and path.is_file():
        return CandidateDesign(path.stem, kind, path.read_text(), "manual")
    if ":" in ref and Path(ref.split(":", 1)[0]).is_dir():
        root, cid = ref.split(":", 1)
        for c in load_corpus_dir(root):
            if c.id == cid:
                return c
        raise KeyError(f"{cid!r} not in {root}")
    cand = builtin(ref)
    if cand.kind != kind:
        raise ValueError(f"{ref} is a {cand.kind} candidate, expected {kind}")
    return cand


def cmd_ingest(args) -> int:
    from .traces import (STARLINK_SCALE, TraceDataset, format_stats, ingest_directory, split_dataset,
                         stats_for, write_manifest)

    scale = STARLINK_SCALE if args.scale == "starlink" else float(args.scale)
    res = ingest_directory(args.directory, args.format, scale, args.source_tag)
    for name, why in sorted(res.rejected.items()):
        log.warning("rejected %s: %s", name, why)
    train, test = split_dataset(res.traces, args.test_fraction, args.seed)
    ds = TraceDataset(args.name, train, test, scale, args.ladder)
    write_manifest(ds, Path(args.out) / "manifest.yaml")
    print(format_stats(args.name, stats_for(train), stats_for(test)))
    return EXIT_OK


def cmd_generate(args) -> int:
    from .candidates import save_corpus_dir
    from .generator import generate_batch
    from .llm import make_client

    from .campaign import GenerationConfig

    store = args.store
    if store is None and args.mode == "replay":
        store = GenerationConfig(kind=args.kind).store_path()
    client = make_client(args.mode, args.model, store)
    batch = generate_batch(client, args.kind, args.n, seed=args.seed, temperature=args.temperature,
                           parallelism=args.parallelism)
    save_corpus_dir(batch.candidates, args.out)
    for i, why in sorted(batch.failure_reasons.items()):
        log.warning("response %d unusable: %s", i, why)
    print(f"{batch.batch_id}: {len(batch.candidates)} parsed, {batch.failures} failed "
          f"of {batch.n_requested} requested")
    return EXIT_OK


def cmd_filter(args) -> int:
    from .candidates import load_corpus_dir
    from .filters import FuzzConfig, format_filter_table, run_prefilter

    cands = load_corpus_dir(args.corpus)
    if not cands:
        print(f"no candidates in {args.corpus}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = FuzzConfig(n_samples=args.samples, threshold=args.threshold, seed=args.seed)
    report = run_prefilter(cands, cfg, workers=args.workers)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(format_filter_table([(args.label or cands[0].kind, report)]), end="")
    if report.infrastructure_errors:
        log.error("%d sandbox infrastructure errors", report.infrastructure_errors)
        return EXIT_INFRA
    return EXIT_OK


def cmd_train(args) -> int:
    from .campaign import training_config
    from .trainer import final_score, train

    state = _candidate(args.state, "state")
    net = _candidate(args.network, "network")
    ds = _dataset(args.dataset, args.ladder)
    overrides = {"profile": args.profile}
    if args.epochs:
        overrides["n_epochs"] = args.epochs
    if args.ckpt_interval:
        overrides["ckpt_interval"] = args.ckpt_interval
    cfg = training_config(overrides)
    seeds = args.seeds if args.seeds else list(range(cfg.n_seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in seeds:
        run = train(state, net, ds, cfg, seed, checkpoint_dir=out / "checkpoints")
        run.write_log(out / f"{run.run_id.replace('/', '_')}.jsonl")
        (out / f"{run.run_id.replace('/', '_')}.summary.json").write_text(
            json.dumps({**run.summary(), "config": cfg.to_dict()}, indent=2, default=str) + "\n")
        runs.append(run)
        status = "rejected: " + run.rejected if run.rejected else "complete"
        print(f"{run.run_id}: {run.epochs_completed} epochs, {len(run.test_evals)} evaluations, {status}")
    if all(r.complete for r in runs) and all(len(r.test_evals) >= 10 for r in runs):
        rep = final_score(runs, f"{state.id}+{net.id}")
        print(f"final score {rep.final:.3f} (per seed: "
              + ", ".join(f"{s}={v:.3f}" for s, v in sorted(rep.per_seed.items())) + ")")
    return EXIT_OK


def cmd_score(args) -> int:
    from .trainer import ScoringError, TrainingRun, final_score

    runs = []
    for p in args.logs:
        summary = Path(p).with_suffix(".summary.json")
        meta = json.loads(summary.read_text()) if summary.exists() else {}
        run = TrainingRun.read_log(p, run_id=meta.get("run_id", Path(p).stem),
                                   state_id=meta.get("state_id", ""), network_id=meta.get("network_id", ""),
                                   seed=meta.get("seed", len(runs)), dataset=meta.get("dataset", ""))
        run.stopped_early = bool(meta.get("stopped_early"))
        run.rejected = meta.get("rejected")
        runs.append(run)
    try:
        rep = final_score(runs, args.name)
    except ScoringError as exc:
        print(f"cannot score: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    doc = {"candidate_id": rep.candidate_id, "final": rep.final, "best": rep.best,
           "per_seed": {str(k): v for k, v in sorted(rep.per_seed.items())}}
    if args.baseline is not None:
        from .trainer import format_improvement
        doc["improvement"] = format_improvement(rep.final, args.baseline)
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_combine(args) -> int:
    from .campaign import CampaignConfig, build_stop_predictor, run_combination

    if args.dry_run:
        res = run_combination(args.states, args.networks, args.out, args.k, args.k_nets, dry_run=True)
        print(f"{len(res.jobs)} combination jobs written to {Path(args.out) / 'combination_jobs.json'}")
        return EXIT_OK
    if not args.config:
        print("error: training combinations needs --config (or use --dry-run)", file=sys.stderr)
        return EXIT_CONFIG
    cfg = CampaignConfig.load(args.config)
    ds = cfg.load_dataset()
    pred = None
    if cfg.early_stop.enabled and cfg.early_stop.apply_to_combinations:
        from .campaign import CampaignLedger, _load_run
        from .candidates import BASELINE_STATE

        ledger = CampaignLedger(Path(args.states) / "ledger.jsonl")
        base = [_load_run(r, Path(args.states) / "runs")
                for r in ledger.find("run_finished", candidate_id=BASELINE_STATE)]
        pred = build_stop_predictor(cfg, base)
    res = run_combination(args.states, args.networks, args.out, args.k, args.k_nets, ds, cfg.training,
                          pred, cfg.early_stop.prefix_epochs)
    print(f"{len(res.jobs)} jobs: {len(res.scores)} scored, {len(res.stopped)} stopped early, "
          f"{len(res.failed)} failed")
    table = Path(args.out) / "combination_table.txt"
    if table.exists():
        print(table.read_text(), end="")
    return EXIT_OK


def cmd_cv(args) -> int:
    from . import early_stop as es

    if args.labeled:
        runs = es.read_labeled_runs(args.labeled)
    else:
        from .llm import HashingEmbedder

        recs = es.synthetic_runs(args.synthetic, args.prefix_epochs, args.seed, args.family)
        runs = es.label_runs(recs, es.TRUE_FRACTION, args.prefix_epochs, args.length,
                             embedder=HashingEmbedder())
    reports = [es.cross_validate(runs, m, args.k, args.seed) for m in args.methods]
    if args.out:
        Path(args.out).write_text(json.dumps([r.to_dict() for r in reports], indent=1) + "\n")
    print(es.format_cv_table(reports), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .campaign import REPORT_STYLES, emit_reports

    styles = args.style or [s for s in REPORT_STYLES if s != "cv_table"]
    written = emit_reports(args.campaign_dir, styles)
    for style, paths in written.items():
        for p in paths:
            if p.endswith(".txt"):
                print(Path(p).read_text())
    return EXIT_OK


def cmd_campaign(args) -> int:
    from .campaign import CampaignConfig, run_campaign

    cfg = CampaignConfig.load(args.config)
    if args.output_dir:
        from dataclasses import replace

        cfg = replace(cfg, output_dir=str(Path(args.output_dir).resolve()))
    if args.workers:
        from dataclasses import replace

        cfg = replace(cfg, workers=args.workers)
    res = run_campaign(cfg)
    a = res.accounting
    print(f"{a['total']} candidates, {a['compilable']} compilable"
          + (f", {a['well_normalized']} well normalized" if a["well_normalized"] is not None else "")
          + f"; {a['scored']} scored, {a['early_stopped']} stopped early, "
          f"{a['training_failures']} failed in training")
    print((cfg.out / "reports" / "score_table.txt").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abrforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="load a trace directory into a dataset manifest")
    s.add_argument("directory")
    s.add_argument("--name", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", default="columns")
    s.add_argument("--scale", default="1.0", help="throughput factor or 'starlink' for 1/8")
    s.add_argument("--source-tag", default="custom")
    s.add_argument("--ladder", default="low")
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("generate", help="request a batch of candidate designs")
    s.add_argument("--kind", choices=("state", "network"), required=True)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--model", default="fixture-llm")
    s.add_argument("--mode", choices=("live", "record", "replay"), default="replay")
    s.add_argument("--store", help="record/replay JSONL store (replay defaults to the shipped corpus)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--parallelism", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("filter", help="compile and normalization checks over a corpus")
    s.add_argument("corpus")
    s.add_argument("--threshold", type=float, default=100.0)
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--label")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_filter)

    s = sub.add_parser("train", help="train a (state, network) pair")
    s.add_argument("--state", default="pensieve_original")
    s.add_argument("--network", default="original_a2c")
    s.add_argument("--dataset", default="demo", help="'demo' or a manifest path")
    s.add_argument("--ladder")
    s.add_argument("--profile", default="micro")
    s.add_argument("--epochs", type=int)
    s.add_argument("--ckpt-interval", type=int)
    s.add_argument("--seeds", type=int, nargs="*")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("score", help="final score from run logs")
    s.add_argument("logs", nargs="+")
    s.add_argument("--name")
    s.add_argument("--baseline", type=float, help="baseline score for the improvement column")
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("combine", help="top-k states x top-k networks study")
    s.add_argument("--states", required=True, help="state campaign directory")
    s.add_argument("--networks", required=True, help="network campaign directory")
    s.add_argument("--k", type=int, default=30)
    s.add_argument("--k-nets", type=int)
    s.add_argument("--config", help="campaign config supplying dataset and training settings")
    s.add_argument("--dry-run", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_combine)

    s = sub.add_parser("cv", help="cross-validate early-stop predictors")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--labeled", help="labeled-run store (JSONL)")
    src.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic runs")
    s.add_argument("--family", default="noisy", choices=("noisy", "separable"))
    s.add_argument("--prefix-epochs", type=int, default=200)
    s.add_argument("--length", type=int, default=200)
    s.add_argument("--methods", nargs="+", default=["reward_only", "text_only", "text_reward",
                                                      "heuristic_max", "heuristic_last"])
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_cv)

    s = sub.add_parser("report", help="emit reports for a campaign directory")
    s.add_argument("campaign_dir")
    s.add_argument("--style", action="append",
                   choices=("filter_table", "score_table", "improvement_table", "curve_data", "cv_table"))
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("campaign", help="run or resume a full campaign from a YAML config")
    s.add_argument("config")
    s.add_argument("--output-dir")
    s.add_argument("--workers", type=int)
    s.set_defaults(fn=cmd_campaign)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .campaign import AccountingError, CampaignAbort, ConfigError
    from .llm import ReplayMiss, TransportError
    from .traces import TraceError

    try:
        return args.fn(args)
    except (CampaignAbort, AccountingError, ReplayMiss, TransportError) as exc:
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except (ConfigError, KeyError, ValueError, TraceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
