"""Candidate corpora on disk: one code file per candidate plus a JSON sidecar."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .design import CandidateDesign

BASELINE_STATE = "pensieve_original"
BASELINE_NETWORK = "original_a2c"


def load_corpus_dir(path) -> list[CandidateDesign]:
    root = Path(path)
    out = []
    for meta_path in sorted(root.glob("*.json")):
        meta = json.loads(meta_path.read_text())
        code = meta_path.with_suffix(".py").read_text()
        extra = {k: v for k, v in meta.items() if k not in ("id", "kind", "provenance")}
        out.append(CandidateDesign(meta["id"], meta["kind"], code,
                                   meta.get("provenance", "manual"), extra))
    return out


def save_corpus_dir(candidates, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for c in candidates:
        (root / f"{c.id}.py").write_text(c.source_text)
        meta = {"id": c.id, "kind": c.kind, "provenance": c.provenance, **c.metadata}
        (root / f"{c.id}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_builtin_corpus() -> list[CandidateDesign]:
    with resources.as_file(resources.files(__package__) / "builtin") as root:
        return load_corpus_dir(root)


def builtin(candidate_id: str) -> CandidateDesign:
    for c in load_builtin_corpus():
        if c.id == candidate_id:
            return c
    raise KeyError(f"no builtin candidate {candidate_id!r}")
