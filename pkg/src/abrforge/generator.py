"""Prompt rendering and candidate batch generation."""

from __future__ import annotations

import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import yaml

from .candidates import CandidateDesign, builtin
from .candidates.design import KINDS
from .llm import CompletionClient, ReplayMiss, TransportError, with_retries

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 1.0
_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    role: str
    base_code: str
    cot_directive: str
    output_format: str
    normalization_directive: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown template kind {self.kind!r}")
        if (self.normalization_directive is not None) != (self.kind == "state"):
            raise ValueError("a normalization directive belongs to state templates only")

    @classmethod
    def load(cls, kind: str, path=None) -> "PromptTemplate":
        """Read a template from YAML; ``base_code: builtin:<id>`` pulls in shipped code."""
        if path is None:
            text = (resources.files("abrforge") / "prompts" / f"{kind}.yaml").read_text()
        else:
            text = open(path).read()
        doc = yaml.safe_load(text)
        base = doc["base_code"]
        if base.startswith("builtin:"):
            base = builtin(base.split(":", 1)[1]).source_text
        return cls(doc["kind"], doc["role"].strip(), base.strip(), doc["cot_directive"].strip(),
                   doc["output_format"].strip(),
                   (doc.get("normalization_directive") or "").strip() or None)

    @property
    def digest(self) -> str:
        return hashlib.sha256(render_prompt(self.kind, self).encode()).hexdigest()


def render_prompt(kind: str, template: PromptTemplate) -> str:
    if kind != template.kind:
        raise ValueError(f"template is for {template.kind!r}, asked to render {kind!r}")
    parts = [
        template.role,
        "Current implementation:\n```python\n" + template.base_code + "\n```",
        template.cot_directive,
    ]
    if kind == "state":
        parts.append(template.normalization_directive)
    parts.append(template.output_format)
    return "\n\n".join(parts) + "\n"


def extract_code(response: str) -> str:
    """Body of the last fenced code block; earlier blocks are treated as sketches."""
    blocks = _FENCE.findall(response or "")
    if not blocks:
        raise ExtractionError("response contains no fenced code block")
    code = blocks[-1].strip("\n")
    if not code.strip():
        raise ExtractionError("last code block is empty")
    return code + "\n"


@dataclass
class GenerationBatch:
    batch_id: str
    kind: str
    model_name: str
    n_requested: int
    candidates: list[CandidateDesign] = field(default_factory=list)
    failures: int = 0
    failure_reasons: dict[int, str] = field(default_factory=dict)

    @property
    def closes(self) -> bool:
        return len(self.candidates) + self.failures == self.n_requested


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()


def generate_batch(client: CompletionClient, kind: str, n: int, template: PromptTemplate | None = None,
                   seed: int = 0, temperature: float = DEFAULT_TEMPERATURE, batch_id: str | None = None,
                   parallelism: int = 1, retries: int = 3, backoff_s: float = 1.0) -> GenerationBatch:
    """Request ``n`` independent completions and parse each into a candidate.

    Completion ``i`` uses seed ``seed + i`` so that record/replay can key on it.
    Transport errors are retried with backoff and then counted as failures;
    a replay miss is an infrastructure problem and propagates.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    template = template or PromptTemplate.load(kind)
    prompt = render_prompt(kind, template)
    batch_id = batch_id or f"{kind}-{_slug(client.model)}-s{seed}"

    def one(i: int):
        try:
            text = with_retries(lambda: client.complete(prompt, temperature, seed + i),
                                attempts=retries, backoff_s=backoff_s)
        except TransportError as exc:
            return i, None, f"transport: {exc}"
        try:
            return i, extract_code(text), None
        except ExtractionError as exc:
            return i, None, str(exc)

    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]

    batch = GenerationBatch(batch_id, kind, client.model, n)
    for i, code, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            batch.failures += 1
            batch.failure_reasons[i] = err
            continue
        batch.candidates.append(CandidateDesign(
            f"{batch_id}-{i:04d}", kind, code, "llm",
            {"model": client.model, "batch_id": batch_id, "index": i, "seed": seed + i,
             "prompt_sha256": hashlib.sha256(prompt.encode()).hexdigest()[:16]}))
    return batch


__all__ = ["ExtractionError", "GenerationBatch", "PromptTemplate", "ReplayMiss", "extract_code",
           "generate_batch", "render_prompt"]
