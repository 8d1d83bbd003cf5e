from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

KINDS = ("state", "network")
PROVENANCES = ("llm", "builtin", "manual")

# forward-only lifecycle; "rejected" is reachable from any non-terminal status
_ORDER = {
    "state": ("raw", "compiled", "normalized", "trained", "scored"),
    "network": ("raw", "compiled", "trained", "scored"),
}


class StatusError(ValueError):
    pass


@dataclass
class CandidateDesign:
    """A generated (or shipped) code block plus provenance and pipeline status."""

    id: str
    kind: str
    source_text: str
    provenance: str = "manual"
    metadata: dict = field(default_factory=dict)
    status: str = "raw"
    rejection_reason: str | None = None
    history: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown candidate kind {self.kind!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not self.history:
            self.history = [self.status]

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.source_text.encode()).hexdigest()[:16]

    def advance(self, status: str) -> None:
        order = _ORDER[self.kind]
        if status not in order:
            raise StatusError(f"{status!r} is not a valid status for a {self.kind} candidate")
        if self.status == "rejected":
            raise StatusError(f"{self.id} is rejected ({self.rejection_reason})")
        if order.index(status) != order.index(self.status) + 1:
            raise StatusError(f"{self.id}: cannot move {self.status} -> {status}")
        self.status = status
        self.history.append(status)

    def reject(self, reason: str) -> None:
        if self.status in ("rejected", "scored"):
            raise StatusError(f"{self.id}: cannot reject from {self.status}")
        self.status = "rejected"
        self.rejection_reason = reason
        self.history.append("rejected")

    def fresh(self) -> "CandidateDesign":
        """Copy reset to ``raw`` (for re-running a stage on the same code)."""
        return CandidateDesign(self.id, self.kind, self.source_text, self.provenance,
                               dict(self.metadata))

    def to_dict(self) -> dict:
        return {
            "id": self.id, "kind": self.kind, "provenance": self.provenance,
            "metadata": self.metadata, "status": self.status,
            "rejection_reason": self.rejection_reason, "digest": self.digest,
        }
