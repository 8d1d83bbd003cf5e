"""Completion and embedding clients with record/replay.

``live`` talks to an OpenAI-compatible HTTP API (credentials from the
environment), ``record`` wraps a live client and appends every exchange to a
JSONL store, ``replay`` answers only from that store and never touches the
network.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

API_KEY_ENV = "ABRFORGE_API_KEY"
API_BASE_ENV = "ABRFORGE_API_BASE"
DEFAULT_API_BASE = "https://api.openai.com/v1"
MODES = ("live", "record", "replay")


class TransportError(RuntimeError):
    """Retryable failure talking to a live endpoint."""


class ReplayMiss(KeyError):
    pass


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class CompletionClient(Protocol):
    model: str
    mode: str

    def complete(self, prompt: str, temperature: float, seed: int) -> str: ...


class EmbeddingClient(Protocol):
    model: str
    mode: str

    def embed(self, text: str) -> np.ndarray: ...


class RecordStore:
    """Append-only JSONL store of exchanges keyed by (kind, model, prompt hash, seed)."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._index: dict[tuple, dict] | None = None

    @staticmethod
    def key(kind: str, model: str, phash: str, seed: int) -> tuple:
        return (kind, model, phash, int(seed))

    def _load(self) -> dict:
        if self._index is None:
            index = {}
            if self.path.exists():
                with open(self.path) as fh:
                    for line in fh:
                        if line.strip():
                            rec = json.loads(line)
                            k = self.key(rec.get("kind", "completion"), rec["model"],
                                         rec["prompt_hash"], rec["seed"])
                            index[k] = rec
            self._index = index
        return self._index

    def get(self, kind, model, phash, seed) -> dict:
        try:
            return self._load()[self.key(kind, model, phash, seed)]
        except KeyError:
            raise ReplayMiss(f"no recorded {kind} for model={model} seed={seed} "
                             f"prompt={phash[:12]}") from None

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            idx = self._load()
            idx[self.key(record.get("kind", "completion"), record["model"],
                         record["prompt_hash"], record["seed"])] = record

    def __len__(self):
        return len(self._load())

    def records(self) -> list[dict]:
        return list(self._load().values())


# -- completions -------------------------------------------------------------

class OpenAIChatClient:
    mode = "live"

    def __init__(self, model: str, api_key: str | None = None, base_url: str | None = None,
                 timeout_s: float = 120.0):
        self.model = model
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise RuntimeError(f"live mode needs credentials in ${API_KEY_ENV}")
        self.base_url = (base_url or os.environ.get(API_BASE_ENV) or DEFAULT_API_BASE).rstrip("/")
        self.timeout_s = timeout_s

    def _post(self, route: str, body: dict) -> dict:
        import httpx

        try:
            resp = httpx.post(f"{self.base_url}/{route}", json=body, timeout=self.timeout_s,
                              headers={"Authorization": f"Bearer {self.api_key}"})
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        resp.raise_for_status()
        return resp.json()

    def complete(self, prompt: str, temperature: float, seed: int) -> str:
        body = {"model": self.model, "temperature": temperature, "seed": seed,
                "messages": [{"role": "user", "content": prompt}]}
        return self._post("chat/completions", body)["choices"][0]["message"]["content"]

    def embed(self, text: str) -> np.ndarray:
        data = self._post("embeddings", {"model": self.model, "input": text})
        return np.asarray(data["data"][0]["embedding"], dtype=float)


class ScriptedClient:
    """Serves canned responses in order, cycling; stands in for a live model."""

    mode = "live"

    def __init__(self, responses: Sequence[str], model: str = "scripted"):
        if not responses:
            raise ValueError("need at least one scripted response")
        self.responses = list(responses)
        self.model = model
        self.calls = 0

    def complete(self, prompt: str, temperature: float, seed: int) -> str:
        self.calls += 1
        return self.responses[seed % len(self.responses)]


class RecordingClient:
    mode = "record"

    def __init__(self, inner: CompletionClient, store: RecordStore):
        self.inner = inner
        self.model = inner.model
        self.store = store

    def complete(self, prompt: str, temperature: float, seed: int) -> str:
        text = self.inner.complete(prompt, temperature, seed)
        self.store.append({"kind": "completion", "model": self.model, "seed": int(seed),
                           "prompt_hash": prompt_hash(prompt), "temperature": temperature,
                           "response": text})
        return text


class ReplayClient:
    mode = "replay"

    def __init__(self, store: RecordStore, model: str):
        self.store = store
        self.model = model

    def complete(self, prompt: str, temperature: float, seed: int) -> str:
        return self.store.get("completion", self.model, prompt_hash(prompt), seed)["response"]


def make_client(mode: str, model: str, store_path=None, live: CompletionClient | None = None):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "replay":
        if store_path is None:
            raise ValueError("replay mode needs a record store")
        return ReplayClient(RecordStore(store_path), model)
    inner = live or OpenAIChatClient(model)
    if mode == "record":
        if store_path is None:
            raise ValueError("record mode needs a record store")
        return RecordingClient(inner, RecordStore(store_path))
    return inner


# -- embeddings --------------------------------------------------------------

class HashingEmbedder:
    """Deterministic offline embedding: signed feature hashing of code tokens, L2-normalised."""

    mode = "live"

    def __init__(self, dim: int = 256, model: str = "hashing-256"):
        self.dim = dim
        self.model = model

    def embed(self, text: str) -> np.ndarray:
        import re

        vec = np.zeros(self.dim)
        tokens = re.findall(r"[A-Za-z_][A-Za-z_0-9]*|\d+\.?\d*|[^\sA-Za-z_0-9]", text)
        for a, b in zip(tokens, tokens[1:] + [""]):
            for tok in (a, f"{a} {b}"):
                h = hashlib.blake2b(tok.encode(), digest_size=8).digest()
                idx = int.from_bytes(h[:4], "little") % self.dim
                vec[idx] += 1.0 if h[4] & 1 else -1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm else vec


class RecordingEmbedder:
    mode = "record"

    def __init__(self, inner: EmbeddingClient, store: RecordStore):
        self.inner = inner
        self.model = inner.model
        self.store = store

    def embed(self, text: str) -> np.ndarray:
        vec = np.asarray(self.inner.embed(text), dtype=float)
        self.store.append({"kind": "embedding", "model": self.model, "seed": 0,
                           "prompt_hash": prompt_hash(text), "embedding": vec.tolist()})
        return vec


class ReplayEmbedder:
    mode = "replay"

    def __init__(self, store: RecordStore, model: str):
        self.store = store
        self.model = model

    def embed(self, text: str) -> np.ndarray:
        rec = self.store.get("embedding", self.model, prompt_hash(text), 0)
        return np.asarray(rec["embedding"], dtype=float)


def with_retries(fn, attempts: int = 3, backoff_s: float = 1.0, sleep=time.sleep):
    """Call ``fn`` retrying :class:`TransportError` with exponential backoff."""
    for i in range(attempts):
        try:
            return fn()
        except TransportError:
            if i == attempts - 1:
                raise
            sleep(backoff_s * 2**i)
