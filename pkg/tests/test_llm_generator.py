import json

import numpy as np
import pytest

from abrforge.generator import ExtractionError, PromptTemplate, extract_code, generate_batch, render_prompt
from abrforge.llm import (HashingEmbedder, RecordStore, ReplayClient, ReplayEmbedder, ReplayMiss,
                          RecordingClient, RecordingEmbedder, ScriptedClient, TransportError, make_client,
                          prompt_hash, with_retries)

FENCED = "Some reasoning first.\n```python\nx = 1\n```\nthen the answer\n```python\ndef f():\n    return 2\n```\n"


def test_extract_last_block():
    assert extract_code(FENCED) == "def f():\n    return 2\n"


@pytest.mark.parametrize("text", ["no code here", "```python\n\n```", "", None])
def test_extract_failures(text):
    with pytest.raises(ExtractionError):
        extract_code(text)


def test_prompt_parts():
    st = PromptTemplate.load("state")
    text = render_prompt("state", st)
    assert st.base_code in text and st.normalization_directive in text
    net = PromptTemplate.load("network")
    assert net.normalization_directive is None
    with pytest.raises(ValueError):
        render_prompt("state", net)


def test_template_directive_only_for_states():
    with pytest.raises(ValueError):
        PromptTemplate("network", "r", "b", "c", "o", normalization_directive="n")


class Flaky(ScriptedClient):
    def __init__(self, fail_seeds, **kw):
        super().__init__(["```python\ndef build_state():\n    return [[0.0]]\n```"], **kw)
        self.fail_seeds = set(fail_seeds)

    def complete(self, prompt, temperature, seed):
        if seed in self.fail_seeds:
            raise TransportError("HTTP 503")
        return super().complete(prompt, temperature, seed)


def test_batch_accounting_with_failures():
    client = ScriptedClient(["```python\ndef build_state():\n    return [[0.0]]\n```", "prose only"])
    batch = generate_batch(client, "state", 7)
    assert batch.closes
    assert len(batch.candidates) == 4 and batch.failures == 3
    assert set(batch.failure_reasons) == {1, 3, 5}
    flaky = generate_batch(Flaky({2}), "state", 4, backoff_s=0)
    assert flaky.closes and flaky.failures == 1 and flaky.failure_reasons[2].startswith("transport")


def test_parallel_matches_serial():
    client = ScriptedClient([f"```python\nx = {i}\n```" for i in range(5)])
    a = generate_batch(client, "network", 10)
    b = generate_batch(client, "network", 10, parallelism=4)
    assert [c.source_text for c in a.candidates] == [c.source_text for c in b.candidates]
    assert [c.id for c in a.candidates] == [c.id for c in b.candidates]


def test_record_then_replay(tmp_path):
    store = tmp_path / "store.jsonl"
    live = ScriptedClient([f"```python\nv = {i}\n```" for i in range(3)], model="m")
    recorded = generate_batch(RecordingClient(live, RecordStore(store)), "state", 6, seed=10)
    replayed = generate_batch(ReplayClient(RecordStore(store), "m"), "state", 6, seed=10)
    assert [c.source_text for c in recorded.candidates] == [c.source_text for c in replayed.candidates]
    lines = [json.loads(line) for line in store.read_text().splitlines()]
    assert len(lines) == 6 and {r["seed"] for r in lines} == set(range(10, 16))


def test_replay_miss_propagates(tmp_path):
    client = make_client("replay", "m", tmp_path / "empty.jsonl")
    with pytest.raises(ReplayMiss):
        generate_batch(client, "state", 1)


def test_shipped_store_replays():
    from importlib import resources
    path = resources.files("abrforge") / "data" / "recorded" / "state_responses.jsonl"
    batch = generate_batch(make_client("replay", "fixture-llm", path), "state", 50)
    assert batch.closes and len(batch.candidates) == 50


def test_retries_then_gives_up():
    calls, sleeps = [], []

    def fn():
        calls.append(1)
        raise TransportError("down")

    with pytest.raises(TransportError):
        with_retries(fn, attempts=3, backoff_s=0.5, sleep=sleeps.append)
    assert len(calls) == 3 and sleeps == [0.5, 1.0]


def test_make_client_mode_checks(tmp_path):
    with pytest.raises(ValueError):
        make_client("bogus", "m")
    with pytest.raises(ValueError):
        make_client("replay", "m")


def test_hashing_embedder():
    e = HashingEmbedder()
    a = e.embed("state[0] = x / 8.0")
    assert np.array_equal(a, e.embed("state[0] = x / 8.0"))
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    assert not np.array_equal(a, e.embed("state[0] = x / 10.0"))


def test_embedding_record_replay(tmp_path):
    store = RecordStore(tmp_path / "emb.jsonl")
    rec = RecordingEmbedder(HashingEmbedder(model="h"), store)
    v = rec.embed("code")
    assert np.array_equal(ReplayEmbedder(RecordStore(tmp_path / "emb.jsonl"), "h").embed("code"), v)
    assert prompt_hash("code") == prompt_hash("code") != prompt_hash("code ")
