import os

import numpy as np
import pytest
import torch

from abrforge.candidates import (CandidateDesign, CandidateFailure, SandboxPolicy, StateProgram,
                                 StatusError, builtin, execute_state, execute_state_many,
                                 instantiate_network, load_builtin_corpus, probe_network)
from abrforge.candidates import sandbox as sb
from abrforge.filters import FuzzConfig, probe_observations, sample_observations

POLICY = SandboxPolicy(time_limit_s=1.0)


def state(body, prelude="import numpy as np\n", args="buffer_level_s"):
    return CandidateDesign("s", "state", prelude + f"def build_state({args}):\n" + body)


def network(body):
    return CandidateDesign("n", "network", "import torch\nimport torch.nn as nn\n\n"
                           "def build_actor_critic(n_channels, history_len, n_actions):\n" + body)


@pytest.fixture(scope="module")
def obs():
    return probe_observations()[1]


def failure(fn, *args):
    with pytest.raises(CandidateFailure) as info:
        fn(*args)
    return info.value.reason


@pytest.mark.parametrize("source,reason", [
    ("def build_state(:\n", sb.SYNTAX),
    ("import numpy as np\n", sb.MISSING_ENTRY),
    ("import os\ndef build_state():\n    return [[1.0]]\n", sb.IMPORT),
    ("def build_state():\n    import subprocess\n    return [[1.0]]\n", sb.IMPORT),
    ("def build_state():\n    return 'abc'\n", sb.NON_NUMERIC),
    ("def build_state():\n    return 1 / 0\n", sb.EXECUTION),
    ("def build_state(mystery_input):\n    return [[1.0]]\n", sb.EXECUTION),
])
def test_state_failure_reasons(source, reason, obs):
    c = CandidateDesign("s", "state", source)
    assert failure(execute_state, c, obs, POLICY) == reason


def test_timeout_is_enforced(obs):
    c = state("    while True:\n        pass\n")
    assert failure(execute_state, c, obs, SandboxPolicy(time_limit_s=0.5)) == sb.TIMEOUT


def test_timeout_not_swallowed_by_broad_except(obs):
    c = state("    try:\n        while True:\n            pass\n    except Exception:\n"
              "        return np.zeros((1, 1))\n")
    assert failure(execute_state, c, obs, SandboxPolicy(time_limit_s=0.5)) == sb.TIMEOUT


def test_memory_limit(obs):
    c = state("    return np.ones(10**9)\n")
    assert failure(execute_state, c, obs, POLICY) == sb.MEMORY


def test_file_writes_blocked(obs, tmp_path):
    target = tmp_path / "leak.npy"
    c = state(f"    np.save({str(target)!r}, np.zeros(3))\n    return np.zeros((1, 1))\n")
    assert failure(execute_state, c, obs, POLICY) == sb.EXECUTION
    assert not target.exists()


def test_open_is_not_a_builtin(obs):
    c = state("    open('x', 'w')\n    return np.zeros((1, 1))\n")
    assert failure(execute_state, c, obs, POLICY) == sb.EXECUTION


def test_no_network_access():
    assert SandboxPolicy().network_access is False


def test_shape_drift(obs):
    c = state("    return np.zeros((1 + int(buffer_level_s > 0), 4))\n")
    a, b = probe_observations()
    assert a.buffer_s == 0 < b.buffer_s
    assert failure(execute_state_many, c, [a, b], POLICY) == sb.SHAPE_DRIFT


def test_vector_output_becomes_one_row(obs):
    c = state("    return np.arange(3.0)\n", args="")
    assert execute_state(c, obs, POLICY).shape == (1, 3)


def test_inputs_are_copies(obs):
    c = state("    throughput_history_mbps[:] = -1\n    return throughput_history_mbps[None]\n",
              args="throughput_history_mbps")
    prog = StateProgram(c, SandboxPolicy(isolation="inline"))
    before = np.array(obs.throughput_hist_mbps)
    prog(obs)
    assert np.array_equal(obs.throughput_hist_mbps, before)


def test_process_and_inline_agree(obs):
    c = builtin("pensieve_original")
    inline = StateProgram(c, SandboxPolicy(isolation="inline"))(obs)
    assert np.array_equal(inline, execute_state(c, obs))


@pytest.mark.parametrize("body,reason", [
    ("    return nn.Linear(n_channels * history_len, n_actions)\n", sb.BAD_PROBE),
    ("    a = nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, 5))\n"
     "    c = nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, 1))\n"
     "    return a, c\n", sb.ACTION_DIM),
    ("    a = nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, n_actions))\n"
     "    c = nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, 3))\n"
     "    return a, c\n", sb.BAD_PROBE),
    ("    a = nn.Sequential(nn.Flatten(), nn.Linear(7, n_actions))\n"
     "    c = nn.Sequential(nn.Flatten(), nn.Linear(7, 1))\n"
     "    return a, c\n", sb.EXECUTION),
    ("    import tensorflow\n", sb.IMPORT),
])
def test_network_failure_reasons(body, reason):
    assert failure(probe_network, network(body), (6, 8), 6, 0, POLICY) == reason


def test_nan_logits_rejected():
    body = ("    class A(nn.Module):\n"
            "        def __init__(self):\n"
            "            super().__init__()\n"
            "            self.l = nn.Linear(n_channels * history_len, n_actions)\n"
            "        def forward(self, x):\n"
            "            return self.l(x.flatten(1)) * float('nan')\n"
            "    return A(), nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, 1))\n")
    assert failure(probe_network, network(body), (6, 8), 6, 0, POLICY) == sb.BAD_PROBE


def test_network_seed_determinism():
    c = builtin("original_a2c")
    a = instantiate_network(c, (6, 8), 6, seed=3).flat_parameters()
    b = instantiate_network(c, (6, 8), 6, seed=3).flat_parameters()
    other = instantiate_network(c, (6, 8), 6, seed=4).flat_parameters()
    assert np.array_equal(a, b) and not np.array_equal(a, other)


def test_flat_parameter_round_trip():
    h = instantiate_network(builtin("original_a2c"), (6, 8), 6)
    flat = h.flat_parameters()
    h.load_flat_parameters(np.zeros_like(flat))
    assert not h.flat_parameters().any()
    h.load_flat_parameters(flat)
    assert np.allclose(h.flat_parameters(), flat, atol=1e-7)
    with pytest.raises(ValueError):
        h.load_flat_parameters(flat[:-1])


def test_critic_params_exclude_shared_actor_params():
    h = instantiate_network(builtin("shared_trunk"), (6, 8), 6)
    ids = [id(p) for p in h.parameters()]
    assert len(ids) == len(set(ids))


def test_status_lifecycle():
    c = CandidateDesign("c", "state", "x")
    c.advance("compiled")
    with pytest.raises(StatusError):
        c.advance("trained")
    c.reject("because")
    assert c.history == ["raw", "compiled", "rejected"]
    with pytest.raises(StatusError):
        c.advance("normalized")
    n = CandidateDesign("n", "network", "x")
    with pytest.raises(StatusError):
        n.advance("normalized")


BUILTINS = load_builtin_corpus()
STATES = [c for c in BUILTINS if c.kind == "state"]
NETWORKS = [c for c in BUILTINS if c.kind == "network"]


@pytest.mark.parametrize("cand", STATES, ids=lambda c: c.id)
def test_builtin_state_stable_and_normalized(cand):
    cfg = FuzzConfig()
    tensors = execute_state_many(cand, sample_observations(cfg))
    assert len({t.shape for t in tensors}) == 1
    assert all(np.isfinite(t).all() and np.abs(t).max() <= cfg.threshold for t in tensors)


@pytest.mark.parametrize("cand", NETWORKS, ids=lambda c: c.id)
def test_builtin_network_simplex(cand):
    probs, value = probe_network(cand, (6, 8), 6)
    assert probs.shape == (6,) and np.isfinite(value)
    assert (probs >= 0).all() and abs(probs.sum() - 1) < 1e-9


def test_sandbox_leaves_no_files(tmp_path, obs):
    before = set(os.listdir(tmp_path))
    execute_state(builtin("pensieve_original"), obs)
    assert set(os.listdir(tmp_path)) == before
    assert torch.get_num_threads() >= 1
