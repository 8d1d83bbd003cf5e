"""Regenerate the recorded-response corpus shipped under abrforge/data/recorded.

Responses are hand-written stand-ins for model output (reasoning prose plus a
fenced code block). They are pushed through the normal record path so the
store is keyed by the current prompt hashes. Re-run after any prompt change.

    python tools/build_fixture_corpus.py
"""

import json
from pathlib import Path

from abrforge.generator import PromptTemplate, generate_batch
from abrforge.llm import RecordingClient, RecordStore, ScriptedClient

OUT = Path(__file__).resolve().parents[1] / "src" / "abrforge" / "data" / "recorded"
MODEL = "fixture-llm"

HEADER = "import numpy as np\n"

BASE_ROWS = """    state[0, -1] = last_bitrate_kbps / np.max(BITRATE_LEVELS_KBPS)
    state[1, -1] = buffer_level_s / 10.0
    state[2, :] = throughput_history_mbps / 8.0
    state[3, :] = download_time_history_s / 10.0
    n = min(len(next_chunk_sizes_bytes), HISTORY_LEN)
    state[4, :n] = next_chunk_sizes_bytes[:n] / 1e6
    state[5, -1] = min(chunks_remaining, TOTAL_CHUNKS) / float(TOTAL_CHUNKS)
"""

SIG = ("def build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,\n"
       "                buffer_level_s, chunks_remaining, last_bitrate_kbps{extra}):\n")


def state_fn(extra_rows: str, n_rows: int, extra_args: str = "", prelude: str = "",
             header: str = HEADER) -> str:
    return (header + prelude + "\n\n" + SIG.format(extra=extra_args)
            + f"    state = np.zeros(({n_rows}, HISTORY_LEN))\n" + BASE_ROWS + extra_rows
            + "    return state\n")


# (category, idea summary, code) ------------------------------------------------
CLEAN = [
    ("ema throughput", state_fn(
        "    ema = 0.0\n    for v in throughput_history_mbps:\n        ema = 0.3 * v + 0.7 * ema\n"
        "    state[6, -1] = ema / 8.0\n", 7)),
    ("throughput variability", state_fn(
        "    state[6, -1] = np.std(throughput_history_mbps) / 8.0\n", 7)),
    ("bitrate variance of the ladder position", state_fn(
        "    idx = int(np.argmin(np.abs(BITRATE_LEVELS_KBPS - last_bitrate_kbps)))\n"
        "    state[6, -1] = idx / (len(BITRATE_LEVELS_KBPS) - 1)\n", 7)),
    ("log-scaled throughput", state_fn(
        "    state[6, :] = np.log1p(throughput_history_mbps) / 5.0\n", 7)),
    ("buffer relative to a 60 s cap", state_fn(
        "    state[6, -1] = min(buffer_level_s / 60.0, 1.0)\n", 7)),
    ("harmonic-mean forecast", state_fn(
        "    recent = throughput_history_mbps[throughput_history_mbps > 0]\n"
        "    hm = len(recent) / np.sum(1.0 / recent) if recent.size else 0.0\n"
        "    state[6, -1] = hm / 8.0\n", 7)),
    ("download-time trend", state_fn(
        "    state[6, 1:] = np.clip(np.diff(download_time_history_s) / 10.0, -6.0, 6.0)\n", 7)),
    ("expected download time per level", state_fn(
        "    est = max(float(np.mean(throughput_history_mbps[-3:])), 0.1)\n"
        "    n2 = min(len(next_chunk_sizes_bytes), HISTORY_LEN)\n"
        "    state[6, :n2] = np.minimum(next_chunk_sizes_bytes[:n2] * 8 / 1e6 / est, 60.0) / 10.0\n", 7)),
    ("fraction of video played", state_fn(
        "    state[6, -1] = 1.0 - min(chunks_remaining, TOTAL_CHUNKS) / float(TOTAL_CHUNKS)\n", 7)),
    ("buffer headroom in chunks", state_fn(
        "    state[6, -1] = buffer_level_s / 4.0 / 15.0\n", 7)),
    ("throughput percentile", state_fn(
        "    state[6, -1] = np.percentile(throughput_history_mbps, 25) / 8.0\n", 7)),
    ("smoothed download time with math", state_fn(
        "    tail = [float(x) for x in download_time_history_s[-4:]]\n"
        "    state[6, -1] = math.fsum(tail) / 4.0 / 10.0\n", 7, header="import math\n" + HEADER)),
    ("buffer difference", state_fn(
        "    state[6, 1:] = np.diff(buffer_history_s) / 10.0\n", 7, ", buffer_history_s")),
    ("savitzky-golay buffer trend", state_fn(
        "    state[6, :] = savgol_filter(buffer_history_s, 5, 2) / 60.0\n", 7, ", buffer_history_s",
        header=HEADER + "from scipy.signal import savgol_filter\n")),
    ("signed throughput scaling", state_fn(
        "    state[6, :] = np.tanh(throughput_history_mbps / 10.0) * 2.0 - 1.0\n", 7)),
    ("median throughput", state_fn(
        "    state[6, -1] = statistics.median(list(throughput_history_mbps)) / 8.0\n", 7,
        header="import statistics\n" + HEADER)),
    ("rebuffer risk", state_fn(
        "    est = max(float(throughput_history_mbps[-1]), 0.1)\n"
        "    t_top = next_chunk_sizes_bytes[-1] * 8 / 1e6 / est\n"
        "    state[6, -1] = np.clip((t_top - buffer_level_s) / 10.0, -6.0, 6.0)\n", 7)),
    ("linear-regression throughput slope", state_fn(
        "    x = np.arange(HISTORY_LEN, dtype=float)\n"
        "    slope = np.polyfit(x, throughput_history_mbps, 1)[0]\n"
        "    state[6, -1] = np.tanh(slope)\n", 7)),
]

UNNORMALIZED = [
    ("raw chunk sizes", state_fn("    state[6, :n] = next_chunk_sizes_bytes[:n]\n", 7)),
    ("throughput in bits per second", state_fn("    state[6, :] = throughput_history_mbps * 1e6\n", 7)),
    ("download time in milliseconds", state_fn("    state[6, :] = download_time_history_s * 1000.0\n", 7)),
    ("last bitrate in kbps", state_fn("    state[6, -1] = last_bitrate_kbps\n", 7)),
    ("chunk sizes in kilobytes", state_fn("    state[6, :n] = next_chunk_sizes_bytes[:n] / 1000.0\n", 7)),
    ("throughput variance", state_fn("    state[6, -1] = np.var(throughput_history_mbps) * 10.0\n", 7)),
    ("throughput ratio", state_fn(
        "    with np.errstate(all='ignore'):\n"
        "        state[6, -1] = throughput_history_mbps[-1] / throughput_history_mbps[-2]\n", 7)),
    ("buffer in milliseconds", state_fn("    state[6, -1] = buffer_level_s * 1000.0\n", 7)),
    ("total bytes of the ladder", state_fn("    state[6, -1] = np.sum(next_chunk_sizes_bytes) / 1e4\n", 7)),
    ("bits per level", state_fn("    state[6, :n] = next_chunk_sizes_bytes[:n] * 8 / 1e5\n", 7)),
    ("exponential buffer urgency", state_fn("    state[6, -1] = np.exp(buffer_level_s / 10.0)\n", 7)),
    ("sanity assertion on the link", state_fn(
        "    assert throughput_history_mbps.max() < 50.0, 'link faster than expected'\n"
        "    state[6, -1] = throughput_history_mbps.max() / 8.0\n", 7)),
]

BROKEN = [
    ("syntax slip", state_fn("    state[6, -1] = (buffer_level_s / 10.0\n", 7)),
    ("undefined variable", state_fn("    state[6, -1] = video_chunk_remain / 48.0\n", 7)),
    ("pandas rolling mean", state_fn("    state[6, :] = pd.Series(throughput_history_mbps).rolling(2).mean()\n", 7,
                                     header="import pandas as pd\n" + HEADER)),
    ("os environment", state_fn("    state[6, -1] = float(os.getpid() % 2)\n", 7, header="import os\n" + HEADER)),
    ("sklearn regression", state_fn("    state[6, -1] = 0.0\n", 7,
                                    header="from sklearn.linear_model import LinearRegression\n" + HEADER)),
    ("variable-length output",
     HEADER + "\n\ndef build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,\n"
     "                buffer_level_s, chunks_remaining, last_bitrate_kbps):\n"
     "    observed = throughput_history_mbps[throughput_history_mbps > 0]\n"
     "    return np.vstack([observed / 8.0, observed / 8.0])\n"),
    ("renamed entry point", state_fn("", 6).replace("def build_state(", "def get_state(")),
    ("old argument names",
     HEADER + "\n\ndef build_state(bit_rate, buffer_size, video_chunk_size, delay):\n"
     "    return np.zeros((6, 8))\n"),
    ("string output",
     HEADER + "\n\ndef build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,\n"
     "                buffer_level_s, chunks_remaining, last_bitrate_kbps):\n"
     "    return 'state: ' + str(buffer_level_s)\n"),
    ("ragged rows",
     HEADER + "\n\ndef build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,\n"
     "                buffer_level_s, chunks_remaining, last_bitrate_kbps):\n"
     "    return [list(throughput_history_mbps), [buffer_level_s]]\n"),
    ("division by the first sample", state_fn(
        "    state[6, -1] = 1.0 / float(throughput_history_mbps[0])\n", 7)),
    ("indexing past the ladder", state_fn("    state[6, -1] = next_chunk_sizes_bytes[6] / 1e6\n", 7)),
    ("dictionary output",
     HEADER + "\n\ndef build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,\n"
     "                buffer_level_s, chunks_remaining, last_bitrate_kbps):\n"
     "    return {'buffer': buffer_level_s / 10.0}\n"),
    ("huge lookup table", state_fn("    table = np.ones((20000, 20000))\n    state[6, -1] = table[0, 0]\n", 7)),
    ("shape mismatch on assignment", state_fn("    state[6, :] = next_chunk_sizes_bytes / 1e6\n", 7)),
    ("reads a config file", state_fn(
        "    cfg = np.loadtxt('/etc/hostname', dtype=str)\n    state[6, -1] = 0.0\n", 7)),
    ("math domain error", state_fn("    state[6, -1] = math.log(buffer_level_s) / 5.0\n", 7,
                                   header="import math\n" + HEADER)),
    ("too few rows allocated", state_fn("    state[7, -1] = 1.0\n", 7)),
    ("three-dimensional output",
     HEADER + "\n\ndef build_state(throughput_history_mbps, download_time_history_s, next_chunk_sizes_bytes,\n"
     "                buffer_level_s, chunks_remaining, last_bitrate_kbps):\n"
     "    return np.zeros((2, 6, HISTORY_LEN))\n"),
    ("never-ending refinement", state_fn(
        "    est = 1.0\n    while est > 0:\n        est = est * 0.5 + 1.0\n    state[6, -1] = est\n", 7)),
]

IDEAS = [
    "add a smoothed estimate of the link", "summarize how stable the link is",
    "expose how far into the video we are", "describe the buffer dynamics",
    "predict the next download time", "rescale features into a common range",
]


def wrap_response(i: int, summary: str, code: str, sketch: bool) -> str:
    ideas = "\n".join(f"{k + 1}. {IDEAS[(i + k) % len(IDEAS)]}" for k in range(3))
    parts = [
        "The existing function stacks six feature rows: last bitrate, buffer, throughput and "
        "download-time histories, next chunk sizes and the remaining chunk count.",
        f"Ideas:\n{ideas}",
    ]
    if sketch:
        parts.append("A quick sketch of the feature before the full version:\n"
                     "```python\nfeature = compute(history)\n```")
    parts.append(f"I will go with: {summary}.")
    parts.append(f"```python\n{code}```")
    return "\n\n".join(parts)


# networks -----------------------------------------------------------------------
NET_HEADER = "import torch\nimport torch.nn as nn\n"


def conv_net(hidden=128, filters=16, act="torch.relu", kernel=4, extra_import=""):
    return (NET_HEADER + extra_import + f"""

class Encoder(nn.Module):
    def __init__(self, n_channels, history_len):
        super().__init__()
        k = min({kernel}, history_len)
        self.conv = nn.Conv1d(n_channels, n_channels * {filters}, k, groups=n_channels)
        self.dense = nn.Linear(n_channels * {filters} * (history_len - k + 1), {hidden})

    def forward(self, x):
        return {act}(self.dense({act}(self.conv(x)).flatten(1)))


def build_actor_critic(n_channels, history_len, n_actions):
    actor = nn.Sequential(Encoder(n_channels, history_len), nn.Linear({hidden}, n_actions))
    critic = nn.Sequential(Encoder(n_channels, history_len), nn.Linear({hidden}, 1))
    return actor, critic
""")


def rnn_net(cell="GRU", hidden=64):
    state_pick = "h[-1]" if cell != "LSTM" else "h[0][-1]"
    return NET_HEADER + f"""

class Encoder(nn.Module):
    def __init__(self, n_channels, history_len):
        super().__init__()
        self.rnn = nn.{cell}(n_channels, {hidden}, batch_first=True)
        self.dense = nn.Linear({hidden}, 128)

    def forward(self, x):
        _, h = self.rnn(x.transpose(1, 2))
        return torch.relu(self.dense({state_pick}))


def build_actor_critic(n_channels, history_len, n_actions):
    actor = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(128, n_actions))
    critic = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(128, 1))
    return actor, critic
"""


def mlp_net(widths=(128, 64), act="nn.ReLU", dropout=0.0, norm=False):
    layers = []
    prev = "n_channels * history_len"
    for w in widths:
        layers.append(f"nn.Linear({prev}, {w})")
        if norm:
            layers.append(f"nn.LayerNorm({w})")
        layers.append(f"{act}()")
        if dropout:
            layers.append(f"nn.Dropout({dropout})")
        prev = str(w)
    body = ", ".join(layers)
    return NET_HEADER + f"""

def trunk(n_channels, history_len):
    return nn.Sequential(nn.Flatten(), {body})


def build_actor_critic(n_channels, history_len, n_actions):
    actor = nn.Sequential(trunk(n_channels, history_len), nn.Linear({widths[-1]}, n_actions))
    critic = nn.Sequential(trunk(n_channels, history_len), nn.Linear({widths[-1]}, 1))
    return actor, critic
"""


def shared_net(hidden=128):
    return NET_HEADER + f"""

def build_actor_critic(n_channels, history_len, n_actions):
    shared = nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, {hidden}), nn.Tanh())
    return (nn.Sequential(shared, nn.Linear({hidden}, n_actions)),
            nn.Sequential(shared, nn.Linear({hidden}, 1)))
"""


NET_VALID = [
    ("wider dense layer", conv_net(hidden=256)),
    ("leaky activations", conv_net(act="nn.functional.leaky_relu")),
    ("more filters", conv_net(filters=32)),
    ("smaller kernel", conv_net(kernel=2)),
    ("tanh activations", conv_net(act="torch.tanh")),
    ("elu activations", conv_net(act="nn.functional.elu")),
    ("gelu activations", conv_net(act="nn.functional.gelu")),
    ("narrow dense layer", conv_net(hidden=64)),
    ("kernel of three", conv_net(kernel=3, filters=8)),
    ("wide and leaky", conv_net(hidden=256, act="nn.functional.leaky_relu")),
    ("gru encoder", rnn_net("GRU")),
    ("lstm encoder", rnn_net("LSTM")),
    ("elman rnn encoder", rnn_net("RNN")),
    ("bigger gru", rnn_net("GRU", 128)),
    ("small lstm", rnn_net("LSTM", 32)),
    ("plain mlp", mlp_net()),
    ("deep mlp", mlp_net((256, 128, 64))),
    ("mlp with dropout", mlp_net(dropout=0.1)),
    ("mlp with layer norm", mlp_net(norm=True)),
    ("tanh mlp", mlp_net(act="nn.Tanh")),
    ("silu mlp", mlp_net(act="nn.SiLU")),
    ("shared tanh trunk", shared_net()),
    ("shared wide trunk", shared_net(256)),
    ("shared small trunk", shared_net(64)),
    ("elu mlp", mlp_net((128, 128), act="nn.ELU")),
    ("mlp single layer", mlp_net((256,))),
    ("conv with softplus", conv_net(act="nn.functional.softplus")),
    ("layer-normed deep mlp", mlp_net((128, 64, 32), norm=True)),
    ("gru with 16 units", rnn_net("GRU", 16)),
    ("conv 8 filters", conv_net(filters=8)),
]

NET_BROKEN = [
    ("hard-coded five actions", conv_net().replace("nn.Linear(128, n_actions)", "nn.Linear(128, 5)")),
    ("syntax slip", conv_net().replace("def forward(self, x):", "def forward(self, x)")),
    ("tensorflow port", "import tensorflow as tf\n\n\ndef build_actor_critic(n_channels, history_len, n_actions):\n"
     "    return tf.keras.Sequential(), tf.keras.Sequential()\n"),
    ("two-headed critic", conv_net().replace("nn.Linear(128, 1)", "nn.Linear(128, 2)")),
    ("single module returned", NET_HEADER + "\n\ndef build_actor_critic(n_channels, history_len, n_actions):\n"
     "    return nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, n_actions))\n"),
    ("undefined layer", conv_net().replace("nn.Conv1d(", "nn.Conv1D(")),
    ("flatten size off by one", mlp_net().replace("nn.Linear(n_channels * history_len,",
                                                  "nn.Linear(n_channels * history_len + 1,")),
    ("renamed factory", conv_net().replace("def build_actor_critic(", "def create_model(")),
    ("nan in the logits", NET_HEADER + """

class Actor(nn.Module):
    def __init__(self, n_in, n_actions):
        super().__init__()
        self.fc = nn.Linear(n_in, n_actions)

    def forward(self, x):
        return self.fc(x.flatten(1)) * float('nan')


def build_actor_critic(n_channels, history_len, n_actions):
    critic = nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, 1))
    return Actor(n_channels * history_len, n_actions), critic
"""),
    ("keras-style call", NET_HEADER + "\n\ndef build_actor_critic(n_channels, history_len, n_actions):\n"
     "    actor = nn.Sequential(nn.Flatten(), nn.Dense(n_actions))\n    return actor, actor\n"),
    ("wrong rnn input size", rnn_net("GRU").replace("nn.GRU(n_channels,", "nn.GRU(history_len,")),
    ("conv without groups arithmetic", conv_net().replace("groups=n_channels", "groups=5")),
    ("sklearn head", "from sklearn.neural_network import MLPClassifier\n" + conv_net()),
    ("writes weights to disk", conv_net().replace(
        "    return actor, critic", "    torch.save(actor.state_dict(), '/tmp/actor.pt')\n    return actor, critic")),
    ("one logit per batch", NET_HEADER + "\n\ndef build_actor_critic(n_channels, history_len, n_actions):\n"
     "    actor = nn.Sequential(nn.Flatten(0), nn.Linear(2 * n_channels * history_len, n_actions))\n"
     "    critic = nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, 1))\n"
     "    return actor, critic\n"),
    ("missing import", conv_net().replace(NET_HEADER, "import torch\n")),
    ("critic returns a tuple", NET_HEADER + """

class Critic(nn.Module):
    def __init__(self, n_in):
        super().__init__()
        self.fc = nn.Linear(n_in, 1)

    def forward(self, x):
        v = self.fc(x.flatten(1))
        return v, v


def build_actor_critic(n_channels, history_len, n_actions):
    actor = nn.Sequential(nn.Flatten(), nn.Linear(n_channels * history_len, n_actions))
    return actor, Critic(n_channels * history_len)
"""),
    ("lstm hidden tuple misuse", rnn_net("LSTM").replace("h[0][-1]", "h[-1]")),
]

NET_PROSE_ONLY = [
    "I would replace the convolution with a transformer encoder over the history axis, "
    "using four heads and a learned positional embedding. This should capture long-range "
    "patterns in the throughput history.",
    "A deeper residual network with batch normalization is likely to help; each block would "
    "have two dense layers and a skip connection.",
]


def build():
    OUT.mkdir(parents=True, exist_ok=True)
    manifest = {"model": MODEL, "state": {}, "network": {}}

    state_items = ([("clean", s, c) for s, c in CLEAN] + [("unnormalized", s, c) for s, c in UNNORMALIZED]
                   + [("broken", s, c) for s, c in BROKEN])
    # deterministic interleave so categories are spread through the batch
    order = sorted(range(len(state_items)), key=lambda i: (i * 37) % len(state_items))
    responses = []
    for pos, i in enumerate(order):
        cat, summary, code = state_items[i]
        responses.append(wrap_response(pos, summary, code, sketch=pos % 4 == 0))
        manifest["state"][str(pos)] = {"category": cat, "idea": summary}

    net_items = ([("valid", s, c) for s, c in NET_VALID] + [("broken", s, c) for s, c in NET_BROKEN]
                 + [("unparseable", "prose only", p) for p in NET_PROSE_ONLY])
    order = sorted(range(len(net_items)), key=lambda i: (i * 29) % len(net_items))
    net_responses = []
    for pos, i in enumerate(order):
        cat, summary, code = net_items[i]
        if cat == "unparseable":
            net_responses.append(code)
        else:
            net_responses.append(wrap_response(pos, summary, code, sketch=pos % 5 == 0))
        manifest["network"][str(pos)] = {"category": cat, "idea": summary}

    for kind, resp in (("state", responses), ("network", net_responses)):
        path = OUT / f"{kind}_responses.jsonl"
        if path.exists():
            path.unlink()
        client = RecordingClient(ScriptedClient(resp, MODEL), RecordStore(path))
        batch = generate_batch(client, kind, len(resp), PromptTemplate.load(kind), seed=0)
        print(kind, len(resp), "responses,", len(batch.candidates), "parsed,", batch.failures, "failures")
    # expected filter accounting follows from the categories alone
    cats = {k: [v["category"] for v in manifest[k].values()] for k in ("state", "network")}
    manifest["expected"] = {
        "state": {"requested": len(cats["state"]), "total": len(cats["state"]),
                  "compilable": sum(c != "broken" for c in cats["state"]),
                  "well_normalized": cats["state"].count("clean")},
        "network": {"requested": len(cats["network"]),
                    "total": sum(c != "unparseable" for c in cats["network"]),
                    "compilable": cats["network"].count("valid"), "well_normalized": None},
    }
    (OUT / "fixture_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    build()
