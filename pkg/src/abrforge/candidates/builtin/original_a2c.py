import torch
import torch.nn as nn

FILTERS = 16
HIDDEN = 128
KERNEL = 4


class Encoder(nn.Module):
    """Per-channel 1-D convolution over the history axis, then a dense layer."""

    def __init__(self, n_channels, history_len, hidden=HIDDEN, activation=torch.relu):
        super().__init__()
        k = min(KERNEL, history_len)
        self.conv = nn.Conv1d(n_channels, n_channels * FILTERS, k, groups=n_channels)
        self.dense = nn.Linear(n_channels * FILTERS * (history_len - k + 1), hidden)
        self.activation = activation

    def forward(self, x):
        h = self.activation(self.conv(x)).flatten(1)
        return self.activation(self.dense(h))


def build_actor_critic(n_channels, history_len, n_actions):
    actor = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(HIDDEN, n_actions))
    critic = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(HIDDEN, 1))
    return actor, critic
