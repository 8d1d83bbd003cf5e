import torch
import torch.nn as nn
import torch.nn.functional as F

FILTERS = 16
HIDDEN = 256


def leaky(x):
    return F.leaky_relu(x, 0.01)


class Encoder(nn.Module):
    def __init__(self, n_channels, history_len):
        super().__init__()
        k = min(4, history_len)
        self.conv = nn.Conv1d(n_channels, n_channels * FILTERS, k, groups=n_channels)
        self.dense = nn.Linear(n_channels * FILTERS * (history_len - k + 1), HIDDEN)

    def forward(self, x):
        return leaky(self.dense(leaky(self.conv(x)).flatten(1)))


def build_actor_critic(n_channels, history_len, n_actions):
    actor = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(HIDDEN, n_actions))
    critic = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(HIDDEN, 1))
    return actor, critic
