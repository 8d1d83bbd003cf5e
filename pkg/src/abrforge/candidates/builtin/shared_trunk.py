import torch
import torch.nn as nn


class Trunk(nn.Module):
    def __init__(self, n_channels, history_len, filters=16, hidden=128):
        super().__init__()
        k = min(4, history_len)
        self.conv = nn.Conv1d(n_channels, n_channels * filters, k, groups=n_channels)
        self.dense = nn.Linear(n_channels * filters * (history_len - k + 1), hidden)

    def forward(self, x):
        return torch.relu(self.dense(torch.relu(self.conv(x)).flatten(1)))


def build_actor_critic(n_channels, history_len, n_actions):
    # one hidden trunk, two output heads
    trunk = Trunk(n_channels, history_len)
    actor = nn.Sequential(trunk, nn.Linear(128, n_actions))
    critic = nn.Sequential(trunk, nn.Linear(128, 1))
    return actor, critic
