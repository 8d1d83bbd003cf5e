import torch
import torch.nn as nn


class Encoder(nn.Module):
    """Elman RNN over the history axis in place of the convolution."""

    def __init__(self, n_channels, history_len, hidden=64, dense=128):
        super().__init__()
        self.rnn = nn.RNN(n_channels, hidden, batch_first=True)
        self.dense = nn.Linear(hidden, dense)

    def forward(self, x):
        _, h = self.rnn(x.transpose(1, 2))
        return torch.relu(self.dense(h[-1]))


def build_actor_critic(n_channels, history_len, n_actions):
    actor = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(128, n_actions))
    critic = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(128, 1))
    return actor, critic
