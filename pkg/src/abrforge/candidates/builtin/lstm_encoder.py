import torch
import torch.nn as nn


class Encoder(nn.Module):
    def __init__(self, n_channels, history_len, hidden=64, dense=128):
        super().__init__()
        self.lstm = nn.LSTM(n_channels, hidden, batch_first=True)
        self.dense = nn.Linear(hidden, dense)

    def forward(self, x):
        _, (h, _) = self.lstm(x.transpose(1, 2))
        return torch.relu(self.dense(h[-1]))


def build_actor_critic(n_channels, history_len, n_actions):
    actor = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(128, n_actions))
    critic = nn.Sequential(Encoder(n_channels, history_len), nn.Linear(128, 1))
    return actor, critic
