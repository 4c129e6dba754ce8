"""Reference MIL aggregators: mean, max and gated attention (ABMIL) pooling."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def _check(P):
    if P.ndim != 2 or P.shape[0] < 1:
        raise ValueError(f"empty bag or bad shape {tuple(P.shape)}")


def mean_pool(P: torch.Tensor) -> torch.Tensor:
    _check(P)
    return P.mean(dim=0)


def max_pool(P: torch.Tensor) -> torch.Tensor:
    _check(P)
    return P.max(dim=0).values


class AttentionPool(nn.Module):
    """Gated attention: a_i ∝ exp(w^T (tanh(V h_i) * sigmoid(U h_i)))."""

    def __init__(self, d: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(1, d // 2)
        self.V = nn.Linear(d, hidden)
        self.U = nn.Linear(d, hidden)
        self.w = nn.Linear(hidden, 1)

    def forward(self, P):
        _check(P)
        scores = self.w(torch.tanh(self.V(P)) * torch.sigmoid(self.U(P))).squeeze(-1)
        weights = scores.softmax(dim=0)
        return weights @ P, weights


def attention_pool(P, params: AttentionPool):
    return params(P)


class PooledClassifier(nn.Module):
    """Aggregator over frozen instance embeddings followed by a linear category head."""

    def __init__(self, d: int, K: int, aggregator: str = "attention"):
        super().__init__()
        if aggregator not in ("mean", "max", "attention"):
            raise ValueError(f"unknown aggregator {aggregator!r}")
        self.aggregator = aggregator
        self.attn = AttentionPool(d) if aggregator == "attention" else None
        self.head = nn.Linear(d, K)

    def forward(self, P):
        if self.aggregator == "mean":
            z, w = mean_pool(P), None
        elif self.aggregator == "max":
            z, w = max_pool(P), None
        else:
            z, w = self.attn(P)
        return self.head(F.normalize(z, dim=-1)), w
