"""Image-text similarity graph and GCN prompt tuning, plus KNN graph builders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class GraphError(ValueError):
    pass


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1)
    bad = torch.nonzero(norms == 0).flatten()
    if len(bad):
        raise GraphError(f"{what} row {bad[0].item()} has zero norm; cosine undefined")
    return x / norms[:, None]


def semantic_similarity(P: torch.Tensor, Z: torch.Tensor, tau: float) -> torch.Tensor:
    """S[i, j] = softmax_j(cos(P_i, Z_j) / tau); shape (M, K*C)."""
    if not tau > 0:
        raise GraphError(f"tau must be > 0, got {tau}")
    cos = _unit_rows(P, "patch") @ _unit_rows(Z, "description").T
    return (cos / tau).softmax(dim=-1)


def adjacency_from_similarity(S: torch.Tensor, tau: float) -> torch.Tensor:
    """A[i, j] = softmax_j(cos(S_i, S_j) / tau); row-stochastic, not symmetric."""
    Sn = _unit_rows(S, "similarity")
    return (Sn @ Sn.T / tau).softmax(dim=-1)


@dataclass(frozen=True)
class SimilarityState:
    S: torch.Tensor
    A: torch.Tensor
    tau: float


def similarity_state(P, Z, tau) -> SimilarityState:
    S = semantic_similarity(P, Z, tau)
    return SimilarityState(S, adjacency_from_similarity(S, tau), tau)


def normalized_adjacency(A: torch.Tensor) -> torch.Tensor:
    """D^-1/2 (A + I) D^-1/2 with D the row sums of A + I."""
    if (A < 0).any():
        raise GraphError("adjacency must be non-negative")
    At = A + torch.eye(A.shape[0], dtype=A.dtype)
    dinv = At.sum(dim=1).rsqrt()
    return dinv[:, None] * At * dinv[None, :]


ACTIVATIONS = {"identity": lambda x: x, "gelu": F.gelu, "relu": F.relu}


def gcn_layer(A, H, W, activation="identity"):
    if not (torch.isfinite(A).all() and torch.isfinite(H).all()):
        raise GraphError("non-finite input to gcn_layer")
    if A.shape != (H.shape[0], H.shape[0]) or H.shape[1] != W.shape[0]:
        raise GraphError(f"shape mismatch: A {tuple(A.shape)}, H {tuple(H.shape)}, W {tuple(W.shape)}")
    return ACTIVATIONS[activation](normalized_adjacency(A) @ H @ W)


class GcnParams(nn.Module):
    """Stack of square GCN weights, identity-initialised so tuning starts from pure propagation.

    Hidden layers use GELU; the last layer is linear so outputs stay in the joint space.
    """

    def __init__(self, d: int, n_layers: int = 1):
        super().__init__()
        if n_layers < 1:
            raise GraphError("gcn_layers must be >= 1")
        self.weights = nn.ParameterList(nn.Parameter(torch.eye(d)) for _ in range(n_layers))

    @property
    def activations(self):
        n = len(self.weights)
        return ["gelu"] * (n - 1) + ["identity"]


def graph_prompt_tune(P, A, params: GcnParams):
    H = P
    for W, act in zip(params.weights, params.activations):
        H = gcn_layer(A, H, W, act)
    return H


def _knn_adjacency(order_key: np.ndarray, k: int) -> np.ndarray:
    """order_key[i, j]: smaller = nearer; self excluded; ties broken by lower index."""
    m = order_key.shape[0]
    if not 1 <= k <= m - 1:
        raise GraphError(f"k={k} out of range [1, {m - 1}]")
    A = np.zeros((m, m))
    idx = np.arange(m)
    for i in range(m):
        others = idx[idx != i]
        # lexsort: last key is primary
        ranked = others[np.lexsort((others, order_key[i, others]))]
        A[i, ranked[:k]] = 1.0
    return A / A.sum(axis=1, keepdims=True)


def knn_graph_coords(coords, k: int) -> np.ndarray:
    c = np.asarray(coords, dtype=float)
    dist = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    return _knn_adjacency(dist, k)


def knn_graph_features(P, k: int) -> np.ndarray:
    X = np.asarray(P.detach() if isinstance(P, torch.Tensor) else P, dtype=float)
    norms = np.linalg.norm(X, axis=1)
    if (norms == 0).any():
        raise GraphError(f"feature row {int(np.flatnonzero(norms == 0)[0])} has zero norm")
    Xn = X / norms[:, None]
    return _knn_adjacency(-(Xn @ Xn.T), k)
