"""Non-parametric cross-guided pooling and the three-way cross-entropy objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class PoolingError(ValueError):
    pass


@dataclass(frozen=True)
class LogitsTriple:
    high: torch.Tensor
    low: torch.Tensor
    overall: torch.Tensor

    @classmethod
    def from_scales(cls, high, low):
        return cls(high, low, (high + low) / 2)


def topk_pool(scores: torch.Tensor, K_top: int) -> torch.Tensor:
    """Mean of the K_top largest entries of a score block (max at 1, mean at saturation)."""
    flat = scores.reshape(-1)
    if not 1 <= K_top <= flat.numel():
        raise PoolingError(f"K_top={K_top} outside [1, {flat.numel()}] for a block of {tuple(scores.shape)}")
    return flat.topk(K_top).values.mean()


def _category_pool(sim: torch.Tensor, K: int, K_top: int) -> torch.Tensor:
    """sim (M, K*C) in category-major column order -> (K,) pooled scores."""
    if sim.shape[1] % K:
        raise PoolingError(f"{sim.shape[1]} description columns do not split into {K} categories")
    blocks = sim.reshape(sim.shape[0], K, -1)
    return torch.stack([topk_pool(blocks[:, k], K_top) for k in range(K)])


def cross_guided_logits(P_high, P_low, Z_high, Z_low, K: int, K_top: int,
                        cross_guidance: bool = True, scale: float = 1.0) -> LogitsTriple:
    """Same-scale plus (optionally) cross-scale top-K pooled patch-description scores.

    Inputs are used as given; callers normalise rows and pick `scale` (a fixed
    logit scale) if they want cosine logits.
    """
    high = _category_pool(P_high @ Z_high.T, K, K_top)
    low = _category_pool(P_low @ Z_low.T, K, K_top)
    if cross_guidance:
        high = high + _category_pool(P_high @ Z_low.T, K, K_top)
        low = low + _category_pool(P_low @ Z_high.T, K, K_top)
    return LogitsTriple.from_scales(high * scale, low * scale)


def mscpt_loss(triple: LogitsTriple, label: int, weights=(1.0, 1.0, 1.0)) -> torch.Tensor:
    K = triple.overall.shape[-1]
    if not 0 <= label < K:
        raise PoolingError(f"label {label} outside [0, {K})")
    y = torch.as_tensor([label])
    parts = [F.cross_entropy(t[None], y) for t in (triple.overall, triple.high, triple.low)]
    return sum(w * p for w, p in zip(weights, parts))


def predict(triple) -> int:
    # torch.argmax returns the first maximal index
    overall = triple.overall if isinstance(triple, LogitsTriple) else torch.as_tensor(triple)
    return int(torch.argmax(overall))
