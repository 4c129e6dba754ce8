"""Zero-shot patch scoring and top-n patch selection at the low scale."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


class SelectionError(ValueError):
    pass


def zero_shot_probs(x, W, tau: float) -> torch.Tensor:
    """p_k = softmax_k(cos(x, w_k) / tau). x: (d,) or (M, d); W: (K, d)."""
    if not tau > 0:
        raise SelectionError(f"tau must be > 0, got {tau}")
    x = torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, torch.Tensor) else x
    W = torch.as_tensor(W, dtype=x.dtype) if not isinstance(W, torch.Tensor) else W
    single = x.ndim == 1
    X = x[None] if single else x
    if (X.norm(dim=-1) == 0).any() or (W.norm(dim=-1) == 0).any():
        raise SelectionError("zero-norm vector: cosine similarity undefined")
    cos = F.normalize(X, dim=-1) @ F.normalize(W, dim=-1).T
    p = (cos / tau).softmax(dim=-1)
    return p[0] if single else p


def template_class_embedding(templates: Sequence[str], encode) -> torch.Tensor:
    """Mean of the per-template embeddings, re-normalised to unit length.

    `encode` maps a list of strings to an (n, d) tensor.
    """
    if len(templates) == 0:
        raise SelectionError("no templates for category")
    E = encode(list(templates))
    return F.normalize(E.mean(dim=0), dim=-1)


@dataclass(frozen=True)
class TemplateBank:
    names: tuple
    templates: tuple  # templates[k] -> tuple of strings

    def validate(self):
        for n, t in zip(self.names, self.templates):
            if not t:
                raise SelectionError(f"category {n!r} has no templates")
        return self

    def class_embeddings(self, encode) -> torch.Tensor:
        return torch.stack([template_class_embedding(t, encode) for t in self.templates])


def default_templates(category_names, n: int = 50) -> TemplateBank:
    from .data import TEMPLATE_PREFIXES, TEMPLATE_SUFFIXES

    combos = [(p, s) for s in TEMPLATE_SUFFIXES for p in TEMPLATE_PREFIXES][:n]
    per = tuple(tuple(f"{p} {name} {s}".strip() for p, s in combos) for name in category_names)
    return TemplateBank(tuple(category_names), per).validate()


def load_template_bank(path) -> TemplateBank:
    """Sectioned text: a `[category name]` header, then one template per line."""
    names, groups = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            names.append(line[1:-1].strip())
            groups.append([])
        elif not groups:
            raise SelectionError(f"{path}:{lineno}: template before any [category] header")
        else:
            groups[-1].append(line)
    return TemplateBank(tuple(names), tuple(tuple(g) for g in groups)).validate()


def write_template_bank(bank: TemplateBank, path) -> None:
    lines = []
    for name, temps in zip(bank.names, bank.templates):
        lines.append(f"[{name}]")
        lines.extend(temps)
        lines.append("")
    Path(path).write_text("\n".join(lines))


def rank_by_category(probs: np.ndarray, n_select: int) -> list[list[int]]:
    """Per category, indices of the n_select highest probabilities; ties -> lower index."""
    probs = np.asarray(probs)
    m = probs.shape[0]
    out = []
    for k in range(probs.shape[1]):
        order = np.lexsort((np.arange(m), -probs[:, k]))
        out.append(order[: min(n_select, m)].tolist())
    return out


def select_patches(bag, W, n_select: int, tau: float, image_encoder) -> list[list[int]]:
    """Zero-shot top-n low-scale patch ids per category, ranked descending.

    `image_encoder` maps instance token grids (M, T, F) to (M, d) embeddings.
    """
    if "low" not in bag.scale_views:
        raise SelectionError(f"bag {bag.bag_id} has no low-scale view")
    with torch.no_grad():
        emb = image_encoder(bag.low.instances)
        probs = zero_shot_probs(emb, W, tau)
    return rank_by_category(probs.numpy(), n_select)


def selected_union(ranked: list[list[int]]) -> list[int]:
    return sorted(set().union(*map(set, ranked)))
