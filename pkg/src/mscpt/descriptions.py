"""Multi-scale description bank: fixture files, validation and embedding.

Bank file (YAML)::

    provenance: <which generator produced the text>
    categories:
      - name: <category name>
        low:  [C_low descriptions]
        high: [C_high descriptions]

Embedding row order is category-major: row k * C + c holds bank[k][c].
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .encoders import PromptState, ToyVLM, generate_low_prompts

log = logging.getLogger(__name__)

# Recipe used to produce real-pathology fixtures with an LLM (kept for provenance;
# nothing here queries a model).
LLM_PROMPT_RECIPE = (
    "We are studying {category}. Please list {C_low} visual descriptions at 5x magnification "
    "and {C_high} visual descriptions at 20x magnification observed in H&E-stained "
    "histological images of {subcategory}."
)


class DescriptionBankError(ValueError):
    pass


@dataclass(frozen=True)
class DescriptionBank:
    names: tuple
    low: tuple  # low[k] -> tuple of C_low strings
    high: tuple
    provenance: str = ""

    @property
    def K(self):
        return len(self.names)

    def rows(self, scale: str) -> list[tuple[int, int, str]]:
        """(category, index, text) in embedding row order."""
        per = self.low if scale == "low" else self.high
        return [(k, c, t) for k, texts in enumerate(per) for c, t in enumerate(texts)]

    def validate(self, K: int, C_low: int, C_high: int) -> "DescriptionBank":
        if self.K != K:
            raise DescriptionBankError(f"bank has {self.K} categories, config expects {K}")
        for scale, per, want in (("low", self.low, C_low), ("high", self.high, C_high)):
            if len(per) != K:
                raise DescriptionBankError(f"{scale}: {len(per)} category sections for K={K}")
            for k, texts in enumerate(per):
                if len(texts) != want:
                    raise DescriptionBankError(
                        f"category {k} ({self.names[k]}), {scale}: {len(texts)} descriptions, expected {want}")
                for c, t in enumerate(texts):
                    if not isinstance(t, str) or not t.strip():
                        raise DescriptionBankError(f"category {k} ({self.names[k]}), {scale}[{c}]: empty description")
                dupes = len(texts) - len(set(texts))
                if dupes:
                    warnings.warn(f"category {k}, {scale}: {dupes} duplicate descriptions", stacklevel=2)
        return self

    def to_dict(self) -> dict:
        return {"provenance": self.provenance,
                "categories": [{"name": n, "low": list(lo), "high": list(hi)}
                               for n, lo, hi in zip(self.names, self.low, self.high)]}


def load_description_bank(path, cfg) -> DescriptionBank:
    data = yaml.safe_load(Path(path).read_text())
    try:
        cats = data["categories"]
        bank = DescriptionBank(tuple(c["name"] for c in cats),
                               tuple(tuple(c.get("low") or ()) for c in cats),
                               tuple(tuple(c.get("high") or ()) for c in cats),
                               data.get("provenance", ""))
    except (KeyError, TypeError) as e:
        raise DescriptionBankError(f"{path}: malformed description bank ({e})") from None
    return bank.validate(cfg.K, cfg.C_low, cfg.C_high)


def write_description_bank(bank: DescriptionBank, path) -> None:
    Path(path).write_text(yaml.safe_dump(bank.to_dict(), sort_keys=False, width=120))


def synthesize_description_bank(world, C_low: int, C_high: int, seed: int = 0,
                                 scale_error: float = 0.1) -> DescriptionBank:
    """Fixture recipe for synthetic categories.

    Each description names witness concepts of its category in a filler phrase.
    A `scale_error` fraction names the other scale's concept instead, imitating
    LLM text attributed to the wrong magnification. In context mode each
    description names one of the category's co-occurring concept pairs.
    """
    from .data import FILLER_PATTERNS, MODIFIERS

    rng = np.random.default_rng([seed, 3])
    K = len(world.category_names)
    low, high = [], []
    for k in range(K):
        for scale, C, out in (("low", C_low, low), ("high", C_high, high)):
            other = "high" if scale == "low" else "low"
            seen, texts = set(), []
            for i in range(C):
                for _ in range(50):
                    named = other if rng.random() < scale_error else scale
                    own = list(world.witness[(k, named)])
                    if world.context_mode:
                        idx = list(rng.permutation(world.contexts(k, named)[i % 2]))
                    else:
                        idx = [own[i % len(own)]] if rng.random() < 0.6 else list(rng.permutation(own))
                    text = FILLER_PATTERNS[rng.integers(len(FILLER_PATTERNS))].format(world.words(idx))
                    if rng.random() < 0.5:
                        text = f"{MODIFIERS[rng.integers(len(MODIFIERS))]} {text}"
                    if text not in seen:
                        break
                seen.add(text)
                texts.append(text)
            out.append(tuple(texts))
    return DescriptionBank(tuple(world.category_names), tuple(low), tuple(high),
                           f"synthetic recipe (seed={seed}, scale_error={scale_error})")


class DescriptionEncoder:
    """Embeds a bank; caches the frozen low-scale pass (embeddings and [EOT] traces).

    The frozen tower never changes, so traces are computed once and only the
    generator g is re-applied per step.
    """

    def __init__(self, bank: DescriptionBank, vlm: ToyVLM):
        self.bank = bank
        self.vlm = vlm
        tok = vlm.tokenizer
        self.row_ids = {s: [(k, c) for k, c, _ in bank.rows(s)] for s in ("low", "high")}
        self.C_low = len(bank.low[0])
        with torch.no_grad():
            self.z_low, self.traces = vlm.text.encode_frozen([tok.encode(t) for _, _, t in bank.rows("low")])
        self.high_words = [tok.words(t) for _, _, t in bank.rows("high")]
        self.high_category = torch.as_tensor([k for k, _, _ in bank.rows("high")])

    def low_prompts(self, g) -> torch.Tensor:
        """(K, L, C_low, d): p_low per category from that category's low descriptions."""
        K = self.bank.K
        tr = self.traces.reshape(K, self.C_low, *self.traces.shape[1:])
        return torch.stack([generate_low_prompts(tr[k], g) for k in range(K)])

    def z_high(self, prompts: Optional[PromptState], use_mhpt: bool = True, observer=None) -> torch.Tensor:
        if prompts is None:
            return self.vlm.text.encode_prompted(self.high_words, observer=observer)
        p_low = None
        if use_mhpt:
            p_low = self.low_prompts(prompts.g)[self.high_category]
        return self.vlm.text.encode_prompted(self.high_words, prompts.p_glob, p_low, observer=observer)


def embed_description_bank(bank: DescriptionBank, vlm: ToyVLM, prompts: Optional[PromptState],
                           use_mhpt: bool = True):
    """Return (Z_low (K*C_low, d_joint), Z_high (K*C_high, d_joint)) in category-major order."""
    enc = DescriptionEncoder(bank, vlm)
    return enc.z_low, enc.z_high(prompts, use_mhpt)
