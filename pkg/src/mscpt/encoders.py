"""Toy vision-language towers with deep prompt injection.

One frozen text tower and one frozen image tower are shared by both scales.
The asymmetry lives in how they are driven:

* low scale: frozen text tower (descriptions) + prompted image tower (patches)
* high scale: hierarchically prompted text tower (descriptions) + frozen image tower

Prompt tokens carry no positional embedding; real tokens keep their natural
positions, so a prompted pass with zero prompt slots is exactly the frozen pass.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CACHE_FORMAT = "mscpt-embedding-cache"
CACHE_VERSION = 1
CACHE_DTYPE = "<f4"
MANIFEST_NAME = "manifest.json"


class EncoderError(ValueError):
    pass


class Tokenizer:
    """Whitespace/word tokenizer over a small fitted vocabulary."""

    PAD, CLS, EOT, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<cls>", "<eot>", "<unk>")

    def __init__(self, words: Sequence[str]):
        self.itos = list(self.SPECIALS) + sorted(set(words) - set(self.SPECIALS))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @staticmethod
    def split(text: str) -> list[str]:
        return re.findall(r"[a-z0-9]+", text.lower())

    @classmethod
    def fit(cls, texts: Sequence[str]) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update(cls.split(t))
        return cls(sorted(words))

    def __len__(self):
        return len(self.itos)

    def words(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.UNK) for w in self.split(text)]

    def encode(self, text: str) -> list[int]:
        return [self.CLS] + self.words(text) + [self.EOT]


class Block(nn.Module):
    """Pre-LN transformer layer with full (unmasked) attention."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)

    def forward(self, x, key_pad=None):
        n, s, d = x.shape
        dh = d // self.n_heads
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q, k, v = (t.reshape(n, s, self.n_heads, dh).transpose(1, 2) for t in (q, k, v))
        att = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_pad is not None:
            att = att.masked_fill(key_pad[:, None, None, :], float("-inf"))
        h = (att.softmax(dim=-1) @ v).transpose(1, 2).reshape(n, s, d)
        x = x + self.out(h)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


def _run_blocks(blocks, x, key_pad, deep=None, observer=None):
    """Run layers; `deep` (L, N, P, d) overwrites slots 1..P before every layer.

    Returns the list of per-layer outputs.
    """
    outs = []
    for i, block in enumerate(blocks):
        if deep is not None and deep.shape[2] > 0:
            p = deep.shape[2]
            x = torch.cat([x[:, :1], deep[i], x[:, 1 + p:]], dim=1)
        if observer is not None:
            observer(i, x)
        x = block(x, key_pad)
        outs.append(x)
    return outs


def _pad(seqs: Sequence[Sequence[int]], fill: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), fill, dtype=torch.long)
    pad = torch.ones((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        pad[i, :len(s)] = False
    return ids, pad


class TextTower(nn.Module):
    def __init__(self, vocab_size, d_model, n_layers, n_heads, context_len, d_joint):
        super().__init__()
        self.context_len = context_len
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Parameter(torch.randn(context_len, d_model) * 0.01)
        self.blocks = nn.ModuleList(Block(d_model, n_heads) for _ in range(n_layers))
        self.ln_final = nn.LayerNorm(d_model)
        self.proj = nn.Parameter(torch.randn(d_model, d_model if d_joint is None else d_joint) / math.sqrt(d_model))

    @property
    def n_layers(self):
        return len(self.blocks)

    @property
    def d_model(self):
        return self.tok_emb.embedding_dim

    def _check(self, seq):
        if len(seq) > self.context_len:
            raise EncoderError(f"sequence of length {len(seq)} exceeds context limit {self.context_len}")
        if len(seq) < 2 or seq[-1] != Tokenizer.EOT:
            raise EncoderError("token sequence must end with <eot>")

    def encode_frozen(self, token_seqs: Sequence[Sequence[int]]):
        """Encode full sequences ([CLS] ... [EOT]).

        Returns (embeddings (N, d_joint), trace (N, L, d_model)) where trace[:, l]
        is the [EOT] output of layer l.
        """
        for s in token_seqs:
            self._check(s)
        ids, pad = _pad(token_seqs, Tokenizer.PAD)
        eot = torch.as_tensor([len(s) - 1 for s in token_seqs])
        rows = torch.arange(len(token_seqs))
        x = self.tok_emb(ids) + self.pos_emb[: ids.shape[1]]
        outs = _run_blocks(self.blocks, x, pad)
        trace = torch.stack([o[rows, eot] for o in outs], dim=1)
        return self.ln_final(outs[-1][rows, eot]) @ self.proj, trace

    def encode_prompted(self, word_seqs, p_glob=None, p_low=None, observer=None):
        """Hierarchically prompted pass.

        word_seqs: description tokens without [CLS]/[EOT] (the p_high stream).
        p_glob: (L, G, d) shared by all rows; p_low: (N, L, C, d) per row.
        Layout at every layer: [CLS, p_glob, p_low, p_high..., EOT, pad...].
        """
        n, L = len(word_seqs), self.n_layers
        d = self.d_model
        ref = self.pos_emb
        if p_glob is None:
            p_glob = ref.new_zeros(L, 0, d)
        if p_low is None:
            p_low = ref.new_zeros(n, L, 0, d)
        if p_glob.shape[0] != L or p_low.shape[1] != L:
            raise EncoderError(f"prompt depth mismatch: glob {p_glob.shape[0]}, low {p_low.shape[1]}, layers {L}")
        if p_low.shape[0] != n:
            raise EncoderError(f"p_low has {p_low.shape[0]} rows for {n} descriptions")
        g, c = p_glob.shape[1], p_low.shape[2]
        P = g + c
        lens = [len(w) for w in word_seqs]
        width = max(lens) + 2 + P
        if width > self.context_len:
            raise EncoderError(f"prompted layout width {width} exceeds context limit {self.context_len}")

        real = [[Tokenizer.CLS] + list(w) + [Tokenizer.EOT] for w in word_seqs]
        ids, real_pad = _pad(real, Tokenizer.PAD)
        x_real = self.tok_emb(ids) + self.pos_emb[: ids.shape[1]]
        x = torch.cat([x_real[:, :1], x_real.new_zeros(n, P, d), x_real[:, 1:]], dim=1)
        key_pad = torch.cat([real_pad[:, :1], torch.zeros(n, P, dtype=torch.bool), real_pad[:, 1:]], dim=1)
        deep = torch.cat([p_glob[:, None].expand(L, n, g, d), p_low.transpose(0, 1)], dim=2)

        if observer is not None:
            spans = {"cls": (0, 1), "glob": (1, 1 + g), "low": (1 + g, 1 + P),
                     "high": [(1 + P, 1 + P + m) for m in lens], "eot": [1 + P + m for m in lens]}
            inner = observer
            observer = lambda i, xi: inner(i, xi, spans)  # noqa: E731

        outs = _run_blocks(self.blocks, x, key_pad, deep=deep, observer=observer)
        eot = torch.as_tensor([1 + P + m for m in lens])
        return self.ln_final(outs[-1][torch.arange(n), eot]) @ self.proj


class ImageTower(nn.Module):
    """ViT-style tower over instance token grids (M, T, F); reads out [CLS]."""

    def __init__(self, in_features, d_model, n_layers, n_heads, d_joint, max_tokens=16):
        super().__init__()
        self.patch_embed = nn.Linear(in_features, d_model)
        self.cls = nn.Parameter(torch.randn(d_model) * 0.02)
        self.pos_emb = nn.Parameter(torch.randn(1 + max_tokens, d_model) * 0.01)
        self.blocks = nn.ModuleList(Block(d_model, n_heads) for _ in range(n_layers))
        self.ln_final = nn.LayerNorm(d_model)
        self.proj = nn.Parameter(torch.randn(d_model, d_joint) / math.sqrt(d_model))

    @property
    def n_layers(self):
        return len(self.blocks)

    def forward(self, instances, p_vis=None):
        if isinstance(instances, np.ndarray):
            instances = np.array(instances)  # bag arrays are read-only; torch wants writable memory
        x = torch.as_tensor(instances, dtype=self.proj.dtype)
        if x.ndim == 2:
            x = x[:, None, :]
        n, t, _ = x.shape
        if t + 1 > self.pos_emb.shape[0]:
            raise EncoderError(f"{t} tokens exceed the tower's positional table")
        tokens = torch.cat([self.cls.expand(n, 1, -1), self.patch_embed(x)], dim=1) + self.pos_emb[: t + 1]
        deep = None
        if p_vis is not None and p_vis.shape[1] > 0:
            if p_vis.shape[0] != self.n_layers:
                raise EncoderError(f"p_vis depth {p_vis.shape[0]} != image layers {self.n_layers}")
            p = p_vis.shape[1]
            tokens = torch.cat([tokens[:, :1], tokens.new_zeros(n, p, tokens.shape[-1]), tokens[:, 1:]], dim=1)
            deep = p_vis[:, None].expand(-1, n, -1, -1)
        out = _run_blocks(self.blocks, tokens, None, deep=deep)[-1]
        return self.ln_final(out[:, 0]) @ self.proj


class PromptGenerator(nn.Module):
    """g: one-hidden-layer MLP; zero-initialised output so p_low starts at 0."""

    def __init__(self, d_model: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, d_model)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class PromptState(nn.Module):
    """Trainable prompt parameters: p_glob, p_vis and the generator g."""

    def __init__(self, L_text, len_glob, L_img, len_vis, d_model, init_std=0.02):
        super().__init__()
        self.p_glob = nn.Parameter(torch.randn(L_text, len_glob, d_model) * init_std)
        self.p_vis = nn.Parameter(torch.randn(L_img, len_vis, d_model) * init_std)
        self.g = PromptGenerator(d_model)


def generate_low_prompts(traces, g: nn.Module) -> torch.Tensor:
    """p_low[l, i] = g(trace of description i at layer l).

    traces: (C, L, d) tensor or a sequence of (L, d) traces. Returns (L, C, d).
    """
    if not isinstance(traces, torch.Tensor):
        shapes = {tuple(t.shape) for t in traces}
        if len(shapes) != 1:
            raise EncoderError(f"mismatched trace shapes {sorted(shapes)}")
        traces = torch.stack(list(traces))
    if traces.ndim != 3:
        raise EncoderError(f"expected (C, L, d) traces, got {tuple(traces.shape)}")
    return g(traces).transpose(0, 1)


class ToyVLM(nn.Module):
    """Frozen toy vision-language model: tokenizer + text tower + image tower."""

    def __init__(self, tokenizer: Tokenizer, in_features: int, d_model=32, d_joint=32,
                 L_text=2, L_img=2, n_heads=2, context_len=77, max_tokens=16):
        super().__init__()
        self.tokenizer = tokenizer
        self.text = TextTower(len(tokenizer), d_model, L_text, n_heads, context_len, d_joint)
        self.image = ImageTower(in_features, d_model, L_img, n_heads, d_joint, max_tokens)
        self.hparams = dict(in_features=in_features, d_model=d_model, d_joint=d_joint, L_text=L_text,
                            L_img=L_img, n_heads=n_heads, context_len=context_len, max_tokens=max_tokens)

    def encode_texts(self, texts: Sequence[str]):
        return self.text.encode_frozen([self.tokenizer.encode(t) for t in texts])

    def save(self, path):
        torch.save({"hparams": self.hparams, "vocab": self.tokenizer.itos[len(Tokenizer.SPECIALS):],
                    "state": self.state_dict()}, path)

    @classmethod
    def load(cls, path):
        blob = torch.load(path, weights_only=False)
        vlm = cls(Tokenizer(blob["vocab"]), **blob["hparams"])
        vlm.load_state_dict(blob["state"])
        return vlm.double().requires_grad_(False)


def pretrain_contrastive(vlm: ToyVLM, sample_pairs: Callable[[np.random.Generator, int], tuple],
                         steps=400, batch=96, lr=3e-3, temperature=0.07, seed=0, log_every=0):
    """Symmetric InfoNCE alignment of the toy towers on synthetic caption/feature pairs.

    Stands in for large-scale pretraining; the result is frozen afterwards.
    `sample_pairs(rng, n)` returns (texts, feats) or (texts, feats, keys).
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    vlm.train()
    opt = torch.optim.Adam(vlm.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    losses = []
    dtype = vlm.text.proj.dtype
    for step in range(steps):
        texts, feats, *keys = sample_pairs(rng, batch)
        t, _ = vlm.encode_texts(texts)
        v = vlm.image(torch.as_tensor(feats, dtype=dtype))
        logits = F.normalize(v, dim=-1) @ F.normalize(t, dim=-1).T / temperature
        # pairs sharing a key (by default the caption itself) are joint positives
        codes = np.unique(keys[0] if keys else texts, return_inverse=True)[1]
        same = torch.as_tensor(codes[:, None] == codes[None, :], dtype=dtype)
        target = same / same.sum(1, keepdim=True)
        loss = 0.5 * (-(target * logits.log_softmax(1)).sum(1).mean()
                      - (target * logits.T.log_softmax(1)).sum(1).mean())
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            print(f"pretrain step {step}: {losses[-1]:.4f}")
    vlm.eval()
    vlm.requires_grad_(False)
    return losses


@dataclass
class EmbeddingCache:
    """Read-only provider of cached embedding matrices keyed by (bag_id, scale)."""

    root: Path
    entries: dict

    def keys(self):
        return list(self.entries)

    def __contains__(self, key):
        return tuple(key) in self.entries

    def get(self, bag_id: str, scale: str) -> np.ndarray:
        try:
            return self.entries[(bag_id, scale)]["data"]
        except KeyError:
            raise KeyError(f"no cached embeddings for bag {bag_id!r} at scale {scale!r}") from None

    def row_ids(self, bag_id: str, scale: str) -> list:
        self.get(bag_id, scale)
        return self.entries[(bag_id, scale)]["row_ids"]


def load_cached_embeddings(manifest_path) -> EmbeddingCache:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    meta = json.loads(manifest_path.read_text())
    if meta.get("format") != CACHE_FORMAT:
        raise EncoderError(f"{manifest_path}: not an embedding cache manifest")
    if meta.get("dtype") != CACHE_DTYPE:
        raise EncoderError(f"{manifest_path}: unsupported dtype {meta.get('dtype')!r}")
    root = manifest_path.parent
    entries = {}
    for e in meta["entries"]:
        shape = tuple(e["shape"])
        if len(shape) != 2:
            raise EncoderError(f"entry {e['bag_id']}/{e['scale']}: expected 2-d shape, got {shape}")
        raw = (root / e["file"]).read_bytes()
        expected = shape[0] * shape[1] * 4
        if len(raw) != expected:
            raise EncoderError(f"entry {e['bag_id']}/{e['scale']}: payload has {len(raw)} bytes, expected {expected}")
        if len(e["row_ids"]) != shape[0]:
            raise EncoderError(f"entry {e['bag_id']}/{e['scale']}: {len(e['row_ids'])} row ids for {shape[0]} rows")
        data = np.frombuffer(raw, dtype=CACHE_DTYPE).reshape(shape)
        entries[(e["bag_id"], e["scale"])] = {"data": data, "row_ids": list(e["row_ids"])}
    return EmbeddingCache(root, entries)
