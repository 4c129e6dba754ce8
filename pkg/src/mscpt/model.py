"""Model assembly: toy VLM construction, the prompted MIL classifier and a pooled baseline."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .baselines import AttentionPool, PooledClassifier
from .core import ModelConfig, validate_config
from .descriptions import DescriptionBank, DescriptionEncoder
from .encoders import PromptState, Tokenizer, ToyVLM, pretrain_contrastive
from .graph import GcnParams, graph_prompt_tune, knn_graph_coords, knn_graph_features, similarity_state
from .pooling import LogitsTriple, cross_guided_logits, mscpt_loss
from .selection import TemplateBank, default_templates, select_patches, selected_union

_VLM_CACHE: dict = {}


def build_toy_vlm(world, cfg: ModelConfig, seed: int = 0, steps: int = 400) -> ToyVLM:
    """Contrastively pre-train a toy VLM on captions drawn from `world`; memoised per process."""
    key = (hashlib.sha1(world.prototypes.tobytes()).hexdigest(), tuple(world.names), cfg.d_model,
           cfg.d_joint, cfg.L_text, cfg.L_img, cfg.n_heads, cfg.context_len, seed, steps)
    if key not in _VLM_CACHE:
        torch.manual_seed(seed)
        vlm = ToyVLM(Tokenizer.fit(world.vocabulary()), world.prototypes.shape[1], d_model=cfg.d_model,
                     d_joint=cfg.d_joint, L_text=cfg.L_text, L_img=cfg.L_img, n_heads=cfg.n_heads,
                     context_len=cfg.context_len).double()
        pretrain_contrastive(vlm, world.caption_pairs, steps=steps, seed=seed)
        _VLM_CACHE[key] = vlm
    return _VLM_CACHE[key]


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha1()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class FrozenView:
    ranked: list
    selected: list
    low_instances: torch.Tensor
    low_coords: np.ndarray
    P_high: torch.Tensor
    high_coords: np.ndarray


class _FrozenFeatureMixin:
    """Per-bag cache of everything computed by frozen towers (selection, high-scale patches)."""

    def _init_cache(self, vlm, names, cfg, templates, embedding_provider):
        self._frozen = {}
        self.embedding_provider = embedding_provider
        self.templates = templates or default_templates(names)
        with torch.no_grad():
            self.class_emb = self.templates.class_embeddings(lambda ts: vlm.encode_texts(ts)[0])

    def frozen_view(self, bag) -> FrozenView:
        fv = self._frozen.get(bag.bag_id)
        if fv is None:
            cfg = self.cfg
            with torch.no_grad():
                ranked = select_patches(bag, self.class_emb, cfg.n_select, cfg.tau, self.vlm.image)
                sel = selected_union(ranked)
                if self.embedding_provider is not None:
                    P_high = torch.as_tensor(np.array(self.embedding_provider.get(bag.bag_id, "high")),
                                             dtype=torch.float64)
                else:
                    P_high = self.vlm.image(bag.high.instances)
            fv = FrozenView(ranked, sel, torch.as_tensor(bag.low.instances[sel], dtype=torch.float64),
                            bag.low.coords[sel], P_high, bag.high.coords)
            self._frozen[bag.bag_id] = fv
        return fv

    def frozen_state_hash(self) -> str:
        return state_hash(self.vlm)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


class MSCPT(_FrozenFeatureMixin, nn.Module):
    """Prompted two-scale MIL classifier with component toggles.

    use_mhpt: low-description prompts p_low inside the high text pass.
    use_isgpt: graph propagation of patch embeddings (else P~ = P).
    use_npcgp: top-K cross-guided pooling (else gated attention pooling).
    """

    def __init__(self, vlm: ToyVLM, bank: DescriptionBank, cfg: ModelConfig,
                 templates: TemplateBank | None = None, embedding_provider=None):
        super().__init__()
        self.cfg = validate_config(cfg)
        bank.validate(cfg.K, cfg.C_low, cfg.C_high)
        self.vlm = vlm.requires_grad_(False)
        self.desc = DescriptionEncoder(bank, vlm)
        torch.manual_seed(cfg.seed)
        d = cfg.d_model
        self.prompts = PromptState(vlm.text.n_layers, cfg.len_glob, vlm.image.n_layers, cfg.len_vis, d).double()
        self.gcn = nn.ModuleDict({s: GcnParams(cfg.d_joint, cfg.gcn_layers) for s in ("high", "low")}).double()
        if not cfg.use_isgpt:
            self.gcn.requires_grad_(False)
        if not cfg.use_mhpt:
            self.prompts.g.requires_grad_(False)
        self.attn = None
        if not cfg.use_npcgp:
            self.attn = nn.ModuleDict({s: AttentionPool(cfg.d_joint) for s in ("high", "low")}).double()
        self.counters = Counter()
        self._init_cache(vlm, bank.names, cfg, templates, embedding_provider)

    def text_embeddings(self, observer=None):
        return self.desc.z_low, self.desc.z_high(self.prompts, self.cfg.use_mhpt, observer=observer)

    def patch_embeddings(self, bag, all_low: bool = False):
        fv = self.frozen_view(bag)
        if all_low:
            low = self.vlm.image(bag.low.instances, self.prompts.p_vis)
            return low, bag.low.coords, fv.P_high, fv.high_coords
        return self.vlm.image(fv.low_instances, self.prompts.p_vis), fv.low_coords, fv.P_high, fv.high_coords

    def adjacency(self, P, Z, coords):
        cfg = self.cfg
        self.counters["adjacency"] += 1
        if cfg.graph == "sim":
            return similarity_state(P, Z, cfg.tau).A
        m = P.shape[0]
        if m == 1:
            return P.new_zeros(1, 1)
        k = min(cfg.knn_k, m - 1)
        A = knn_graph_coords(coords, k) if cfg.graph == "knn-coord" else knn_graph_features(P, k)
        return torch.as_tensor(A, dtype=P.dtype)

    def propagate(self, P, Z, coords, scale):
        if not self.cfg.use_isgpt:
            return P
        return graph_prompt_tune(P, self.adjacency(P, Z, coords), self.gcn[scale])

    def forward(self, bag, texts=None, all_low: bool = False) -> LogitsTriple:
        cfg = self.cfg
        Z_low, Z_high = texts if texts is not None else self.text_embeddings()
        P_low, c_low, P_high, c_high = self.patch_embeddings(bag, all_low)
        Pt_high = F.normalize(self.propagate(P_high, Z_high, c_high, "high"), dim=-1)
        Pt_low = F.normalize(self.propagate(P_low, Z_low, c_low, "low"), dim=-1)
        Zh, Zl = F.normalize(Z_high, dim=-1), F.normalize(Z_low, dim=-1)
        scale = 1.0 / cfg.tau
        if cfg.use_npcgp:
            return cross_guided_logits(Pt_high, Pt_low, Zh, Zl, cfg.K, cfg.K_top, cfg.cross_guidance, scale)
        logits = {}
        for s, Pt, Z in (("high", Pt_high, Zh), ("low", Pt_low, Zl)):
            b, _ = self.attn[s](Pt)
            protos = F.normalize(Z.reshape(cfg.K, -1, Z.shape[-1]).mean(1), dim=-1)
            logits[s] = F.normalize(b, dim=-1) @ protos.T * scale
        return LogitsTriple.from_scales(logits["high"], logits["low"])

    def loss(self, bag, texts=None):
        return mscpt_loss(self(bag, texts), bag.label, self.cfg.loss_weights)

    def predict_logits(self, bag, texts=None):
        return self(bag, texts).overall

    @torch.no_grad()
    def patch_scores(self, bag, category: int, scale: str = "high") -> np.ndarray:
        """Per-patch max similarity to category descriptions after graph tuning (all patches)."""
        cfg = self.cfg
        Z_low, Z_high = self.text_embeddings()
        P_low, c_low, P_high, c_high = self.patch_embeddings(bag, all_low=True)
        P, Z, c = (P_high, Z_high, c_high) if scale == "high" else (P_low, Z_low, c_low)
        Pt = F.normalize(self.propagate(P, Z, c, scale), dim=-1)
        block = (Pt @ F.normalize(Z, dim=-1).T).reshape(P.shape[0], cfg.K, -1)[:, category]
        return block.max(dim=1).values.numpy()


class BaselineMIL(_FrozenFeatureMixin, nn.Module):
    """Mean/max/attention pooling + linear head over frozen high-scale patch embeddings."""

    def __init__(self, vlm: ToyVLM, cfg: ModelConfig, aggregator: str = "attention",
                 names=None, templates=None, embedding_provider=None):
        super().__init__()
        self.cfg = validate_config(cfg)
        self.vlm = vlm.requires_grad_(False)
        torch.manual_seed(cfg.seed)
        self.clf = PooledClassifier(cfg.d_joint, cfg.K, aggregator).double()
        names = names or [f"category {k}" for k in range(cfg.K)]
        self._init_cache(vlm, names, cfg, templates, embedding_provider)

    def text_embeddings(self):
        return None

    def forward(self, bag, texts=None):
        return self.clf(self.frozen_view(bag).P_high)[0]

    def loss(self, bag, texts=None):
        return F.cross_entropy(self(bag)[None], torch.as_tensor([bag.label]))

    def predict_logits(self, bag, texts=None):
        return self(bag)
