"""Synthetic two-scale bags, the toy concept world behind them, and persistence.

Every instance is a noisy copy of a concept prototype (a unit vector in raw
feature space). Witness concepts belong to categories; background concepts are
shared. Captions and descriptions name concepts by word, so a contrastively
pre-trained toy VLM can tie the words to the prototypes.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .core import Bag, ScaleView
from .encoders import CACHE_DTYPE, CACHE_FORMAT, CACHE_VERSION, MANIFEST_NAME

CONCEPT_WORDS = [
    "acinar", "lepidic", "papillary", "solid", "keratin", "bridges", "nested", "clear",
    "mucin", "necrosis", "stroma", "fat", "vessel", "lymphoid", "fibrosis", "debris",
    "nucleoli", "mitoses", "pleomorphic", "vacuolated", "granular", "spindle", "signet", "comedo",
    "tubular", "lobular", "ductal", "cribriform", "trabecular", "alveolar", "squamous", "basaloid",
    "hemorrhage", "calcified", "hyaline", "myxoid", "cystic", "foamy", "plasmacytoid", "rhabdoid",
]
FILLER_PATTERNS = [
    "tissue showing {}", "region with {} cells", "{} pattern observed", "presence of {}",
    "areas of {} morphology", "{} features seen", "cells arranged with {}", "focal {} change",
    "prominent {} appearance", "scattered {} structures", "{} architecture", "sheets of {}",
]
MODIFIERS = ["focal", "diffuse", "marked", "mild", "extensive", "patchy"]
TEMPLATE_PREFIXES = ["an image of", "a photo of", "a patch showing", "a histology image of",
                     "an h and e image of", "a slide region with", "a microscopy view of",
                     "tissue with", "a tile of", "an example of"]
TEMPLATE_SUFFIXES = ["", "tissue", "cancer", "tumor", "pattern"]


@dataclass(frozen=True)
class SyntheticSpec:
    K: int = 2
    bags_per_category: int = 116
    M_low: tuple = (32, 64)
    subdiv: int = 2  # each low cell holds subdiv**2 high patches
    d_raw: int = 32
    witness_rate: float = 0.1
    context_mode: bool = False
    noise_scale: float = 0.6
    grid_size: int = 10
    concepts_per_scale: int = 2
    background_per_scale: int = 3
    seed: int = 0

    @property
    def M_high(self) -> tuple:
        f = self.subdiv ** 2
        return (self.M_low[0] * f, self.M_low[1] * f)

    def validate(self):
        if not 0 < self.witness_rate <= 1:
            raise ValueError(f"witness_rate must be in (0, 1], got {self.witness_rate}")
        if self.K < 2 or self.bags_per_category < 1 or self.subdiv < 1:
            raise ValueError("need K >= 2, bags_per_category >= 1, subdiv >= 1")
        lo, hi = self.M_low
        if not 1 <= lo <= hi <= self.grid_size ** 2:
            raise ValueError(f"M_low range {self.M_low} infeasible on a {self.grid_size}x{self.grid_size} grid")
        if self.context_mode and (self.K != 2 or self.concepts_per_scale != 2):
            raise ValueError("context mode is defined for K=2 with two witness types per category and scale")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        return self


@dataclass
class ConceptWorld:
    """Concept vocabulary and prototypes shared by data, descriptions and the toy VLM."""

    names: list
    prototypes: np.ndarray  # (n_concepts, d_raw), unit rows
    witness: dict  # (category, scale) -> list of concept indices
    background: dict  # scale -> list of concept indices
    category_names: list
    context_mode: bool = False

    @classmethod
    def build(cls, spec: SyntheticSpec) -> "ConceptWorld":
        rng = np.random.default_rng([spec.seed, 7])
        n = 2 * spec.K * spec.concepts_per_scale + 2 * spec.background_per_scale
        names = CONCEPT_WORDS[:n] + [f"concept{i}" for i in range(len(CONCEPT_WORDS), n)]
        protos = rng.standard_normal((n, spec.d_raw))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        it = iter(range(n))
        witness = {(k, s): [next(it) for _ in range(spec.concepts_per_scale)]
                   for k in range(spec.K) for s in ("low", "high")}
        background = {s: [next(it) for _ in range(spec.background_per_scale)] for s in ("low", "high")}
        cat_names = [" ".join(names[i] for i in witness[(k, "low")]) for k in range(spec.K)]
        return cls(names, protos, witness, background, cat_names, spec.context_mode)

    def contexts(self, k: int, scale: str) -> list:
        """The two concept pairs whose co-occurrence marks category k (context mode).

        With witness types a0, b0 (category 0) and a1, b1 (category 1), category 0
        is (a0, b0) or (a1, b1) and category 1 is (a0, a1) or (b0, b1): an XOR
        that no per-concept score pooled by max or mean can separate.
        """
        (a0, b0), (a1, b1) = self.witness[(0, scale)], self.witness[(1, scale)]
        return [[(a0, b0), (a1, b1)], [(a0, a1), (b0, b1)]][k]

    def words(self, idx) -> str:
        return " ".join(self.names[i] for i in idx)

    def mixture(self, idx) -> np.ndarray:
        v = self.prototypes[list(idx)].sum(0)
        return v / np.linalg.norm(v)

    def vocabulary(self) -> list[str]:
        return list(self.names) + FILLER_PATTERNS + MODIFIERS + TEMPLATE_PREFIXES + TEMPLATE_SUFFIXES

    def caption_pairs(self, rng: np.random.Generator, n: int):
        """Pretraining pairs: a caption naming one or two concepts, a noisy feature
        and the concept set as a string key (captions differing only in filler match)."""
        n_c, d = self.prototypes.shape
        two = rng.random(n) < 0.5
        first = rng.integers(n_c, size=n)
        second = (first + rng.integers(1, n_c, size=n)) % n_c
        patterns = rng.integers(len(FILLER_PATTERNS), size=n)
        mods = np.where(rng.random(n) < 0.3, rng.integers(len(MODIFIERS), size=n), -1)
        noise = rng.uniform(0.0, 1.0, size=(n, 1)) * rng.standard_normal((n, d)) / np.sqrt(d)
        mix = self.prototypes[first] + two[:, None] * self.prototypes[second]
        feats = mix / np.linalg.norm(mix, axis=1, keepdims=True) + noise
        texts, keys = [], []
        for i in range(n):
            idx = [int(first[i]), int(second[i])] if two[i] else [int(first[i])]
            text = FILLER_PATTERNS[patterns[i]].format(self.words(idx))
            texts.append(f"{MODIFIERS[mods[i]]} {text}" if mods[i] >= 0 else text)
            keys.append(",".join(map(str, sorted(idx))))
        return texts, feats[:, None, :], keys

    def to_dict(self) -> dict:
        return {"names": self.names, "prototypes": self.prototypes.tolist(),
                "witness": [[k, s, v] for (k, s), v in self.witness.items()],
                "background": self.background, "category_names": self.category_names,
                "context_mode": self.context_mode}

    @classmethod
    def from_dict(cls, d) -> "ConceptWorld":
        return cls(d["names"], np.asarray(d["prototypes"]), {(k, s): v for k, s, v in d["witness"]},
                   d["background"], d["category_names"], d["context_mode"])


class InfeasibleSpecError(ValueError):
    pass


def _features(world, rng, concept_idx, noise_scale):
    d = world.prototypes.shape[1]
    base = world.prototypes[concept_idx]
    return base + noise_scale * rng.standard_normal((len(concept_idx), d)) / np.sqrt(d)


def _make_bag(spec, world, rng, k, bag_id):
    g = spec.grid_size
    m_low = int(rng.integers(spec.M_low[0], spec.M_low[1] + 1))
    cells = rng.choice(g * g, size=m_low, replace=False)
    coords_low = np.stack([cells // g, cells % g], axis=1)

    # context mode needs room for both members of a pair
    n_wl = min(m_low, max(2 if spec.context_mode else 1, int(round(spec.witness_rate * m_low))))
    if n_wl < 1:
        raise InfeasibleSpecError(f"bag {bag_id}: no witness instance")
    wl_cells = rng.choice(m_low, size=n_wl, replace=False)

    low_concepts = np.array([world.background["low"][i] for i in rng.integers(len(world.background["low"]), size=m_low)])
    low_labels = np.zeros(m_low, dtype=np.int64)
    context = int(rng.integers(2))
    low_kind = _assign_witness_types(spec, world, rng, k, "low", n_wl, context)
    low_concepts[wl_cells] = [c for c, _ in low_kind]
    low_labels[wl_cells] = [pos for _, pos in low_kind]

    f = spec.subdiv
    sub = np.array([(i, j) for i in range(f) for j in range(f)])
    coords_high = (coords_low[:, None, :] * f + sub[None]).reshape(-1, 2)
    parent = np.repeat(np.arange(m_low), f * f)
    m_high = len(coords_high)
    capacity = np.flatnonzero(np.isin(parent, wl_cells))
    n_wh = min(len(capacity), max(1, int(round(spec.witness_rate * m_high))))
    wh = rng.choice(capacity, size=n_wh, replace=False)

    high_concepts = np.array([world.background["high"][i] for i in rng.integers(len(world.background["high"]), size=m_high)])
    high_labels = np.zeros(m_high, dtype=np.int64)
    if spec.context_mode:
        # a high witness takes the pair slot of its low region, so each region shows one
        # type and the two co-occurring types sit in different regions
        slot = {c: world.contexts(k, "low")[context].index(int(low_concepts[c])) for c in wl_cells}
        pair = world.contexts(k, "high")[context]
        pos = int(spec.K == 2 and k == 1)
        high_kind = [(pair[slot[parent[i]]], pos) for i in wh]
    else:
        high_kind = _assign_witness_types(spec, world, rng, k, "high", n_wh, context)
    high_concepts[wh] = [c for c, _ in high_kind]
    high_labels[wh] = [pos for _, pos in high_kind]

    views = {
        "low": ScaleView(_features(world, rng, low_concepts, spec.noise_scale), coords_low,
                         low_labels if spec.K == 2 else None),
        "high": ScaleView(_features(world, rng, high_concepts, spec.noise_scale), coords_high,
                          high_labels if spec.K == 2 else None),
    }
    truth = {"low_concepts": low_concepts, "high_concepts": high_concepts}
    return Bag(bag_id, k, views, num_classes=spec.K), truth


def _assign_witness_types(spec, world, rng, k, scale, n, context=0):
    """Return n (concept, is_positive_evidence) pairs for a category-k bag.

    Context mode: the bag holds one of its category's two concept pairs
    (`context` picks which), half of the witnesses of each type. Every concept
    appears equally often in bags of both categories; only which concepts
    co-occur decides the label.
    """
    positive = int(spec.K == 2 and k == 1)
    if not spec.context_mode:
        own = world.witness[(k, scale)]
        return [(own[i], positive) for i in rng.integers(len(own), size=n)]
    pair = world.contexts(k, scale)[context]
    start = int(rng.integers(2))  # which member gets the extra one when n is odd
    kinds = [(pair[(i + start) % 2], positive) for i in range(n)]
    return [kinds[i] for i in rng.permutation(n)]


def generate_synthetic_dataset(spec: SyntheticSpec):
    """Return (bags, world, truth) deterministically from spec.seed.

    truth maps bag_id -> per-scale concept indices (ground truth for heatmaps).
    """
    spec.validate()
    world = ConceptWorld.build(spec)
    rng = np.random.default_rng([spec.seed, 11])
    bags, truth = [], {}
    for k in range(spec.K):
        for b in range(spec.bags_per_category):
            bag_id = f"c{k}_b{b:04d}"
            bag, t = _make_bag(spec, world, rng, k, bag_id)
            bags.append(bag)
            truth[bag_id] = t
    return bags, world, truth


def dataset_hash(bags) -> str:
    h = hashlib.sha1()
    for bag in sorted(bags, key=lambda b: b.bag_id):
        h.update(f"{bag.bag_id}:{bag.label}".encode())
        for s in sorted(bag.scale_views):
            v = bag.scale_views[s]
            h.update(np.ascontiguousarray(v.instances, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(v.coords, dtype="<i8").tobytes())
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_embedding_cache(matrices: Mapping, directory, row_ids: Optional[Mapping] = None) -> Path:
    """Write {(bag_id, scale): (M, d) array} as little-endian float32 payloads plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ((bag_id, scale), mat) in enumerate(sorted(matrices.items())):
        arr = np.ascontiguousarray(np.asarray(mat), dtype=CACHE_DTYPE)
        if arr.ndim != 2:
            raise ValueError(f"{bag_id}/{scale}: expected a 2-d matrix, got shape {arr.shape}")
        ids = list((row_ids or {}).get((bag_id, scale), range(arr.shape[0])))
        if len(ids) != arr.shape[0]:
            raise ValueError(f"{bag_id}/{scale}: {len(ids)} row ids for {arr.shape[0]} rows")
        fname = f"emb_{i:05d}.bin"
        _atomic_write(directory / fname, arr.tobytes())
        entries.append({"bag_id": bag_id, "scale": scale, "file": fname, "shape": list(arr.shape),
                        "row_ids": [int(r) if isinstance(r, (int, np.integer)) else r for r in ids]})
    manifest = {"format": CACHE_FORMAT, "version": CACHE_VERSION, "dtype": CACHE_DTYPE, "entries": entries}
    path = directory / MANIFEST_NAME
    _atomic_write(path, json.dumps(manifest, indent=1).encode())
    return path


DATASET_FORMAT = "mscpt-synthetic-dataset"


def save_dataset(directory, bags, world: ConceptWorld, spec: SyntheticSpec) -> Path:
    """Directory layout: manifest.json + bags/<bag_id>.npz (one payload per bag)."""
    directory = Path(directory)
    (directory / "bags").mkdir(parents=True, exist_ok=True)
    records = []
    for bag in bags:
        arrays = {}
        for s, v in bag.scale_views.items():
            arrays[f"{s}_instances"] = v.instances
            arrays[f"{s}_coords"] = v.coords
            if v.instance_labels is not None:
                arrays[f"{s}_labels"] = v.instance_labels
        fname = f"bags/{bag.bag_id}.npz"
        with tempfile.NamedTemporaryFile(dir=directory / "bags", suffix=".npz", delete=False) as fh:
            np.savez(fh, **arrays)
        os.replace(fh.name, directory / fname)
        records.append({"bag_id": bag.bag_id, "label": bag.label, "file": fname})
    spec_d = asdict(spec)
    spec_d["M_low"] = list(spec.M_low)
    manifest = {"format": DATASET_FORMAT, "version": 1, "spec": spec_d, "world": world.to_dict(),
                "hash": dataset_hash(bags), "bags": records}
    path = directory / "manifest.json"
    _atomic_write(path, json.dumps(manifest).encode())
    return path


def load_dataset(directory):
    directory = Path(directory)
    meta = json.loads((directory / "manifest.json").read_text())
    if meta.get("format") != DATASET_FORMAT:
        raise ValueError(f"{directory}: not a synthetic dataset directory")
    spec_d = dict(meta["spec"])
    spec_d["M_low"] = tuple(spec_d["M_low"])
    spec = SyntheticSpec(**spec_d)
    bags = []
    for rec in meta["bags"]:
        with np.load(directory / rec["file"]) as z:
            views = {s: ScaleView(z[f"{s}_instances"], z[f"{s}_coords"],
                                  z[f"{s}_labels"] if f"{s}_labels" in z else None)
                     for s in ("low", "high") if f"{s}_instances" in z}
        bags.append(Bag(rec["bag_id"], rec["label"], views, num_classes=spec.K))
    if dataset_hash(bags) != meta["hash"]:
        raise ValueError(f"{directory}: payload hash does not match manifest")
    return bags, ConceptWorld.from_dict(meta["world"]), spec
