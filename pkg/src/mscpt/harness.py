"""Few-shot splitting, training, evaluation, multi-seed runs, ablations and score maps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from sklearn.metrics import accuracy_score, f1_score, roc_auc_score

from .core import FewShotSplit, ModelConfig, validate_config
from .model import MSCPT, BaselineMIL

log = logging.getLogger(__name__)


class ShortfallError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class MetricError(ValueError):
    pass


class AblationError(ValueError):
    pass


def few_shot_split(bags, shots: int, seed: int, n_test: Optional[int] = None) -> FewShotSplit:
    """Sample `shots` training bags per category without replacement; the rest is test."""
    by_cat: dict[int, list[str]] = {}
    for b in bags:
        by_cat.setdefault(b.label, []).append(b.bag_id)
    rng = np.random.default_rng([seed, 101])
    train = []
    for k in sorted(by_cat):
        ids = sorted(by_cat[k])
        if len(ids) < shots:
            raise ShortfallError(f"category {k} has {len(ids)} bags, {shots} shots requested")
        train.extend(ids[i] for i in sorted(rng.choice(len(ids), size=shots, replace=False)))
    chosen = set(train)
    test = sorted(b.bag_id for b in bags if b.bag_id not in chosen)
    if n_test is not None:
        test = test[:n_test] if n_test >= len(test) else sorted(rng.choice(test, size=n_test, replace=False).tolist())
    return FewShotSplit(shots, tuple(train), tuple(test), seed)


def split_hash(split: FewShotSplit) -> str:
    return hashlib.sha1(json.dumps([list(split.train_ids), list(split.test_ids)]).encode()).hexdigest()


@dataclass
class TrainResult:
    history: list  # mean training loss per epoch
    epochs: int
    steps: int
    seen_ids: set = field(default_factory=set)
    stopped_early: bool = False


def train(model, bags, cfg: ModelConfig, max_steps: Optional[int] = None, min_delta: float = 1e-4) -> TrainResult:
    """Adam, batch of one bag, early stop when the epoch training loss stops improving."""
    validate_config(cfg)
    params = model.trainable_parameters()
    if not params:
        raise TrainingError("model has no trainable parameters")
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 202])
    model.train()
    res = TrainResult([], 0, 0)
    best, wait = math.inf, 0
    for epoch in range(cfg.max_epochs):
        losses = []
        for i in rng.permutation(len(bags)):
            bag = bags[i]
            loss = model.loss(bag)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {res.steps} (bag {bag.bag_id})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            res.seen_ids.add(bag.bag_id)
            res.steps += 1
            losses.append(loss.item())
            if max_steps is not None and res.steps >= max_steps:
                break
        res.history.append(float(np.mean(losses)))
        res.epochs = epoch + 1
        if max_steps is not None and res.steps >= max_steps:
            break
        if res.history[-1] < best - min_delta:
            best, wait = res.history[-1], 0
        else:
            wait += 1
            if wait >= cfg.patience:
                res.stopped_early = True
                break
    model.eval()
    return res


def compute_metrics(labels, probs) -> dict:
    labels = np.asarray(labels)
    probs = np.asarray(probs)
    present = np.unique(labels)
    if len(present) < 2:
        raise MetricError("AUC undefined: test set holds a single category")
    K = probs.shape[1]
    if K == 2:
        auc = roc_auc_score(labels, probs[:, 1])
    else:
        auc = roc_auc_score(labels, probs, multi_class="ovr", average="macro", labels=list(range(K)))
    preds = probs.argmax(axis=1)
    return {"auc": float(auc),
            "f1": float(f1_score(labels, preds, average="macro", labels=list(range(K)), zero_division=0)),
            "acc": float(accuracy_score(labels, preds))}


@torch.no_grad()
def predict_probs(model, bags) -> np.ndarray:
    model.eval()
    texts = model.text_embeddings()
    return np.stack([model.predict_logits(b, texts).softmax(-1).numpy() for b in bags])


def evaluate(model, bags) -> dict:
    return compute_metrics([b.label for b in bags], predict_probs(model, bags))


@dataclass
class Experiment:
    """Everything a run needs besides the config: data, world, description bank and frozen VLM."""

    bags: list
    world: object
    bank: object
    vlm: object
    dataset_hash: str
    frozen_cache: dict = field(default_factory=dict)

    def by_id(self):
        return {b.bag_id: b for b in self.bags}


def make_model(exp: Experiment, cfg: ModelConfig, kind: str = "mscpt"):
    if kind == "mscpt":
        model = MSCPT(exp.vlm, exp.bank, cfg)
    elif kind.startswith("baseline-"):
        model = BaselineMIL(exp.vlm, cfg, kind.split("-", 1)[1], names=list(exp.bank.names))
    else:
        raise AblationError(f"unknown model kind {kind!r}")
    # selection and high-scale patches come from frozen towers: share across runs
    key = (cfg.n_select, cfg.tau)
    model._frozen = exp.frozen_cache.setdefault(key, {})
    return model


METRICS = ("auc", "f1", "acc")


@dataclass
class RunReport:
    name: str
    config: dict
    kind: str
    shots: int
    seeds: list
    rows: list  # one dict per seed
    mean: dict
    std: dict
    completed: int
    failures: list
    trim: int
    input_hash: str
    content_hash: str
    wall_clock: float

    def to_dict(self):
        return asdict(self)


def _hash(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def aggregate(rows, trim: int = 0):
    ok = [r for r in rows if r.get("status") == "ok"]
    if trim and len(ok) > 2 * trim:
        ok = sorted(ok, key=lambda r: (r["auc"], r["seed"]))[trim:len(ok) - trim]
    mean = {m: float(np.mean([r[m] for r in ok])) if ok else float("nan") for m in METRICS}
    std = {m: float(np.std([r[m] for r in ok])) if ok else float("nan") for m in METRICS}
    return mean, std


def run_seeds(exp: Experiment, cfg: ModelConfig, seeds: Sequence[int], shots: int = 16, kind: str = "mscpt",
              n_test: Optional[int] = None, trim: int = 0, name: str = "run",
              on_model: Optional[Callable] = None) -> RunReport:
    """split -> train -> evaluate for every seed; per-seed failures are recorded, not dropped."""
    validate_config(cfg)
    t0 = time.perf_counter()
    by_id = exp.by_id()
    rows, failures = [], []
    for seed in seeds:
        row = {"seed": int(seed)}
        try:
            split = few_shot_split(exp.bags, shots, seed, n_test)
            row["split_hash"] = split_hash(split)
            scfg = cfg.replace(seed=int(seed))
            model = make_model(exp, scfg, kind)
            train_bags = [by_id[i] for i in split.train_ids]
            test_bags = [by_id[i] for i in split.test_ids]
            res = train(model, train_bags, scfg)
            leaked = res.seen_ids & set(split.test_ids)
            if leaked:
                raise TrainingError(f"test bags used in training: {sorted(leaked)[:3]}")
            row.update(evaluate(model, test_bags))
            row.update(status="ok", epochs=res.epochs, steps=res.steps, loss_history=res.history,
                       n_train=len(train_bags), n_test=len(test_bags),
                       adjacency_calls=int(getattr(model, "counters", {}).get("adjacency", 0)))
            if on_model is not None:
                on_model(seed, model, split, res)
        except Exception as e:  # recorded and reported
            log.exception("seed %s failed", seed)
            row.update(status="failed", error=f"{type(e).__name__}: {e}")
            failures.append(int(seed))
        rows.append(row)
    mean, std = aggregate(rows, trim)
    inputs = {"config": cfg.to_dict(), "kind": kind, "shots": shots, "seeds": [int(s) for s in seeds],
              "n_test": n_test, "trim": trim, "dataset": exp.dataset_hash}
    input_hash = _hash(inputs)
    content_hash = _hash({"inputs": inputs, "rows": rows})
    return RunReport(name, cfg.to_dict(), kind, shots, [int(s) for s in seeds], rows, mean, std,
                     len(rows) - len(failures), failures, trim, input_hash, content_hash,
                     time.perf_counter() - t0)


TOGGLES = {
    "mhpt": ("use_mhpt", {"on": True, "off": False}),
    "isgpt": ("use_isgpt", {"on": True, "off": False}),
    "npcgp": ("use_npcgp", {"on": True, "off": False}),
    "cross_guidance": ("cross_guidance", {"on": True, "off": False}),
    "graph": ("graph", {"sim": "sim", "knn-coord": "knn-coord", "knn-feat": "knn-feat"}),
}
AGGREGATORS = ("baseline-mean", "baseline-max", "baseline-attention")


def parse_toggles(spec: str | Iterable[str]) -> dict:
    """'mhpt=off,graph=knn-coord' -> ModelConfig overrides. `aggregator=baseline-mean` selects a baseline."""
    items = [s for s in (spec.split(",") if isinstance(spec, str) else spec) if s.strip()]
    out = {}
    for item in items:
        key, _, value = item.strip().partition("=")
        if key == "aggregator":
            if value not in AGGREGATORS:
                raise AblationError(f"unknown aggregator {value!r}")
            out["_kind"] = value
            continue
        if key not in TOGGLES or value not in TOGGLES[key][1]:
            raise AblationError(f"unknown toggle {item!r}")
        field_name, values = TOGGLES[key]
        out[field_name] = values[value]
    return out


PRESETS = {
    "components": {
        "baseline": "mhpt=off,isgpt=off,npcgp=off",
        "+mhpt": "isgpt=off,npcgp=off",
        "+mhpt+isgpt": "npcgp=off",
        "+mhpt+npcgp": "isgpt=off",
        "full": "",
    },
    "graph": {"sim": "graph=sim", "knn-coord": "graph=knn-coord", "knn-feat": "graph=knn-feat"},
    "aggregation": {
        "mean": "aggregator=baseline-mean", "max": "aggregator=baseline-max",
        "attention": "aggregator=baseline-attention", "npcgp-no-cross": "cross_guidance=off", "npcgp": "",
    },
    "isgpt": {"isgpt-on": "", "isgpt-off": "isgpt=off"},
}


def run_ablation(exp: Experiment, cfg: ModelConfig, toggles: Mapping[str, str] | str, seeds=(0, 1, 2, 3, 4),
                 shots: int = 16, n_test: Optional[int] = None) -> dict:
    """One RunReport per variant, all on identical splits."""
    variants = PRESETS[toggles] if isinstance(toggles, str) else dict(toggles)
    parsed = {name: parse_toggles(spec) for name, spec in variants.items()}
    reports = {}
    for name, over in parsed.items():
        kind = over.pop("_kind", "mscpt")
        reports[name] = run_seeds(exp, cfg.replace(**over), seeds, shots, kind, n_test, name=name)
    return reports


def sweep_shots(exp: Experiment, cfg: ModelConfig, shots_list=(16, 8, 4, 2, 1), seeds=tuple(range(10)),
                trim: int = 2, n_test: Optional[int] = None) -> dict:
    """Fewer-shot sweep; `trim` drops that many best and worst seeds (by AUC) before averaging."""
    return {s: run_seeds(exp, cfg, seeds, s, n_test=n_test, trim=trim, name=f"{s}-shot") for s in shots_list}


def score_raster(coords, scores) -> np.ndarray:
    """Grid raster of min-max normalised scores; cells without a patch are NaN."""
    coords = np.asarray(coords, dtype=int)
    scores = np.asarray(scores, dtype=float)
    if len(coords) != len(scores):
        raise ValueError(f"{len(scores)} scores for {len(coords)} patches")
    lo, hi = scores.min(), scores.max()
    norm = np.full_like(scores, 0.5) if hi == lo else (scores - lo) / (hi - lo)
    shape = coords.max(axis=0) + 1
    raster = np.full(tuple(shape), np.nan)
    raster[coords[:, 0], coords[:, 1]] = norm
    return raster


def emit_score_map(bag, scores, out_path, scale: str = "high", cell: int = 8) -> np.ndarray:
    """Write <out>.png (colour raster) and <out>.csv (row, col, score); returns the raster."""
    from matplotlib import colormaps
    from PIL import Image

    coords = bag.scale_views[scale].coords
    raster = score_raster(coords, scores)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rgba = colormaps["viridis"](np.nan_to_num(raster, nan=0.0))
    rgba[np.isnan(raster)] = (1.0, 1.0, 1.0, 1.0)
    img = (rgba[..., :3] * 255).round().astype(np.uint8).repeat(cell, 0).repeat(cell, 1)
    Image.fromarray(img).save(out_path.with_suffix(".png"))
    with open(out_path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "score"])
        for (r, c), s in zip(coords.tolist(), np.asarray(scores, dtype=float).tolist()):
            w.writerow([r, c, repr(s)])
    return raster


def write_report(reports: Mapping[str, RunReport] | RunReport, out_dir) -> Path:
    """CSV of per-seed rows plus a JSON run manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(reports, RunReport):
        reports = {reports.name: reports}
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "status", *METRICS, "epochs", "split_hash"])
        for name, rep in reports.items():
            for r in rep.rows:
                w.writerow([name, r["seed"], r["status"], *(r.get(m, "") for m in METRICS),
                            r.get("epochs", ""), r.get("split_hash", "")])
            w.writerow([name, "mean", "", *(rep.mean[m] for m in METRICS), "", ""])
            w.writerow([name, "std", "", *(rep.std[m] for m in METRICS), "", ""])
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=1, default=str))
    return path
