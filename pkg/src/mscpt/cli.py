"""Command line: gen-data, select, train, eval, ablate, sweep-shots, heatmap."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import harness
from .core import ConfigError, ModelConfig, config_from_mapping, load_config
from .data import SyntheticSpec, dataset_hash, generate_synthetic_dataset, load_dataset, save_dataset
from .descriptions import load_description_bank, synthesize_description_bank, write_description_bank
from .encoders import ToyVLM
from .model import build_toy_vlm
from .selection import default_templates, write_template_bank

log = logging.getLogger("mscpt")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML file of ModelConfig keys")
    g = p.add_argument_group("model config overrides")
    for f in fields(ModelConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "loss_weights":
            g.add_argument(flag, type=float, nargs=3, default=None)
        elif isinstance(f.default, bool):
            g.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "on", "yes"), default=None)
        else:
            g.add_argument(flag, type=type(f.default), default=None)


def _config(args) -> ModelConfig:
    values = load_config(args.config).to_dict() if args.config else {}
    for f in fields(ModelConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return config_from_mapping(values)


def _experiment(data_dir: Path, cfg: ModelConfig) -> harness.Experiment:
    bags, world, _ = load_dataset(data_dir)
    bank = load_description_bank(data_dir / "descriptions.yaml", cfg)
    vlm_path = data_dir / "vlm.pt"
    vlm = ToyVLM.load(vlm_path) if vlm_path.exists() else build_toy_vlm(world, cfg)
    return harness.Experiment(bags, world, bank, vlm, dataset_hash(bags))


def cmd_gen_data(args):
    spec = SyntheticSpec(K=args.K, bags_per_category=args.bags_per_category, M_low=tuple(args.m_low),
                         witness_rate=args.witness_rate, context_mode=args.context_mode,
                         noise_scale=args.noise_scale, d_raw=args.d_raw, seed=args.seed)
    bags, world, _ = generate_synthetic_dataset(spec)
    out = args.out
    save_dataset(out, bags, world, spec)
    cfg = ModelConfig(K=args.K)
    write_description_bank(synthesize_description_bank(world, cfg.C_low, cfg.C_high, seed=args.seed), out / "descriptions.yaml")
    write_template_bank(default_templates(world.category_names), out / "templates.txt")
    build_toy_vlm(world, cfg).save(out / "vlm.pt")
    print(f"wrote {len(bags)} bags to {out}")


def cmd_train(args):
    cfg = _config(args)
    exp = _experiment(args.data, cfg)
    if args.seeds:
        rep = harness.run_seeds(exp, cfg, args.seeds, args.shots, n_test=args.n_test, trim=args.trim, name="train")
        path = harness.write_report(rep, args.out)
        print(json.dumps({"mean": rep.mean, "std": rep.std, "failures": rep.failures}))
        print(f"report: {path}")
        return 1 if rep.failures else 0
    split = harness.few_shot_split(exp.bags, args.shots, cfg.seed, args.n_test)
    by_id = exp.by_id()
    model = harness.make_model(exp, cfg)
    res = harness.train(model, [by_id[i] for i in split.train_ids], cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    trainable = {k: v for k, v in model.state_dict().items() if not k.startswith("vlm.")}
    torch.save({"config": cfg.to_dict(), "state": trainable, "split": [list(split.train_ids), list(split.test_ids)],
                "history": res.history, "frozen_hash": model.frozen_state_hash()}, args.out / "checkpoint.pt")
    print(f"trained {res.epochs} epochs, final loss {res.history[-1]:.4f}; checkpoint in {args.out}")
    return 0


def _load_checkpoint(path, data_dir):
    blob = torch.load(path, weights_only=False)
    cfg = config_from_mapping(blob["config"])
    exp = _experiment(data_dir, cfg)
    model = harness.make_model(exp, cfg)
    missing, unexpected = model.load_state_dict(blob["state"], strict=False)
    if unexpected or any(not k.startswith("vlm.") for k in missing):
        raise RuntimeError(f"checkpoint mismatch: missing={missing}, unexpected={unexpected}")
    if model.frozen_state_hash() != blob["frozen_hash"]:
        raise RuntimeError("frozen towers differ from the ones the checkpoint was trained with")
    return exp, model, blob


def cmd_eval(args):
    exp, model, blob = _load_checkpoint(args.checkpoint, args.data)
    by_id = exp.by_id()
    metrics = harness.evaluate(model, [by_id[i] for i in blob["split"][1]])
    print(json.dumps(metrics))
    return 0


def cmd_select(args):
    cfg = _config(args)
    exp = _experiment(args.data, cfg)
    model = harness.make_model(exp, cfg)
    bag = exp.by_id()[args.bag]
    fv = model.frozen_view(bag)
    for k, ids in enumerate(fv.ranked):
        print(f"category {k} ({exp.bank.names[k]}): {ids}")
    if args.out:
        from .selection import zero_shot_probs
        with torch.no_grad():
            probs = zero_shot_probs(exp.vlm.image(bag.low.instances), model.class_emb, cfg.tau)
        harness.emit_score_map(bag, probs[:, args.category].numpy(), args.out, scale="low")
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    exp = _experiment(args.data, cfg)
    toggles = args.preset if not args.variant else dict(v.split(":", 1) for v in args.variant)
    reports = harness.run_ablation(exp, cfg, toggles, seeds=args.seeds, shots=args.shots, n_test=args.n_test)
    path = harness.write_report(reports, args.out)
    for name, rep in reports.items():
        print(f"{name:>16}: AUC {rep.mean['auc']:.4f} ± {rep.std['auc']:.4f}  F1 {rep.mean['f1']:.4f}  ACC {rep.mean['acc']:.4f}")
    print(f"report: {path}")
    return 1 if any(r.failures for r in reports.values()) else 0


def cmd_sweep(args):
    cfg = _config(args)
    exp = _experiment(args.data, cfg)
    reports = harness.sweep_shots(exp, cfg, args.shots_list, args.seeds, args.trim, args.n_test)
    path = harness.write_report({r.name: r for r in reports.values()}, args.out)
    for s, rep in reports.items():
        print(f"{s:>3}-shot: AUC {rep.mean['auc']:.4f}  F1 {rep.mean['f1']:.4f}")
    print(f"report: {path}")
    return 1 if any(r.failures for r in reports.values()) else 0


def cmd_heatmap(args):
    if args.checkpoint:
        exp, model, _ = _load_checkpoint(args.checkpoint, args.data)
    else:
        cfg = _config(args)
        exp = _experiment(args.data, cfg)
        model = harness.make_model(exp, cfg)
    bag = exp.by_id()[args.bag]
    category = bag.label if args.category is None else args.category
    scores = model.patch_scores(bag, category, args.scale)
    harness.emit_score_map(bag, scores, args.out, scale=args.scale)
    print(f"wrote {Path(args.out).with_suffix('.png')} and .csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mscpt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset, description bank and toy VLM")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--K", type=int, default=2)
    g.add_argument("--bags-per-category", type=int, default=116)
    g.add_argument("--m-low", type=int, nargs=2, default=(32, 64))
    g.add_argument("--witness-rate", type=float, default=0.1)
    g.add_argument("--context-mode", action="store_true")
    g.add_argument("--noise-scale", type=float, default=0.6)
    g.add_argument("--d-raw", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    def common(sp, seeds=False):
        sp.add_argument("--data", type=Path, required=True)
        sp.add_argument("--shots", type=int, default=16)
        sp.add_argument("--n-test", type=int, default=None)
        if seeds:
            sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
        _add_config_flags(sp)

    t = sub.add_parser("train", help="train one seed (checkpoint) or several (report)")
    common(t)
    t.add_argument("--seeds", type=int, nargs="+", help="run split/train/eval per seed and write a report")
    t.add_argument("--trim", type=int, default=0)
    t.add_argument("--out", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("select", help="zero-shot patch selection for one bag")
    common(s)
    s.add_argument("--bag", required=True)
    s.add_argument("--category", type=int, default=0)
    s.add_argument("--out", type=Path, help="write the selection score map here")
    s.set_defaults(func=cmd_select)

    a = sub.add_parser("ablate", help="component / graph / aggregation ablations on shared splits")
    common(a, seeds=True)
    a.add_argument("--preset", choices=sorted(harness.PRESETS), default="components")
    a.add_argument("--variant", action="append", help="name:toggle,toggle (repeatable; overrides --preset)")
    a.add_argument("--out", type=Path, required=True)
    a.set_defaults(func=cmd_ablate)

    w = sub.add_parser("sweep-shots", help="fewer-shot sweep with optional best/worst trimming")
    common(w)
    w.add_argument("--shots-list", type=int, nargs="+", default=[16, 8, 4, 2, 1])
    w.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    w.add_argument("--trim", type=int, default=2)
    w.add_argument("--out", type=Path, required=True)
    w.set_defaults(func=cmd_sweep)

    h = sub.add_parser("heatmap", help="per-patch score map for one bag")
    common(h)
    h.add_argument("--bag", required=True)
    h.add_argument("--checkpoint", type=Path)
    h.add_argument("--category", type=int)
    h.add_argument("--scale", choices=("low", "high"), default="high")
    h.add_argument("--out", type=Path, required=True)
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    torch.set_num_threads(1)
    try:
        return args.func(args) or 0
    except (ConfigError, ValueError, RuntimeError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
