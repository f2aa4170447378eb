"""Command-line entry points for the experiment pipeline.

Subcommands: synth-data, train-embedding, extract-features,
train-classifier, evaluate, sweep, ablate-losses, report. The environment
variable ``TRJ_SEED`` overrides the configured seed everywhere.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .classify import classifier_hidden_sizes, extract_features, \
    mean_average_precision, train_classifier, FrameFeatures
from .data import load_cache, normalize_dataset, ingest_pose_file, save_cache, \
    split_by_source, dataset_labels
from .experiment import DEFAULT_FRACTIONS, ExperimentConfig, emit_report, \
    run_ablation, run_experiment, sweep_stage, prepare_data, fit_discretizers, \
    train_stage, _load_sweep
from .programs import ProgramSet, resolve_programs
from .synth import SyntheticSpec, generate_synthetic_dataset
from .train import train_embedding
from .tvae import TvaeModel


def _seed(value: int) -> int:
    env = os.environ.get("TRJ_SEED")
    return int(env) if env else value


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_json(Path(args.config).read_text())
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for name in ("seed", "steps", "latent_dim", "hidden_dim", "batch_size",
                 "learning_rate", "window_length"):
        v = getattr(args, name.replace("-", "_"), None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "programs", None):
        overrides["programs"] = tuple(args.programs.split(","))
    if getattr(args, "fractions", None):
        overrides["fractions"] = tuple(float(f) for f
                                       in args.fractions.split(","))
    loss = dict(cfg.loss)
    if getattr(args, "losses", None):
        loss["enabled"] = tuple(args.losses.split(","))
    if getattr(args, "weights", None):
        wc, wcn, wd = (float(w) for w in args.weights.split(","))
        loss.update(weight_consistency=wc, weight_contrastive=wcn,
                    weight_decoding=wd)
    if getattr(args, "temperature", None) is not None:
        loss["temperature"] = args.temperature
    if getattr(args, "augment", None):
        loss["augmentation"] = args.augment == "on"
    if getattr(args, "noise_sigma", None) is not None:
        loss["noise_sigma"] = args.noise_sigma
    if getattr(args, "aug_kinds", None):
        pass  # kinds are applied at sampling time via the loss domain policy
    if loss:
        overrides["loss"] = loss
    if getattr(args, "features", None) or getattr(args, "embedding", None):
        base = getattr(args, "features", None) or "keypoints"
        sets = [(base, base, False)]
        if getattr(args, "embedding", "on") != "off":
            sets.append((f"{base}+embedding", base, True))
        overrides["feature_sets"] = tuple(sets)
    cfg = ExperimentConfig(**{**asdict(cfg), **overrides})
    return ExperimentConfig(**{**asdict(cfg), "seed": _seed(cfg.seed)})


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="experiment config JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/exp", help="artifact directory")


def cmd_synth_data(args):
    cfg = _load_config(args)
    spec = SyntheticSpec(**cfg.synthetic)
    rng = np.random.default_rng(cfg.seed)
    dataset = generate_synthetic_dataset(spec, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cache(dataset, out / "synthetic.trj")
    print(f"wrote {dataset.total_frames} frames across "
          f"{len(dataset.trajectories)} trajectories to {out / 'synthetic.trj'}")


def cmd_train_embedding(args):
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = prepare_data(cfg, out)
    ps = fit_discretizers(cfg, out, splits["train"])
    train_stage(cfg, out, splits["train"], ps)
    print(f"embedding checkpoint written to {out / 'embedding.ckpt'}")


def cmd_extract_features(args):
    cfg = _load_config(args)
    out = Path(args.out)
    splits = prepare_data(cfg, out)
    ps = fit_discretizers(cfg, out, splits["train"])
    model = TvaeModel.load(out / "embedding.ckpt")
    base = args.features or "keypoints"
    emb = args.embedding != "off"
    for tag, d in splits.items():
        feats = extract_features(model if emb else None, d, base=base, ps=ps,
                                 include_embedding=emb)
        path = out / f"features_{tag}.npz"
        np.savez(path, features=feats.features, labels=feats.labels)
        print(f"{tag}: {feats.features.shape} -> {path}")


def cmd_train_classifier(args):
    cfg = _load_config(args)
    out = Path(args.out)
    feats = {}
    for tag in ("train", "val"):
        data = np.load(out / f"features_{tag}.npz")
        feats[tag] = FrameFeatures(data["features"], data["labels"])
    labels = feats["train"].labels
    num_classes = int(labels[labels >= 0].max()) + 1
    rng = np.random.default_rng(cfg.seed)
    model, (mean, std), history = train_classifier(
        feats["train"], feats["val"], num_classes,
        classifier_hidden_sizes(1.0), rng, **cfg.classifier)
    for epoch, loss, val_map in history:
        print(f"epoch {epoch}: loss {loss:.4f} val MAP {val_map:.4f}")


def cmd_evaluate(args):
    cfg = _load_config(args)
    result = run_experiment(cfg, args.out)
    for fraction, fs, m, s, n in result.summary():
        print(f"fraction {fraction:g} {fs}: MAP {m:.4f} +/- {s:.4f} ({n} runs)")


def cmd_sweep(args):
    cmd_evaluate(args)


def cmd_ablate_losses(args):
    cfg = _load_config(args)
    fractions = cfg.fractions if getattr(args, "fractions", None) \
        else (0.1, 0.5, 1.0)
    path = run_ablation(cfg, args.out, fractions=fractions)
    print(f"ablation grid written to {path}")


def cmd_report(args):
    cfg = _load_config(args)
    out = Path(args.out)
    result = _load_sweep(out / "sweep.csv")
    emit_report(cfg, out, result)
    print(f"report written to {out / 'report.csv'} and {out / 'plot_data.csv'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajrep",
        description="trajectory representation learning and evaluation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    specs = [
        ("synth-data", cmd_synth_data, []),
        ("train-embedding", cmd_train_embedding,
         ["training", "loss", "programs"]),
        ("extract-features", cmd_extract_features, ["features", "programs"]),
        ("train-classifier", cmd_train_classifier, []),
        ("evaluate", cmd_evaluate,
         ["training", "loss", "programs", "features", "eval"]),
        ("sweep", cmd_sweep,
         ["training", "loss", "programs", "features", "eval"]),
        ("ablate-losses", cmd_ablate_losses, ["training", "programs", "eval"]),
        ("report", cmd_report, []),
    ]
    for name, fn, groups in specs:
        p = sub.add_parser(name)
        _add_common(p)
        if "training" in groups:
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--latent-dim", type=int, default=None)
            p.add_argument("--hidden", dest="hidden_dim", type=int,
                           default=None)
            p.add_argument("--batch", dest="batch_size", type=int,
                           default=None)
            p.add_argument("--lr", dest="learning_rate", type=float,
                           default=None)
        if "loss" in groups:
            p.add_argument("--losses", default=None,
                           help="comma list: tvae,contrastive,consistency,"
                                "decoding")
            p.add_argument("--weights", default=None,
                           help="consistency,contrastive,decoding weights")
            p.add_argument("--temperature", type=float, default=None)
            p.add_argument("--augment", choices=("on", "off"), default=None)
            p.add_argument("--noise-sigma", dest="noise_sigma", type=float,
                           default=None)
            p.add_argument("--aug-kinds", dest="aug_kinds", default=None)
        if "programs" in groups:
            p.add_argument("--programs", default=None,
                           help="comma list of ids or all_mouse / all_fly")
        if "features" in groups:
            p.add_argument("--features",
                           choices=("keypoints", "handcrafted", "both"),
                           default=None)
            p.add_argument("--embedding", choices=("on", "off"), default="on")
        if "eval" in groups:
            p.add_argument("--fractions", default=None,
                           help="comma list of training fractions")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main(sys.argv[1:])
