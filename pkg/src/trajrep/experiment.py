"""Configuration-driven experiment pipeline with stage checkpointing.

Pipeline stages: data -> discretizers -> embedding -> sweep -> report.
Each stage writes its artifacts plus a marker file carrying the config
hash; re-running with the same config skips completed stages. Every
emitted CSV starts with a comment line carrying the config hash and the
code version so artifacts are traceable.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .classify import SweepResult, SweepCell, run_fraction_sweep
from .data import Dataset, load_cache, normalize_dataset, ingest_pose_file, \
    save_cache, split_by_source
from .losses import LossConfig
from .programs import Discretizer, ProgramSet, resolve_programs
from .synth import SyntheticSpec, generate_synthetic_dataset
from .train import train_embedding
from .tvae import TvaeModel

DEFAULT_FRACTIONS = (0.01, 0.02, 0.05, 0.10, 0.25, 0.50, 0.75, 1.00)

ABLATION_GRID = [
    ("tvae", ("tvae",), "program"),
    ("tvae+unsup_contrastive", ("tvae", "contrastive"), "unsupervised"),
    ("tvae+consistency", ("tvae", "consistency"), "program"),
    ("tvae+contrastive", ("tvae", "contrastive"), "program"),
    ("tvae+decoding", ("tvae", "decoding"), "program"),
    ("tvae+contrastive+consistency",
     ("tvae", "contrastive", "consistency"), "program"),
    ("tvae+decoding+consistency",
     ("tvae", "decoding", "consistency"), "program"),
    ("tvae+contrastive+decoding",
     ("tvae", "contrastive", "decoding"), "program"),
    ("tvae+contrastive+decoding+consistency",
     ("tvae", "contrastive", "decoding", "consistency"), "program"),
    ("unsup_contrastive", ("contrastive",), "unsupervised"),
]


class StageFailure(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run; fully JSON-serializable."""

    seed: int = 0
    # data: either CSV paths or the synthetic generator
    train_path: str | None = None
    image_dims: tuple = (1.0, 1.0)
    synthetic: dict = field(default_factory=dict)
    split_fractions: tuple = (0.7, 0.15, 0.15)
    # programs and losses
    programs: tuple = ("all_mouse",)
    loss: dict = field(default_factory=dict)
    # embedding hyperparameters
    window_length: int = 21
    latent_dim: int = 32
    hidden_dim: int = 256
    batch_size: int = 128
    learning_rate: float = 2e-4
    steps: int = 2000
    # evaluation
    fractions: tuple = DEFAULT_FRACTIONS
    feature_sets: tuple = (("keypoints", "keypoints", False),
                           ("keypoints+embedding", "keypoints", True))
    selections: int = 3
    runs_per_selection: int = 3
    classifier: dict = field(default_factory=dict)

    def loss_config(self) -> LossConfig:
        return LossConfig(**{"enabled": ("tvae", "contrastive", "consistency"),
                             **self.loss})

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.synthetic)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        for key in ("image_dims", "split_fractions", "programs", "fractions"):
            if key in raw and isinstance(raw[key], list):
                raw[key] = tuple(raw[key])
        if "feature_sets" in raw:
            raw["feature_sets"] = tuple(tuple(fs) for fs in raw["feature_sets"])
        if "loss" in raw and "enabled" in raw.get("loss", {}):
            raw["loss"]["enabled"] = tuple(raw["loss"]["enabled"])
        return cls(**raw)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _artifact_header(cfg: ExperimentConfig) -> str:
    return f"# config_hash={cfg.config_hash} version={__version__}"


def write_csv(path, header_comment: str, columns, rows):
    with Path(path).open("w", newline="") as f:
        f.write(header_comment + "\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows(rows)


def read_csv(path):
    """Read one of our CSVs back: (comment, columns, rows of strings)."""
    with Path(path).open(newline="") as f:
        comment = f.readline().rstrip("\n")
        reader = csv.reader(f)
        columns = next(reader)
        rows = [row for row in reader]
    return comment, columns, rows


def _stage_marker(outdir: Path, stage: str) -> Path:
    return outdir / f"stage_{stage}.json"


def _stage_done(outdir: Path, stage: str, cfg: ExperimentConfig) -> bool:
    marker = _stage_marker(outdir, stage)
    if not marker.exists():
        return False
    try:
        return json.loads(marker.read_text())["config_hash"] == cfg.config_hash
    except (json.JSONDecodeError, KeyError):
        return False


def _mark_stage(outdir: Path, stage: str, cfg: ExperimentConfig, **extra):
    _stage_marker(outdir, stage).write_text(json.dumps(
        {"stage": stage, "config_hash": cfg.config_hash,
         "version": __version__, **extra}, sort_keys=True))


def _record_failure(outdir: Path, stage: str, cfg: ExperimentConfig,
                    err: Exception):
    (outdir / "failure.json").write_text(json.dumps(
        {"stage": stage, "config_hash": cfg.config_hash,
         "error": f"{type(err).__name__}: {err}"}, sort_keys=True))


def prepare_data(cfg: ExperimentConfig, outdir: Path):
    """Generate or ingest, normalize, and split; cached per config hash."""
    paths = {tag: outdir / f"data_{tag}.trj" for tag in ("train", "val", "test")}
    if _stage_done(outdir, "data", cfg):
        return {tag: load_cache(p) for tag, p in paths.items()}
    rng = np.random.default_rng(cfg.seed)
    if cfg.train_path:
        full = ingest_pose_file(cfg.train_path, cfg.image_dims)
        full = normalize_dataset(full)
    else:
        full = generate_synthetic_dataset(cfg.synthetic_spec(), rng)
    train, val, test = split_by_source(full, cfg.split_fractions, rng)
    if val is None or test is None:
        raise StageFailure("not enough trajectories to split train/val/test")
    splits = {"train": train, "val": val, "test": test}
    for tag, d in splits.items():
        save_cache(d, paths[tag])
    _mark_stage(outdir, "data", cfg)
    return splits


def fit_discretizers(cfg: ExperimentConfig, outdir: Path,
                     train: Dataset) -> ProgramSet:
    ps = ProgramSet(resolve_programs(list(cfg.programs)))
    path = outdir / "discretizers.json"
    if _stage_done(outdir, "discretizers", cfg):
        raw = json.loads(path.read_text())
        ps.discretizers = {k: Discretizer(*v) for k, v in raw.items()}
        return ps
    ps.fit(train, cfg.window_length)
    path.write_text(json.dumps(
        {k: (d.t1, d.t2) for k, d in ps.discretizers.items()}, sort_keys=True))
    _mark_stage(outdir, "discretizers", cfg)
    return ps


def train_stage(cfg: ExperimentConfig, outdir: Path, train: Dataset,
                ps: ProgramSet):
    ckpt = outdir / "embedding.ckpt"
    if _stage_done(outdir, "embedding", cfg):
        return TvaeModel.load(ckpt)
    model, heads, log = train_embedding(
        train, ps, cfg.loss_config(), seed=cfg.seed,
        window_length=cfg.window_length, latent_dim=cfg.latent_dim,
        hidden_dim=cfg.hidden_dim, batch_size=cfg.batch_size,
        lr=cfg.learning_rate, steps=cfg.steps)
    model.save(ckpt)
    keys = sorted({k for c in log.components for k in c})
    write_csv(outdir / "training_log.csv", _artifact_header(cfg),
              ["step"] + keys,
              [[s] + [format(c.get(k, ""), ".10g") if k in c else ""
                      for k in keys]
               for s, c in zip(log.steps, log.components)])
    _mark_stage(outdir, "embedding", cfg)
    return model


def sweep_stage(cfg: ExperimentConfig, outdir: Path, model, splits,
                ps: ProgramSet) -> SweepResult:
    path = outdir / "sweep.csv"
    if _stage_done(outdir, "sweep", cfg):
        return _load_sweep(path)
    result = run_fraction_sweep(
        model, splits["train"], splits["val"], splits["test"],
        cfg.fractions, cfg.feature_sets, ps=ps,
        selections=cfg.selections, runs_per_selection=cfg.runs_per_selection,
        global_seed=cfg.seed, classifier_kwargs=dict(cfg.classifier))
    rows = []
    for c in result.cells:
        ap = ";".join(f"{cls}:{v:.10g}" for cls, v in sorted(
            c.per_class_ap.items()))
        rows.append([format(c.fraction, ".6g"), c.feature_set, c.seed,
                     format(c.map_value, ".10g"), ap])
    write_csv(path, _artifact_header(cfg),
              ["fraction", "feature_set", "seed", "map", "per_class_ap"], rows)
    _mark_stage(outdir, "sweep", cfg)
    return result


def _load_sweep(path) -> SweepResult:
    _, _, rows = read_csv(path)
    result = SweepResult()
    for fraction, fs, seed, map_value, ap in rows:
        per_class = {}
        if ap:
            for part in ap.split(";"):
                k, v = part.split(":")
                per_class[int(k)] = float(v)
        result.cells.append(SweepCell(float(fraction), fs, int(seed),
                                      float(map_value), per_class))
    return result


def emit_report(cfg: ExperimentConfig, outdir: Path, result: SweepResult):
    """Summary CSV plus a long-format plot-data file (error = 1 - MAP)."""
    summary = result.summary()
    write_csv(outdir / "report.csv", _artifact_header(cfg),
              ["fraction", "feature_set", "map_mean", "map_std", "runs"],
              [[format(f, ".6g"), fs, format(m, ".10g"),
                format(s, ".10g"), n] for f, fs, m, s, n in summary])
    write_csv(outdir / "plot_data.csv", _artifact_header(cfg),
              ["fraction", "error_mean", "error_std", "series"],
              [[format(f, ".6g"), format(1.0 - m, ".10g"),
                format(s, ".10g"), fs] for f, fs, m, s, n in summary])
    _mark_stage(outdir, "report", cfg)


def run_experiment(cfg: ExperimentConfig, outdir) -> SweepResult:
    """Full pipeline; resumable at stage boundaries via marker files."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(cfg.to_json())
    stage = "data"
    try:
        splits = prepare_data(cfg, outdir)
        stage = "discretizers"
        ps = fit_discretizers(cfg, outdir, splits["train"])
        stage = "embedding"
        model = train_stage(cfg, outdir, splits["train"], ps)
        stage = "sweep"
        result = sweep_stage(cfg, outdir, model, splits, ps)
        stage = "report"
        emit_report(cfg, outdir, result)
    except Exception as err:
        _record_failure(outdir, stage, cfg, err)
        raise
    return result


def run_ablation(cfg: ExperimentConfig, outdir,
                 fractions=(0.1, 0.5, 1.0)) -> Path:
    """Run every loss combination in the grid and emit one CSV table.

    Each combination trains its own embedding at the configured step budget
    and is evaluated with keypoints+embedding features (one selection, one
    training per fraction unless the config says otherwise).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, enabled, mode in ABLATION_GRID:
        sub = ExperimentConfig(**{**asdict(cfg),
                                  "loss": {**cfg.loss, "enabled": enabled,
                                           "contrastive_mode": mode},
                                  "fractions": tuple(fractions),
                                  "feature_sets": (
                                      ("keypoints+embedding", "keypoints",
                                       True),)})
        sub_dir = outdir / name.replace("+", "_")
        result = run_experiment(sub, sub_dir)
        for f, fs, m, s, n in result.summary():
            rows.append([name, format(f, ".6g"), fs, format(m, ".10g"),
                         format(s, ".10g"), n])
    path = outdir / "ablation_grid.csv"
    write_csv(path, _artifact_header(cfg),
              ["losses", "fraction", "feature_set", "map_mean", "map_std",
               "runs"], rows)
    return path
