"""Training loop for the embedding model and its task heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .data import Dataset, dataset_windows
from .losses import LossConfig, TaskHeads, total_loss
from .programs import ProgramSet
from .tvae import TvaeConfig, TvaeModel


@dataclass
class TrainingLog:
    steps: list = field(default_factory=list)
    components: list = field(default_factory=list)  # dict per logged step

    def moving_average(self, key: str, window: int = 100) -> np.ndarray:
        vals = np.array([c[key] for c in self.components])
        if len(vals) < window:
            return vals
        kernel = np.ones(window) / window
        return np.convolve(vals, kernel, mode="valid")


def train_embedding(train: Dataset, ps: ProgramSet | None, cfg: LossConfig,
                    seed: int,
                    window_length: int = 21, latent_dim: int = 32,
                    hidden_dim: int = 256, batch_size: int = 128,
                    lr: float = 2e-4, steps: int = 2000,
                    approximators: dict | None = None,
                    precision: str = "single",
                    callback=None):
    """Train the embedding jointly with the decoder heads.

    Deterministic given (dataset, config, seed). Runs the differentiable
    substrate in single precision by default for throughput; pass
    precision="double" for float64. Returns (model, heads, TrainingLog).
    """
    if precision not in ("single", "double"):
        raise ValueError(f"unknown precision: {precision!r}")
    dtype = np.float32 if precision == "single" else np.float64
    rng = np.random.default_rng(seed)
    kp = dataset_windows(train, window_length)
    n = kp.shape[0]
    input_dim = kp.shape[2] * kp.shape[3] * 2
    log = TrainingLog()

    with ad.use_dtype(dtype):
        model = TvaeModel.create(
            TvaeConfig(input_dim=input_dim, window_length=window_length,
                       latent_dim=latent_dim, hidden_dim=hidden_dim), rng)
        heads = TaskHeads.create(latent_dim,
                                 ps.size if ps is not None else 1, rng)
        for step in range(1, steps + 1):
            idx = rng.choice(n, size=min(batch_size, n), replace=False)
            model.store.zero_grad()
            heads.store.zero_grad()
            loss, components = total_loss(model, heads, ps, kp[idx], cfg, rng,
                                          approximators=approximators)
            loss.backward()
            nn.adam_step(model.store, model.store.gradients(), lr)
            nn.adam_step(heads.store, heads.store.gradients(), lr)
            log.steps.append(step)
            log.components.append(components)
            if callback is not None:
                callback(step, components)
    return model, heads, log
