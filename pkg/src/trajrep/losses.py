"""Programmatic decoder losses and the weighted training objective.

Three supervision signals derived from the attribute programs:
  - consistency: attributes of a free-running rollout must match the input
    window's attributes (squared error over programs);
  - decoding: a shallow head regresses the attribute vector from z_mu;
  - contrastive: attribute-class-supervised contrastive loss on projected,
    L2-normalized embeddings with a temperature.

With augmentation enabled each decoder loss is added with and without the
augmented copy; the contrastive loss instead runs on the doubled batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import Dataset, dataset_windows
from .programs import AttributeProgram, ProgramSet
from .tvae import Embedding, TvaeModel, encode, sample_latent, decode_rollout, tvae_loss
from .augment import augment_batch

HEAD_HIDDEN = 32

ALL_COMPONENTS = ("tvae", "consistency", "decoding", "contrastive")


class ConfigurationError(ValueError):
    pass


class TrainingFailure(RuntimeError):
    def __init__(self, message: str, best_error: float):
        super().__init__(message)
        self.best_error = best_error


@dataclass
class LossConfig:
    """Weights, temperature, enabled components, and augmentation policy."""

    enabled: tuple = ALL_COMPONENTS
    weight_consistency: float = 1.0
    weight_contrastive: float = 10.0
    weight_decoding: float = 1.0
    temperature: float = 0.07
    augmentation: bool = True
    contrastive_mode: str = "program"  # program | unsupervised
    consistency_mode: str = "direct"  # direct | approximator
    domain: str = "mouse"
    noise_sigma: float = 0.002

    def __post_init__(self):
        unknown = set(self.enabled) - set(ALL_COMPONENTS)
        if unknown:
            raise ConfigurationError(f"unknown loss components: {unknown}")
        if not self.enabled:
            raise ConfigurationError("at least one loss component required")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        for w in (self.weight_consistency, self.weight_contrastive,
                  self.weight_decoding):
            if w < 0:
                raise ConfigurationError("loss weights must be >= 0")


@dataclass
class TaskHeads:
    """Shallow decode head f and contrastive projection head g on z_mu."""

    store: nn.ParameterStore
    num_programs: int
    projection_dim: int = HEAD_HIDDEN

    @classmethod
    def create(cls, latent_dim: int, num_programs: int,
               rng: np.random.Generator,
               projection_dim: int = HEAD_HIDDEN) -> "TaskHeads":
        store = nn.ParameterStore()
        nn.add_affine(store, "f1", rng, latent_dim, HEAD_HIDDEN)
        nn.add_affine(store, "f2", rng, HEAD_HIDDEN, num_programs)
        nn.add_affine(store, "g1", rng, latent_dim, HEAD_HIDDEN)
        nn.add_affine(store, "g2", rng, HEAD_HIDDEN, projection_dim)
        return cls(store, num_programs, projection_dim)

    def decode(self, z_mu):
        h = ad.relu(nn.affine(self.store, "f1", z_mu))
        return nn.affine(self.store, "f2", h)

    def project(self, z_mu):
        h = ad.relu(nn.affine(self.store, "g1", z_mu))
        return ad.l2_normalize(nn.affine(self.store, "g2", h), axis=1)


@dataclass
class ProgramApproximator:
    """Recurrent regressor standing in for a program on the gradient path."""

    program_id: str
    store: nn.ParameterStore
    hidden_dim: int
    input_dim: int
    val_rel_error: float = float("nan")

    @classmethod
    def create(cls, program_id: str, input_dim: int, rng,
               hidden_dim: int = 256) -> "ProgramApproximator":
        store = nn.ParameterStore()
        nn.add_gru(store, "approx", rng, input_dim, hidden_dim)
        nn.add_affine(store, "approx_out", rng, hidden_dim, 1)
        return cls(program_id, store, hidden_dim, input_dim)

    def predict(self, xs):
        """xs (B, T, D) -> (B,) predicted attribute values."""
        h = nn.run_gru(self.store, "approx", xs, self.hidden_dim)
        out = nn.affine(self.store, "approx_out", h)
        return out[:, 0]


def _flatten_windows(kp) -> np.ndarray:
    """(B, T, A, K, 2) -> (B, T, D) stacked states."""
    arr = ad.as_array(kp)
    return arr.reshape(arr.shape[0], arr.shape[1], -1)


def consistency_loss(m: TvaeModel, ps: ProgramSet, kp: np.ndarray,
                     rng: np.random.Generator | None = None,
                     mode: str = "direct",
                     approximators: dict | None = None,
                     embedding: Embedding | None = None):
    """Squared attribute gap between a window and its rollout, mean over programs.

    ``direct`` differentiates through the analytic programs; ``approximator``
    substitutes trained recurrent regressors on the gradient path.
    """
    kp = np.asarray(kp, dtype=np.float64)
    B, T, A, K, _ = kp.shape
    xs = kp.reshape(B, T, -1)
    e = embedding if embedding is not None else encode(m, xs)
    z = sample_latent(e, rng) if rng is not None else e.z_mu
    rollout = decode_rollout(m, z, xs[:, 0, :], T - 1)  # (B, T, D) Tensor
    target = ad.as_array(ps.attribute_matrix(kp))  # constants, no gradient
    if mode == "direct":
        roll_kp = ad.reshape(rollout, (B, T, A, K, 2))
        attrs = ps.attribute_matrix(roll_kp)
    elif mode == "approximator":
        if not approximators:
            raise ConfigurationError(
                "approximator mode requires trained approximators")
        missing = [p.id for p in ps.programs if p.id not in approximators]
        if missing:
            raise ConfigurationError(f"no approximator for programs: {missing}")
        attrs = ad.stack([approximators[p.id].predict(rollout)
                          for p in ps.programs], axis=1)
    else:
        raise ConfigurationError(f"unknown consistency mode: {mode!r}")
    diff = ad.sub(attrs, target)
    return ad.tmean(ad.mul(diff, diff))


def decoding_loss(heads: TaskHeads, e: Embedding, ps: ProgramSet,
                  kp: np.ndarray):
    """Mean squared error between f(z_mu) and the continuous attribute vector."""
    if heads.num_programs != ps.size:
        raise ConfigurationError(
            f"decode head predicts {heads.num_programs} attributes, "
            f"program set has {ps.size}")
    target = ad.as_array(ps.attribute_matrix(np.asarray(kp, dtype=np.float64)))
    pred = heads.decode(e.z_mu)
    diff = ad.sub(pred, target)
    return ad.tmean(ad.mul(diff, diff))


def contrastive_loss(projections, labels: np.ndarray, temperature: float):
    """Attribute-class-supervised contrastive loss over a batch.

    ``projections`` are L2-normalized rows (N, P); ``labels`` is (N, M) class
    indices, one column per program. For each anchor i and program j the
    positives are the other batch elements sharing class; anchors with no
    positives contribute 0. Summed over anchors and programs.
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    N, M = labels.shape
    if N < 2:
        raise ConfigurationError("contrastive loss requires a batch of >= 2")
    logits = ad.div(ad.matmul(projections, ad.transpose(projections)),
                    temperature)
    off_diag = 1.0 - np.eye(N)
    # log denominator over l != i: mask the diagonal additively
    masked = ad.add(logits, np.where(off_diag > 0.0, 0.0, -1e30))
    log_den = ad.logsumexp(masked, axis=1, keepdims=True)
    log_prob = ad.sub(logits, log_den)
    total = 0.0
    for j in range(M):
        same = (labels[:, j][:, None] == labels[:, j][None, :]).astype(np.float64)
        pos = same * off_diag
        n_pos = pos.sum(axis=1)
        scale = pos / np.maximum(n_pos, 1.0)[:, None]  # rows w/o positives -> 0
        total = ad.add(total, ad.neg(ad.tsum(ad.mul(log_prob, scale))))
    return total


def contrastive_loss_reference(projections: np.ndarray, labels: np.ndarray,
                               temperature: float) -> float:
    """Naive double-loop evaluation used as an independent oracle."""
    g = np.asarray(projections, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    N, M = labels.shape
    total = 0.0
    for j in range(M):
        for i in range(N):
            positives = [k for k in range(N)
                         if k != i and labels[k, j] == labels[i, j]]
            if not positives:
                continue
            den = sum(np.exp(g[i] @ g[l] / temperature)
                      for l in range(N) if l != i)
            s = 0.0
            for k in positives:
                s += np.log(np.exp(g[i] @ g[k] / temperature) / den)
            total += -s / len(positives)
    return total


def train_program_approximator(p: AttributeProgram, data: Dataset,
                               rng: np.random.Generator,
                               hidden_dim: int = 256,
                               window_length: int = 21,
                               batch_size: int = 64,
                               lr: float = 1e-3,
                               max_steps: int = 5000,
                               target_rel_error: float = 0.02,
                               min_windows: int = 10_000,
                               eval_every: int = 250) -> ProgramApproximator:
    """Fit a recurrent regressor to a program; stops at the target val error.

    Validation relative error is mean absolute error divided by
    max(value range, |mean value|) on a held-out 10% of windows. Raises
    TrainingFailure (carrying the best error attained) if the budget runs out.
    """
    kp = dataset_windows(data, window_length)
    if kp.shape[0] < min_windows:
        raise ConfigurationError(
            f"need >= {min_windows} windows, got {kp.shape[0]}")
    xs = _flatten_windows(kp)
    values = ad.as_array(p.compute(kp))
    n_val = max(1, xs.shape[0] // 10)
    order = rng.permutation(xs.shape[0])
    val_idx, train_idx = order[:n_val], order[n_val:]
    denom = max(float(values.max() - values.min()), abs(float(values.mean())),
                1e-8)

    approx = ProgramApproximator.create(p.id, xs.shape[2], rng,
                                        hidden_dim=hidden_dim)

    def val_error() -> float:
        preds = []
        for s in range(0, len(val_idx), 512):
            idx = val_idx[s:s + 512]
            preds.append(ad.as_array(approx.predict(xs[idx])))
        pred = np.concatenate(preds)
        return float(np.mean(np.abs(pred - values[val_idx]))) / denom

    best = float("inf")
    for step in range(1, max_steps + 1):
        idx = rng.choice(train_idx, size=min(batch_size, len(train_idx)),
                         replace=False)
        approx.store.zero_grad()
        pred = approx.predict(xs[idx])
        diff = ad.sub(pred, values[idx])
        loss = ad.tmean(ad.mul(diff, diff))
        loss.backward()
        nn.adam_step(approx.store, approx.store.gradients(), lr)
        if step % eval_every == 0 or step == max_steps:
            err = val_error()
            best = min(best, err)
            if err <= target_rel_error:
                approx.val_rel_error = err
                return approx
    raise TrainingFailure(
        f"approximator for {p.id!r} reached {best:.4f} relative error "
        f"(target {target_rel_error}) in {max_steps} steps", best)


def total_loss(m: TvaeModel, heads: TaskHeads, ps: ProgramSet | None,
               kp: np.ndarray, cfg: LossConfig,
               rng: np.random.Generator | None = None,
               approximators: dict | None = None):
    """Weighted sum of enabled components over a batch of windows.

    With augmentation on, every decoder component is evaluated on both the
    original and an augmented copy of the batch; the contrastive loss runs
    once on the doubled batch. Returns (total Tensor, component dict).
    """
    kp = np.asarray(kp, dtype=np.float64)
    B, T = kp.shape[:2]
    xs = _flatten_windows(kp)
    needs_programs = {"consistency", "decoding"} & set(cfg.enabled) or (
        "contrastive" in cfg.enabled and cfg.contrastive_mode == "program")
    if needs_programs and ps is None:
        raise ConfigurationError("enabled losses require a program set")

    batches = [(kp, xs)]
    if cfg.augmentation:
        aug_kp = augment_batch(kp, rng, domain=cfg.domain,
                               noise_sigma=cfg.noise_sigma)
        batches.append((aug_kp, _flatten_windows(aug_kp)))

    total = 0.0
    components: dict[str, float] = {}

    def accumulate(name, value, weight):
        nonlocal total
        total = ad.add(total, ad.mul(value, weight))
        components[name] = components.get(name, 0.0) \
            + weight * float(ad.as_array(value))

    embeddings = []
    for bkp, bxs in batches:
        e = encode(m, bxs)
        embeddings.append(e)
        if "tvae" in cfg.enabled:
            value, parts = tvae_loss(m, bxs, rng, embedding=e)
            accumulate("tvae", value, 1.0)
            components["reconstruction_nll"] = components.get(
                "reconstruction_nll", 0.0) + parts["reconstruction_nll"]
            components["kl"] = components.get("kl", 0.0) + parts["kl"]
        if "consistency" in cfg.enabled:
            value = consistency_loss(m, ps, bkp, rng,
                                     mode=cfg.consistency_mode,
                                     approximators=approximators, embedding=e)
            accumulate("consistency", value, cfg.weight_consistency)
        if "decoding" in cfg.enabled:
            value = decoding_loss(heads, e, ps, bkp)
            accumulate("decoding", value, cfg.weight_decoding)

    if "contrastive" in cfg.enabled:
        proj = ad.concatenate([heads.project(e.z_mu) for e in embeddings],
                              axis=0)
        if cfg.contrastive_mode == "unsupervised":
            ids = np.arange(B)
            labels = np.concatenate([ids] * len(batches))[:, None]
        else:
            values = ad.as_array(ps.attribute_matrix(kp))
            classes = ps.class_matrix(values)
            labels = np.concatenate([classes] * len(batches), axis=0)
        value = contrastive_loss(proj, labels, cfg.temperature)
        accumulate("contrastive", value, cfg.weight_contrastive)

    components["total"] = float(ad.as_array(total))
    return total, components
