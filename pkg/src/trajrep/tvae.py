"""Recurrent variational sequence autoencoder over stacked pose states.

The encoder is a bidirectional GRU whose final hidden states feed affine
heads for the posterior mean and log-variance. The decoder is a GRU over
(current state, latent) predicting the change to the next state; training
is teacher-forced, free-running rollouts are used for the consistency
objective. The reconstruction density is a fixed-variance unit Gaussian on
state deltas.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
LOGVAR_CLAMP = 10.0


@dataclass(frozen=True)
class TvaeConfig:
    input_dim: int
    window_length: int = 21
    latent_dim: int = 32
    hidden_dim: int = 256


@dataclass(frozen=True)
class Embedding:
    """Posterior mean and (clamped) log-variance; z_mu is the feature vector."""

    z_mu: object  # Tensor or ndarray, (B, latent)
    z_logvar: object

    @property
    def mu_array(self) -> np.ndarray:
        return ad.as_array(self.z_mu)


@dataclass
class TvaeModel:
    config: TvaeConfig
    store: nn.ParameterStore

    @classmethod
    def create(cls, config: TvaeConfig, rng: np.random.Generator) -> "TvaeModel":
        store = nn.ParameterStore()
        d, h, z = config.input_dim, config.hidden_dim, config.latent_dim
        nn.add_gru(store, "enc_fw", rng, d, h)
        nn.add_gru(store, "enc_bw", rng, d, h)
        nn.add_affine(store, "enc_mu", rng, 2 * h, z)
        nn.add_affine(store, "enc_logvar", rng, 2 * h, z)
        nn.add_affine(store, "dec_init", rng, z, h)
        nn.add_gru(store, "dec", rng, d + z, h)
        nn.add_affine(store, "dec_out", rng, h, d)
        return cls(config, store)

    def save(self, path):
        path = Path(path)
        nn.save_checkpoint(self.store, path)
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(asdict(self.config)))

    @classmethod
    def load(cls, path) -> "TvaeModel":
        path = Path(path)
        cfg = TvaeConfig(**json.loads(
            path.with_suffix(path.suffix + ".json").read_text()))
        return cls(cfg, nn.load_checkpoint(path))


def encode(m: TvaeModel, xs) -> Embedding:
    """Embed windows xs (B, T, D); deterministic given the parameters."""
    arr = ad.as_array(xs)
    if arr.ndim != 3 or arr.shape[1] != m.config.window_length \
            or arr.shape[2] != m.config.input_dim:
        raise nn.ShapeError(
            f"expected (B, {m.config.window_length}, {m.config.input_dim}), "
            f"got {arr.shape}")
    h = m.config.hidden_dim
    h_fw = nn.run_gru(m.store, "enc_fw", xs, h)
    h_bw = nn.run_gru(m.store, "enc_bw", xs, h, reverse=True)
    joint = ad.concatenate([h_fw, h_bw], axis=1)
    z_mu = nn.affine(m.store, "enc_mu", joint)
    z_logvar = ad.clip(nn.affine(m.store, "enc_logvar", joint),
                       -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return Embedding(z_mu, z_logvar)


def sample_latent(e: Embedding, rng: np.random.Generator):
    """Reparameterized draw: z = mu + exp(logvar/2) * eps."""
    mu = ad.as_array(e.z_mu)
    eps = rng.standard_normal(mu.shape)
    return ad.add(e.z_mu, ad.mul(ad.exp(ad.mul(e.z_logvar, 0.5)), eps))


def decode_rollout(m: TvaeModel, z, s0, steps: int):
    """Free-running rollout: s_{t+1} = s_t + delta(s_t, z); returns (B, steps+1, D).

    The returned window includes the initial state s0.
    """
    h = m.config.hidden_dim
    B = ad.as_array(s0).shape[0]
    hidden = ad.tanh(nn.affine(m.store, "dec_init", z))
    states = [s0]
    s = s0
    for _ in range(steps):
        inp = ad.concatenate([s, z], axis=1)
        hidden = nn.gru_step(m.store, "dec", inp, hidden, h)
        delta = nn.affine(m.store, "dec_out", hidden)
        s = ad.add(s, delta)
        ad.check_finite(s, "decoder rollout state")
        states.append(s)
    return ad.stack(states, axis=1)


def teacher_forced_deltas(m: TvaeModel, xs, z):
    """Predicted state deltas conditioning on the true current states."""
    h = m.config.hidden_dim
    T = ad.as_array(xs).shape[1]
    hidden = ad.tanh(nn.affine(m.store, "dec_init", z))
    deltas = []
    for t in range(T - 1):
        inp = ad.concatenate([xs[:, t, :], z], axis=1)
        hidden = nn.gru_step(m.store, "dec", inp, hidden, h)
        deltas.append(nn.affine(m.store, "dec_out", hidden))
    return ad.stack(deltas, axis=1)  # (B, T-1, D)


def kl_to_unit_gaussian(e: Embedding):
    """Closed-form KL(q || N(0, I)) summed over latent dims, mean over batch."""
    var = ad.exp(e.z_logvar)
    per = ad.mul(0.5, ad.sub(ad.add(ad.mul(e.z_mu, e.z_mu), var),
                             ad.add(1.0, e.z_logvar)))
    return ad.tmean(ad.tsum(per, axis=1))


def tvae_loss(m: TvaeModel, xs, rng: np.random.Generator | None = None,
              embedding: Embedding | None = None, z=None):
    """Evidence-bound loss: teacher-forced Gaussian NLL of deltas plus KL.

    The reconstruction sums over the T-1 observed transitions and the state
    dimension, and averages over the batch. Returns (total, components).
    """
    arr = ad.as_array(xs)
    B, T, D = arr.shape
    e = embedding if embedding is not None else encode(m, xs)
    if z is None:
        z = sample_latent(e, rng) if rng is not None else e.z_mu
    pred = teacher_forced_deltas(m, xs, z)
    true = arr[:, 1:, :] - arr[:, :-1, :]
    resid = ad.sub(pred, true)
    nll = ad.add(ad.mul(0.5, ad.tsum(ad.mul(resid, resid), axis=(1, 2))),
                 0.5 * LOG_2PI * (T - 1) * D)
    recon = ad.tmean(nll)
    kl = kl_to_unit_gaussian(e)
    total = ad.add(recon, kl)
    components = {"reconstruction_nll": float(ad.as_array(recon)),
                  "kl": float(ad.as_array(kl))}
    return total, components
