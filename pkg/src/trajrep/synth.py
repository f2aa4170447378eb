"""Synthetic two-agent pose dataset with labeled behavior segments.

Centroids follow damped second-order dynamics under per-behavior steering
policies; keypoints are rigid body offsets rotated to the motion heading
plus small jitter. The four behaviors are chosen so the built-in attribute
programs separate them: idle (near-zero speed), approach (one agent closes
distance at moderate speed), chase (high speed, small nose-tail distance),
circle (sustained angular motion around the pair midpoint).

Coordinates are generated directly in normalized units, so the resulting
Dataset has unit image dimensions and is marked normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Trajectory

BEHAVIORS = ("idle", "approach", "chase", "circle")

# body frame offsets: nose, ear_l, ear_r, neck, hip_l, hip_r, tail base
MOUSE_OFFSETS = np.array([
    [0.050, 0.000],
    [0.030, 0.018],
    [0.030, -0.018],
    [0.020, 0.000],
    [-0.020, 0.016],
    [-0.020, -0.016],
    [-0.050, 0.000],
])


@dataclass(frozen=True)
class SyntheticSpec:
    num_sequences: int = 20
    frames_per_sequence: int = 1000
    num_agents: int = 2
    num_keypoints: int = 7
    segment_frames: int = 100
    label_noise: float = 0.0
    body_scale: float = 1.0
    keypoint_jitter: float = 0.001
    frame_rate: float = 30.0

    def __post_init__(self):
        if self.num_agents != 2 or self.num_keypoints != 7:
            raise ValueError("generator supports 2 agents with 7 keypoints")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must be in [0, 1]")


def _wall_force(p: np.ndarray, lo=0.15, hi=0.85, gain=0.004) -> np.ndarray:
    f = np.zeros_like(p)
    f += np.where(p < lo, gain * (lo - p) / 0.05, 0.0)
    f -= np.where(p > hi, gain * (p - hi) / 0.05, 0.0)
    return f


def _steer(behavior: str, pos: np.ndarray, vel: np.ndarray,
           rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Per-behavior accelerations for both agents plus the speed cap."""
    acc = np.zeros((2, 2))
    if behavior == "idle":
        acc = -0.5 * vel + rng.normal(0.0, 2e-4, size=(2, 2))
        cap = 0.002
    elif behavior == "approach":
        to_target = pos[0] - pos[1]
        acc[1] = 0.02 * to_target - 0.1 * vel[1]
        acc[0] = -0.5 * vel[0] + rng.normal(0.0, 2e-4, size=2)
        acc += rng.normal(0.0, 2e-4, size=(2, 2))
        cap = 0.010
    elif behavior == "chase":
        away = pos[0] - pos[1]
        dist = max(np.linalg.norm(away), 1e-6)
        acc[0] = 0.01 * away / dist + rng.normal(0.0, 2e-3, size=2)
        acc[1] = 0.06 * (pos[0] - pos[1]) - 0.05 * vel[1]
        cap = 0.030
    else:  # circle
        mid = pos.mean(axis=0)
        for a in range(2):
            radial = pos[a] - mid
            r = max(np.linalg.norm(radial), 1e-6)
            tangent = np.array([-radial[1], radial[0]]) / r
            acc[a] = (0.004 * tangent - 0.002 * radial / r
                      + rng.normal(0.0, 1e-4, size=2))
        cap = 0.015
    return acc, cap


def _generate_sequence(spec: SyntheticSpec, rng: np.random.Generator,
                       source_id: str) -> Trajectory:
    T = spec.frames_per_sequence
    pos = rng.uniform(0.3, 0.7, size=(2, 2))
    vel = np.zeros((2, 2))
    heading = rng.uniform(0.0, 2.0 * np.pi, size=2)
    offsets = MOUSE_OFFSETS * spec.body_scale

    kp = np.empty((T, 2, 7, 2))
    labels = np.empty(T, dtype=np.int64)
    behavior = BEHAVIORS[int(rng.integers(len(BEHAVIORS)))]
    for t in range(T):
        if t % spec.segment_frames == 0:
            behavior = BEHAVIORS[int(rng.integers(len(BEHAVIORS)))]
        labels[t] = BEHAVIORS.index(behavior)
        acc, cap = _steer(behavior, pos, vel, rng)
        vel = vel + acc + _wall_force(pos)
        speed = np.linalg.norm(vel, axis=1, keepdims=True)
        vel = np.where(speed > cap, vel * cap / np.maximum(speed, 1e-12), vel)
        pos = pos + vel
        # hard clamp keeps every keypoint inside the unit image even when a
        # chase overshoots the soft wall force
        low, high = 0.08, 0.92
        vel = np.where((pos < low) | (pos > high), 0.0, vel)
        pos = np.clip(pos, low, high)
        for a in range(2):
            sp = np.linalg.norm(vel[a])
            if sp > 1e-5:
                target = np.arctan2(vel[a, 1], vel[a, 0])
                # smooth heading toward motion direction
                delta = np.arctan2(np.sin(target - heading[a]),
                                   np.cos(target - heading[a]))
                heading[a] += 0.3 * delta
            c, s = np.cos(heading[a]), np.sin(heading[a])
            rot = np.array([[c, -s], [s, c]])
            kp[t, a] = (pos[a] + offsets @ rot.T
                        + rng.normal(0.0, spec.keypoint_jitter, size=(7, 2)))
    if spec.label_noise > 0.0:
        flip = rng.random(T) < spec.label_noise
        labels[flip] = rng.integers(len(BEHAVIORS), size=int(flip.sum()))
    return Trajectory(kp, source_id=source_id, frame_rate=spec.frame_rate,
                      labels=labels, normalized=True)


def generate_synthetic_dataset(spec: SyntheticSpec,
                               rng: np.random.Generator,
                               split: str = "train") -> Dataset:
    """Deterministic under the rng seed; labels mark the active behavior."""
    trajectories = [
        _generate_sequence(spec, rng, source_id=f"synth{i:03d}")
        for i in range(spec.num_sequences)
    ]
    return Dataset(trajectories, image_width=1.0, image_height=1.0, split=split)
