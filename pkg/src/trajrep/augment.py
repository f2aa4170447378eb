"""Attribute-preserving window augmentations and the preservation checker.

Geometric kinds (rotation, reflection, translation) leave every built-in
program output unchanged exactly; keypoint noise is approximately
preserving, checked against a first-order propagated 5-sigma bound.
Rotation and reflection act about the window's global centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Window
from .programs import ProgramSet

GEOMETRIC_KINDS = ("rotation", "reflection", "translation")
ALL_KINDS = GEOMETRIC_KINDS + ("keypoint_noise",)
DEFAULT_NOISE_SIGMA = 0.002  # normalized units
COORD_BOUNDS = (-0.5, 1.5)


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True)
class Augmentation:
    """One concrete transform: kind plus its sampled parameters."""

    kind: str
    angle: float = 0.0        # rotation angle / reflection axis, radians
    offset: tuple = (0.0, 0.0)
    sigma: float = DEFAULT_NOISE_SIGMA

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise AugmentationError(f"unknown augmentation kind: {self.kind!r}")
        if self.kind == "rotation" and not 0.0 <= self.angle < 2.0 * np.pi:
            raise AugmentationError("rotation angle must be in [0, 2*pi)")
        if self.kind == "keypoint_noise" and self.sigma > 0.005:
            raise AugmentationError("noise sigma must be <= 0.005")


def _window_centroid(kp: np.ndarray) -> np.ndarray:
    return kp.reshape(-1, 2).mean(axis=0)


def _rotate(kp: np.ndarray, angle: float, center: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return (kp - center) @ rot.T + center


def _reflect(kp: np.ndarray, axis_angle: float, center: np.ndarray) -> np.ndarray:
    # Householder reflection across the line through ``center`` at axis_angle.
    c, s = np.cos(2.0 * axis_angle), np.sin(2.0 * axis_angle)
    ref = np.array([[c, s], [s, -c]])
    return (kp - center) @ ref.T + center


def apply_augmentation(a: Augmentation, w: Window,
                       rng: np.random.Generator | None = None) -> Window:
    """Transform a normalized window; shape and arity are unchanged.

    Translation offsets that push any keypoint out of [-0.5, 1.5] are
    resampled (up to 10 tries) when an rng is supplied, else rejected.
    Keypoint noise requires an rng.
    """
    kp = w.keypoints
    center = _window_centroid(kp)
    if a.kind == "rotation":
        out = _rotate(kp, a.angle, center)
    elif a.kind == "reflection":
        out = _reflect(kp, a.angle, center)
    elif a.kind == "translation":
        offset = np.asarray(a.offset, dtype=np.float64)
        out = kp + offset
        tries = 0
        while not _in_bounds(out):
            if rng is None or tries >= 10:
                raise AugmentationError(
                    "translation pushes keypoints out of bounds")
            offset = rng.uniform(-0.1, 0.1, size=2)
            out = kp + offset
            tries += 1
    elif a.kind == "keypoint_noise":
        if rng is None:
            raise AugmentationError("keypoint noise requires an rng")
        out = kp + rng.normal(0.0, a.sigma, size=kp.shape)
    return Window(out, center_index=w.center_index)


def _in_bounds(kp: np.ndarray) -> bool:
    lo, hi = COORD_BOUNDS
    return bool(np.all(kp >= lo) and np.all(kp <= hi))


def sample_augmentation(rng: np.random.Generator,
                        domain: str = "mouse",
                        kinds=None,
                        noise_sigma: float = DEFAULT_NOISE_SIGMA) -> Augmentation:
    """Uniform over enabled kinds; noise is excluded for the fly domain."""
    if kinds is None:
        kinds = ALL_KINDS if domain == "mouse" else GEOMETRIC_KINDS
    kinds = [k for k in kinds
             if not (domain == "fly" and k == "keypoint_noise")]
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "rotation":
        return Augmentation(kind, angle=float(rng.uniform(0.0, 2.0 * np.pi)))
    if kind == "reflection":
        return Augmentation(kind, angle=float(rng.uniform(0.0, np.pi)))
    if kind == "translation":
        return Augmentation(kind, offset=tuple(rng.uniform(-0.1, 0.1, size=2)))
    return Augmentation(kind, sigma=noise_sigma)


def augment_batch(kp: np.ndarray, rng: np.random.Generator,
                  domain: str = "mouse", kinds=None,
                  noise_sigma: float = DEFAULT_NOISE_SIGMA) -> np.ndarray:
    """Independently augment every window in a (B, T, A, K, 2) batch."""
    out = np.empty_like(kp)
    c = kp.shape[1] // 2
    for i in range(kp.shape[0]):
        a = sample_augmentation(rng, domain=domain, kinds=kinds,
                                noise_sigma=noise_sigma)
        try:
            out[i] = apply_augmentation(a, Window(kp[i], c), rng).keypoints
        except AugmentationError:
            out[i] = kp[i]  # unlucky translation near the frame edge
    return out


@dataclass
class PreservationReport:
    """Per-program |attr(w) - attr(aug(w))| against the allowed bound."""

    deviations: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.deviations[k] <= self.bounds[k] for k in self.deviations)


def _noise_bound(ps: ProgramSet, kp: np.ndarray, sigma: float) -> np.ndarray:
    """First-order 5-sigma bound per program: 5 * sigma * ||grad attr||."""
    bounds = np.empty(ps.size)
    for j, p in enumerate(ps.programs):
        x = Tensor(kp[None])
        out = p.compute(x)
        out.backward(np.ones(ad.as_array(out).shape))
        gnorm = float(np.sqrt(np.sum(x.grad ** 2)))
        bounds[j] = 5.0 * sigma * gnorm
    return bounds


def check_attribute_preserving(ps: ProgramSet, w: Window, a: Augmentation,
                               rng: np.random.Generator | None = None,
                               geometric_tol: float = 1e-9) -> PreservationReport:
    """Compare program outputs on a window and its augmented copy."""
    aug = apply_augmentation(a, w, rng)
    before = ad.as_array(ps.attribute_matrix(w.keypoints[None]))[0]
    after = ad.as_array(ps.attribute_matrix(aug.keypoints[None]))[0]
    if a.kind == "keypoint_noise":
        bounds = _noise_bound(ps, w.keypoints, a.sigma)
        # guard against vanishing-gradient corner cases at kinks
        bounds = np.maximum(bounds, 10.0 * a.sigma)
    else:
        bounds = np.full(ps.size, geometric_tol)
    report = PreservationReport()
    for j, p in enumerate(ps.programs):
        report.deviations[p.id] = float(abs(before[j] - after[j]))
        report.bounds[p.id] = float(bounds[j])
    return report
