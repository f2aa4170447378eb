"""Synthetic generator: shapes, determinism, and behavior separation."""

import numpy as np
import pytest

from trajrep import synth
from trajrep.data import dataset_labels


def test_spec_validation():
    with pytest.raises(ValueError):
        synth.SyntheticSpec(num_agents=3)
    with pytest.raises(ValueError):
        synth.SyntheticSpec(label_noise=1.5)


def test_shapes_labels_and_normalization():
    spec = synth.SyntheticSpec(num_sequences=3, frames_per_sequence=400)
    d = synth.generate_synthetic_dataset(spec, np.random.default_rng(0))
    assert len(d.trajectories) == 3
    assert d.normalized and d.image_width == 1.0
    for t in d.trajectories:
        assert t.keypoints.shape == (400, 2, 7, 2)
        assert np.all(t.keypoints >= 0.0) and np.all(t.keypoints <= 1.0)
        assert t.labels.shape == (400,)
        assert np.all((t.labels >= 0) & (t.labels < len(synth.BEHAVIORS)))
        # labels change only at 100-frame boundaries
        changes = np.nonzero(np.diff(t.labels))[0] + 1
        assert np.all(changes % spec.segment_frames == 0)


def test_determinism_under_seed():
    spec = synth.SyntheticSpec(num_sequences=2, frames_per_sequence=200)
    a = synth.generate_synthetic_dataset(spec, np.random.default_rng(7))
    b = synth.generate_synthetic_dataset(spec, np.random.default_rng(7))
    for ta, tb in zip(a.trajectories, b.trajectories):
        np.testing.assert_array_equal(ta.keypoints, tb.keypoints)
        np.testing.assert_array_equal(ta.labels, tb.labels)
    c = synth.generate_synthetic_dataset(spec, np.random.default_rng(8))
    assert not np.array_equal(a.trajectories[0].keypoints,
                              c.trajectories[0].keypoints)


def test_all_behaviors_appear():
    spec = synth.SyntheticSpec(num_sequences=8, frames_per_sequence=500)
    d = synth.generate_synthetic_dataset(spec, np.random.default_rng(1))
    labels = dataset_labels(d)
    assert set(np.unique(labels)) == set(range(len(synth.BEHAVIORS)))


def test_behaviors_have_distinct_speed_profiles():
    spec = synth.SyntheticSpec(num_sequences=10, frames_per_sequence=600)
    d = synth.generate_synthetic_dataset(spec, np.random.default_rng(2))
    speed_by_label = {i: [] for i in range(4)}
    for t in d.trajectories:
        centroids = t.keypoints.mean(axis=2)  # (T, 2, 2)
        step = np.linalg.norm(np.diff(centroids, axis=0), axis=-1).mean(axis=1)
        for lab, sp in zip(t.labels[1:], step):
            speed_by_label[int(lab)].append(sp)
    means = {k: np.mean(v) for k, v in speed_by_label.items() if v}
    idle = synth.BEHAVIORS.index("idle")
    chase = synth.BEHAVIORS.index("chase")
    assert means[chase] > 3.0 * means[idle]


def test_label_noise_flips_labels():
    # one sequence so the clean run consumes the same rng stream up to the
    # final flip step
    spec = synth.SyntheticSpec(num_sequences=1, frames_per_sequence=500,
                               label_noise=0.3)
    clean_spec = synth.SyntheticSpec(num_sequences=1, frames_per_sequence=500)
    noisy = synth.generate_synthetic_dataset(spec, np.random.default_rng(3))
    clean = synth.generate_synthetic_dataset(clean_spec,
                                             np.random.default_rng(3))
    diff = np.mean(dataset_labels(noisy) != dataset_labels(clean))
    assert 0.1 < diff < 0.35  # ~30% flipped, some to the same class
