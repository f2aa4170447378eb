"""Frame-level features, shallow classifier, MAP metric, and fraction sweeps.

The trained encoder is frozen and used as a per-frame feature extractor
over centered windows; a two-hidden-layer network is trained on top with
cross-entropy. Classification quality is macro mean average precision over
behavior classes; data-efficiency sweeps subsample the labeled training
split by 100-frame segments while approximately preserving the class
distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .data import Dataset, Trajectory, dataset_labels, window_array
from .programs import ProgramSet
from .tvae import TvaeModel, encode

SEGMENT_FRAMES = 100
BASE_CHOICES = ("keypoints", "handcrafted", "both")

# hidden sizes by training fraction (larger data -> larger classifier)
def classifier_hidden_sizes(fraction: float) -> tuple[int, int]:
    if fraction >= 0.5:
        return (256, 32)
    if fraction >= 0.1:
        return (128, 16)
    return (64, 16)


class EvaluationError(ValueError):
    pass


@dataclass
class FrameFeatures:
    """Per-frame feature rows plus aligned labels."""

    features: np.ndarray  # (N, F)
    labels: np.ndarray  # (N,), -1 where unlabeled

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise EvaluationError("features and labels must align per frame")


def extract_features(m: TvaeModel | None, d: Dataset, base: str = "keypoints",
                     ps: ProgramSet | None = None,
                     include_embedding: bool = True,
                     batch_size: int = 512) -> FrameFeatures:
    """One feature row per frame: base features plus (optionally) z_mu.

    The encoder weights are read-only here; repeated calls on the same
    dataset give identical tables.
    """
    if base not in BASE_CHOICES:
        raise EvaluationError(f"base must be one of {BASE_CHOICES}")
    if base in ("handcrafted", "both") and ps is None:
        raise EvaluationError("handcrafted features require a program set")
    if include_embedding and m is None:
        raise EvaluationError("embedding features require a trained model")
    T = m.config.window_length if m is not None else 21
    blocks = []
    for t in d.trajectories:
        wins = window_array(t, T)  # (n, T, A, K, 2)
        n = wins.shape[0]
        cols = []
        if base in ("keypoints", "both"):
            cols.append(t.stacked())
        if base in ("handcrafted", "both"):
            cols.append(ad.as_array(ps.attribute_matrix(wins)))
        if include_embedding:
            xs = wins.reshape(n, T, -1)
            mus = []
            for s in range(0, n, batch_size):
                mus.append(encode(m, xs[s:s + batch_size]).mu_array)
            cols.append(np.concatenate(mus, axis=0))
        blocks.append(np.concatenate(cols, axis=1))
    return FrameFeatures(np.concatenate(blocks, axis=0), dataset_labels(d))


def subsample_training_set(d: Dataset, fraction: float,
                           rng: np.random.Generator,
                           balance_tol: float = 0.2,
                           max_attempts: int = 20) -> Dataset:
    """Sample 100-frame segments until the target frame count is reached.

    Per-class frame frequencies are kept within ``balance_tol`` relative of
    the full split when possible; otherwise the best draw is returned with
    a warning flag left to the caller's logs.
    """
    if not 0.0 < fraction <= 1.0:
        raise EvaluationError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return d
    full_labels = dataset_labels(d)
    target_frames = int(round(fraction * d.total_frames))
    full_hist = _class_hist(full_labels)

    segments = []
    for ti, t in enumerate(d.trajectories):
        for start in range(0, t.num_frames - SEGMENT_FRAMES + 1, SEGMENT_FRAMES):
            segments.append((ti, start))
    if not segments:
        raise EvaluationError("trajectories shorter than one segment")
    n_seg = max(1, target_frames // SEGMENT_FRAMES)

    best_trajs, best_dev = None, np.inf
    for _ in range(max_attempts):
        idx = rng.choice(len(segments), size=min(n_seg, len(segments)),
                         replace=False)
        trajs = []
        for i in sorted(idx):
            ti, start = segments[i]
            t = d.trajectories[ti]
            trajs.append(Trajectory(
                t.keypoints[start:start + SEGMENT_FRAMES],
                source_id=f"{t.source_id}#seg{start}",
                frame_rate=t.frame_rate,
                labels=None if t.labels is None
                else t.labels[start:start + SEGMENT_FRAMES],
                normalized=t.normalized))
        hist = _class_hist(np.concatenate(
            [tr.labels for tr in trajs if tr.labels is not None] or
            [np.empty(0, dtype=np.int64)]))
        dev = _hist_deviation(full_hist, hist)
        if dev < best_dev:
            best_dev, best_trajs = dev, trajs
        if dev <= balance_tol:
            break
    return Dataset(best_trajs, d.image_width, d.image_height, split=d.split)


def _class_hist(labels: np.ndarray) -> dict[int, float]:
    labels = labels[labels >= 0]
    if labels.size == 0:
        return {}
    vals, counts = np.unique(labels, return_counts=True)
    return {int(v): c / labels.size for v, c in zip(vals, counts)}


def _hist_deviation(full: dict, sub: dict) -> float:
    if not full:
        return 0.0
    devs = []
    for cls, frac in full.items():
        devs.append(abs(sub.get(cls, 0.0) - frac) / frac)
    return max(devs)


@dataclass
class ClassifierModel:
    store: nn.ParameterStore
    hidden_sizes: tuple
    num_classes: int

    @classmethod
    def create(cls, input_dim: int, hidden_sizes: tuple, num_classes: int,
               rng) -> "ClassifierModel":
        store = nn.ParameterStore()
        h1, h2 = hidden_sizes
        nn.add_affine(store, "c1", rng, input_dim, h1)
        nn.add_affine(store, "c2", rng, h1, h2)
        nn.add_affine(store, "c3", rng, h2, num_classes)
        return cls(store, hidden_sizes, num_classes)

    def logits(self, x):
        h = ad.relu(nn.affine(self.store, "c1", x))
        h = ad.relu(nn.affine(self.store, "c2", h))
        return nn.affine(self.store, "c3", h)

    def predict_scores(self, x: np.ndarray) -> np.ndarray:
        """Softmax class probabilities, pure numpy forward."""
        logits = ad.as_array(self.logits(x))
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        return e / e.sum(axis=1, keepdims=True)


def _standardize(train_x: np.ndarray):
    mean = train_x.mean(axis=0)
    std = np.maximum(train_x.std(axis=0), 1e-8)
    return mean, std


def train_classifier(train: FrameFeatures, val: FrameFeatures,
                     num_classes: int, hidden_sizes: tuple,
                     rng: np.random.Generator,
                     lr: float = 1e-3, batch_size: int = 512,
                     max_epochs: int = 100, patience: int = 10):
    """Cross-entropy training with early stopping on validation MAP.

    Returns (best model, history of (epoch, train_loss, val_map)).
    Requires at least one training example per class.
    """
    mask = train.labels >= 0
    x, y = train.features[mask], train.labels[mask]
    present = set(np.unique(y).tolist())
    missing = sorted(set(range(num_classes)) - present)
    if missing:
        raise EvaluationError(f"training data is missing classes: {missing}")
    mean, std = _standardize(x)
    x = (x - mean) / std
    vx = (val.features[val.labels >= 0] - mean) / std
    vy = val.labels[val.labels >= 0]

    model = ClassifierModel.create(x.shape[1], hidden_sizes, num_classes, rng)
    best_store, best_map, best_epoch = model.store.copy(), -1.0, 0
    history = []
    n = x.shape[0]
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            model.store.zero_grad()
            loss = ad.cross_entropy_with_logits(model.logits(x[idx]), y[idx])
            loss.backward()
            nn.adam_step(model.store, model.store.gradients(), lr)
            losses.append(float(ad.as_array(loss)))
        scores = model.predict_scores(vx)
        _, val_map = mean_average_precision(scores, vy)
        history.append((epoch, float(np.mean(losses)), val_map))
        if val_map > best_map:
            best_map, best_store, best_epoch = val_map, model.store.copy(), epoch
        elif epoch - best_epoch >= patience:
            break
    best = ClassifierModel(best_store, hidden_sizes, num_classes)
    return best, (mean, std), history


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Interpolation-free AP: mean of precision at each positive, ranked.

    Ties are broken by original index (stable sort on descending score).
    """
    order = np.argsort(-scores, kind="stable")
    hits = positives[order].astype(np.float64)
    n_pos = hits.sum()
    if n_pos == 0:
        raise EvaluationError("average precision needs at least one positive")
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float((precision_at * hits).sum() / n_pos)


def average_precision_reference(scores: np.ndarray,
                                positives: np.ndarray) -> float:
    """Loop-based precision/recall walk used as an independent oracle."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = 0
    total = 0.0
    n_pos = int(sum(1 for p in positives if p))
    if n_pos == 0:
        raise EvaluationError("average precision needs at least one positive")
    for rank, i in enumerate(order, start=1):
        if positives[i]:
            tp += 1
            total += tp / rank
    return total / n_pos


def mean_average_precision(scores: np.ndarray, labels: np.ndarray,
                           num_classes: int | None = None):
    """Per-class AP and their macro mean; zero-positive classes are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = scores.shape[1]
    per_class = {}
    for c in range(num_classes):
        positives = labels == c
        if not positives.any():
            continue
        per_class[c] = average_precision(scores[:, c], positives)
    if not per_class:
        raise EvaluationError("no class has positives")
    return per_class, float(np.mean(list(per_class.values())))


@dataclass
class SweepCell:
    fraction: float
    feature_set: str
    seed: int
    map_value: float
    per_class_ap: dict = field(default_factory=dict)


@dataclass
class SweepResult:
    cells: list = field(default_factory=list)

    def summary(self):
        """Rows of (fraction, feature_set, map mean, sample std, n)."""
        keys = sorted({(c.fraction, c.feature_set) for c in self.cells},
                      key=lambda k: (k[0], k[1]))
        rows = []
        for fraction, fs in keys:
            vals = [c.map_value for c in self.cells
                    if c.fraction == fraction and c.feature_set == fs]
            arr = np.asarray(vals)
            std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            rows.append((fraction, fs, float(arr.mean()), std, len(arr)))
        return rows


def _cell_seed(global_seed: int, fraction: float, feature_set: str,
               selection: int, run: int) -> int:
    # stable per-cell derivation so sweep cells are order-independent
    import hashlib
    key = f"{global_seed}|{fraction:.6f}|{feature_set}|{selection}|{run}"
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 31)


def run_fraction_sweep(m: TvaeModel | None, train: Dataset, val: Dataset,
                       test: Dataset, fractions, feature_sets,
                       ps: ProgramSet | None = None,
                       num_classes: int | None = None,
                       selections: int = 3, runs_per_selection: int = 3,
                       global_seed: int = 0,
                       classifier_kwargs: dict | None = None) -> SweepResult:
    """MAP per (fraction, feature set) over repeated selections and trainings.

    ``feature_sets`` entries are (name, base, include_embedding) triples.
    Each cell derives its own seeds, so cells are independent of execution
    order.
    """
    classifier_kwargs = classifier_kwargs or {}
    if num_classes is None:
        labels = dataset_labels(train)
        num_classes = int(labels[labels >= 0].max()) + 1
    result = SweepResult()
    feature_cache: dict = {}

    def features_for(name, base, emb, dataset, tag):
        key = (name, tag)
        if key not in feature_cache:
            feature_cache[key] = extract_features(
                m, dataset, base=base, ps=ps, include_embedding=emb)
        return feature_cache[key]

    for fraction in fractions:
        for name, base, emb in feature_sets:
            val_feats = features_for(name, base, emb, val, "val")
            test_feats = features_for(name, base, emb, test, "test")
            for sel in range(selections):
                sel_seed = _cell_seed(global_seed, fraction, name, sel, -1)
                subset = subsample_training_set(
                    train, fraction, np.random.default_rng(sel_seed))
                train_feats = extract_features(
                    m, subset, base=base, ps=ps, include_embedding=emb)
                for run in range(runs_per_selection):
                    run_seed = _cell_seed(global_seed, fraction, name, sel, run)
                    rng = np.random.default_rng(run_seed)
                    model, (mean, std), _ = train_classifier(
                        train_feats, val_feats, num_classes,
                        classifier_hidden_sizes(fraction), rng,
                        **classifier_kwargs)
                    scores = model.predict_scores(
                        (test_feats.features[test_feats.labels >= 0] - mean)
                        / std)
                    per_class, macro = mean_average_precision(
                        scores, test_feats.labels[test_feats.labels >= 0])
                    result.cells.append(SweepCell(
                        fraction, name, run_seed, macro, per_class))
    return result
