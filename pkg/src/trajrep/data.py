"""Trajectory data structures, ingestion, normalization, and windowing.

Coordinates are stored as float64 arrays of shape (T, A, K, 2) with the
stacked order (agent, keypoint, x-then-y). The on-disk formats are a
headered CSV (``source_id,frame,agent{a}_kp{k}_x,agent{a}_kp{k}_y,...,label``,
label -1 = unlabeled) and a binary cache tagged ``TRJ1``.
"""

from __future__ import annotations

import csv
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CACHE_MAGIC = b"TRJ1"


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """One recording: keypoints (T, A, K, 2), optional per-frame labels."""

    keypoints: np.ndarray
    source_id: str
    frame_rate: float = 30.0
    labels: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.ndim != 4 or kp.shape[3] != 2 or kp.shape[0] < 1:
            raise SchemaError(f"keypoints must be (T, A, K, 2), got {kp.shape}")
        object.__setattr__(self, "keypoints", kp)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (kp.shape[0],):
                raise SchemaError("labels must have exactly one entry per frame")
            object.__setattr__(self, "labels", lab)

    @property
    def num_frames(self) -> int:
        return self.keypoints.shape[0]

    @property
    def num_agents(self) -> int:
        return self.keypoints.shape[1]

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[2]

    @property
    def state_dim(self) -> int:
        """Dimension of the stacked per-frame state vector."""
        return 2 * self.num_agents * self.num_keypoints

    def stacked(self) -> np.ndarray:
        """(T, 2*A*K) view in (agent, keypoint, x-then-y) order."""
        return self.keypoints.reshape(self.num_frames, -1)


@dataclass(frozen=True)
class Window:
    """Fixed-length slice of a trajectory centered on one frame."""

    keypoints: np.ndarray  # (T, A, K, 2)
    center_index: int

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        object.__setattr__(self, "keypoints", kp)
        if self.center_index != kp.shape[0] // 2:
            raise ConfigurationError("center_index must be floor(T/2)")

    @property
    def length(self) -> int:
        return self.keypoints.shape[0]

    def stacked(self) -> np.ndarray:
        return self.keypoints.reshape(self.length, -1)


@dataclass(frozen=True)
class Dataset:
    """A set of trajectories plus the image dimensions for normalization."""

    trajectories: list[Trajectory]
    image_width: float
    image_height: float
    split: str = "train"

    def __post_init__(self):
        if not self.trajectories:
            raise SchemaError("Dataset requires at least one trajectory")
        shapes = {(t.num_agents, t.num_keypoints) for t in self.trajectories}
        if len(shapes) > 1:
            raise SchemaError(f"inconsistent agent/keypoint counts: {shapes}")

    @property
    def num_agents(self) -> int:
        return self.trajectories[0].num_agents

    @property
    def num_keypoints(self) -> int:
        return self.trajectories[0].num_keypoints

    @property
    def total_frames(self) -> int:
        return sum(t.num_frames for t in self.trajectories)

    @property
    def normalized(self) -> bool:
        return self.trajectories[0].normalized


_COL_RE = re.compile(r"^agent(\d+)_kp(\d+)_([xy])$")


def ingest_pose_file(path, image_dims: tuple[float, float],
                     frame_rate: float = 30.0, split: str = "train") -> Dataset:
    """Read the canonical headered CSV into a Dataset of raw pixel coords.

    Frames are grouped by source_id preserving order; frame indices must be
    contiguous per source. Rows with the wrong arity raise ParseError naming
    the (1-based) row number.
    """
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file")
        if header[0] != "source_id" or header[1] != "frame":
            raise SchemaError(f"{path}: header must start with source_id,frame")
        has_label = header[-1] == "label"
        coord_cols = header[2:-1] if has_label else header[2:]
        layout = []
        for col in coord_cols:
            m = _COL_RE.match(col)
            if not m:
                raise SchemaError(f"{path}: unrecognized column {col!r}")
            layout.append((int(m.group(1)), int(m.group(2)), m.group(3)))
        agents = {a for a, _, _ in layout}
        kps = {k for _, k, _ in layout}
        A, K = len(agents), len(kps)
        if len(coord_cols) != 2 * A * K:
            raise SchemaError(f"{path}: expected {2 * A * K} coordinate "
                              f"columns, found {len(coord_cols)}")
        expected = [(a, k, c) for a in range(A) for k in range(K) for c in "xy"]
        if layout != expected:
            raise SchemaError(f"{path}: coordinate columns must follow "
                              "(agent, keypoint, x-then-y) order")

        groups: dict[str, list] = {}
        frames: dict[str, list] = {}
        labels: dict[str, list] = {}
        ncols = len(header)
        for rownum, row in enumerate(reader, start=2):
            if len(row) != ncols:
                raise ParseError(f"{path}: row {rownum} has {len(row)} "
                                 f"columns, expected {ncols}")
            sid = row[0]
            try:
                frame = int(row[1])
                coords = [float(v) for v in (row[2:-1] if has_label else row[2:])]
            except ValueError as e:
                raise ParseError(f"{path}: row {rownum}: {e}") from None
            groups.setdefault(sid, []).append(coords)
            frames.setdefault(sid, []).append(frame)
            if has_label:
                labels.setdefault(sid, []).append(int(row[-1]))

    trajectories = []
    for sid in groups:
        fr = frames[sid]
        if fr != list(range(fr[0], fr[0] + len(fr))):
            raise ParseError(f"{path}: frames for source {sid!r} are not "
                             "contiguous")
        kp = np.asarray(groups[sid]).reshape(len(fr), A, K, 2)
        lab = np.asarray(labels[sid]) if has_label else None
        trajectories.append(Trajectory(kp, source_id=sid, frame_rate=frame_rate,
                                       labels=lab))
    return Dataset(trajectories, image_width=image_dims[0],
                   image_height=image_dims[1], split=split)


def write_pose_file(dataset: Dataset, path):
    """Inverse of ingest_pose_file; coordinates emitted via repr round-trip."""
    A, K = dataset.num_agents, dataset.num_keypoints
    has_label = any(t.labels is not None for t in dataset.trajectories)
    header = ["source_id", "frame"]
    header += [f"agent{a}_kp{k}_{c}" for a in range(A) for k in range(K)
               for c in "xy"]
    if has_label:
        header.append("label")
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for t in dataset.trajectories:
            flat = t.stacked()
            for i in range(t.num_frames):
                row = [t.source_id, str(i)] + [repr(float(v)) for v in flat[i]]
                if has_label:
                    row.append(str(int(t.labels[i]) if t.labels is not None else -1))
                writer.writerow(row)


def save_cache(dataset: Dataset, path):
    """Binary cache: magic TRJ1, little-endian dims header, row-major doubles."""
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<iiddi", dataset.num_agents, dataset.num_keypoints,
                            dataset.image_width, dataset.image_height,
                            len(dataset.trajectories)))
        f.write(struct.pack("<i", 1 if dataset.normalized else 0))
        split = dataset.split.encode()
        f.write(struct.pack("<i", len(split)))
        f.write(split)
        for t in dataset.trajectories:
            sid = t.source_id.encode()
            f.write(struct.pack("<i", len(sid)))
            f.write(sid)
            f.write(struct.pack("<idi", t.num_frames, t.frame_rate,
                                1 if t.labels is not None else 0))
            f.write(t.keypoints.astype("<f8").tobytes())
            if t.labels is not None:
                f.write(t.labels.astype("<i8").tobytes())


def load_cache(path) -> Dataset:
    with open(path, "rb") as f:
        if f.read(4) != CACHE_MAGIC:
            raise ParseError(f"{path}: bad cache magic")
        A, K, w, h, n = struct.unpack("<iiddi", f.read(28))
        (normalized,) = struct.unpack("<i", f.read(4))
        (slen,) = struct.unpack("<i", f.read(4))
        split = f.read(slen).decode()
        trajectories = []
        for _ in range(n):
            (slen,) = struct.unpack("<i", f.read(4))
            sid = f.read(slen).decode()
            T, rate, has_label = struct.unpack("<idi", f.read(16))
            kp = np.frombuffer(f.read(8 * T * A * K * 2), dtype="<f8")
            kp = kp.reshape(T, A, K, 2).copy()
            lab = None
            if has_label:
                lab = np.frombuffer(f.read(8 * T), dtype="<i8").copy()
            trajectories.append(Trajectory(kp, source_id=sid, frame_rate=rate,
                                           labels=lab, normalized=bool(normalized)))
    return Dataset(trajectories, image_width=w, image_height=h, split=split)


def normalize_trajectory(t: Trajectory, image_dims: tuple[float, float]) -> Trajectory:
    """Divide x by width and y by height. Rejects double-normalization."""
    w, h = image_dims
    if w <= 0 or h <= 0:
        raise NormalizationError(f"image dims must be positive, got {image_dims}")
    if t.normalized:
        raise NormalizationError(f"trajectory {t.source_id!r} already normalized")
    kp = t.keypoints / np.array([w, h])
    return replace(t, keypoints=kp, normalized=True)


def denormalize_trajectory(t: Trajectory, image_dims: tuple[float, float]) -> Trajectory:
    if not t.normalized:
        raise NormalizationError(f"trajectory {t.source_id!r} is not normalized")
    kp = t.keypoints * np.array(image_dims, dtype=np.float64)
    return replace(t, keypoints=kp, normalized=False)


def normalize_dataset(d: Dataset) -> Dataset:
    dims = (d.image_width, d.image_height)
    return replace(d, trajectories=[normalize_trajectory(t, dims)
                                    for t in d.trajectories])


def window_array(t: Trajectory, T: int = 21) -> np.ndarray:
    """All centered windows as one array (num_frames, T, A, K, 2).

    Edges are padded by repeating the boundary frame, so the output count
    always equals the trajectory length.
    """
    if T % 2 == 0:
        raise ConfigurationError(f"window length must be odd, got {T}")
    half = T // 2
    padded = np.pad(t.keypoints, ((half, half), (0, 0), (0, 0), (0, 0)),
                    mode="edge")
    idx = np.arange(t.num_frames)[:, None] + np.arange(T)[None, :]
    return padded[idx]


def extract_windows(t: Trajectory, T: int = 21) -> list[Window]:
    """One Window per frame of the trajectory (edge-repeat padding)."""
    arr = window_array(t, T)
    return [Window(arr[i], center_index=T // 2) for i in range(arr.shape[0])]


def dataset_windows(d: Dataset, T: int = 21) -> np.ndarray:
    """Stacked windows for every frame of every trajectory: (N, T, A, K, 2)."""
    return np.concatenate([window_array(t, T) for t in d.trajectories], axis=0)


def dataset_labels(d: Dataset) -> np.ndarray:
    """Per-frame labels concatenated across trajectories (-1 where absent)."""
    parts = []
    for t in d.trajectories:
        parts.append(t.labels if t.labels is not None
                     else np.full(t.num_frames, -1, dtype=np.int64))
    return np.concatenate(parts)


def split_by_source(d: Dataset, fractions=(0.7, 0.15, 0.15),
                    rng: np.random.Generator | None = None):
    """Partition trajectories into train/val/test Datasets, disjoint by source."""
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ConfigurationError("fractions must be three values summing to 1")
    order = np.arange(len(d.trajectories))
    if rng is not None:
        rng.shuffle(order)
    n = len(order)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n))) if n - n_train >= 2 else 0
    cut1, cut2 = n_train, n_train + n_val
    groups = (order[:cut1], order[cut1:cut2], order[cut2:])
    out = []
    for tag, idxs in zip(("train", "val", "test"), groups):
        trajs = [d.trajectories[i] for i in idxs]
        out.append(Dataset(trajs, d.image_width, d.image_height, split=tag)
                   if trajs else None)
    return tuple(out)
