"""Expert-programmed behavior attributes and their three-class discretizers.

Each program is a pure function of a fixed-length window. Evaluators are
written against the autodiff ops, so they run on plain (B, T, A, K, 2)
arrays and on Tensors (the differentiable path used by the consistency
loss). All angle outputs are folded to absolute magnitude in [0, pi] so
every built-in program is invariant to translation, rotation, and
reflection of the keypoints.

Mouse layout (7 keypoints per agent): nose, left ear, right ear, neck,
left hip, right hip, tail base. Mouse heading is the neck->nose direction;
the mouse centroid is the mean of all 7 keypoints.

Fly layout (6 slots per agent, all genuine points so geometric transforms
act on them directly): centroid, head of the body ellipse, tail of the
body ellipse, a side point at the tip of the minor axis, left wingtip,
right wingtip. Heading is centroid->head; major/minor axis lengths are
recovered as twice the head/side distances from the centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, Window, dataset_windows

# mouse keypoint indices
NOSE, EAR_L, EAR_R, NECK, HIP_L, HIP_R, TAIL = range(7)
# fly slot indices
F_CENTROID, F_HEAD, F_TAIL, F_SIDE, F_WING_L, F_WING_R = range(6)

MOUSE_KEYPOINTS = 7
FLY_KEYPOINTS = 6


class RegistryError(KeyError):
    pass


class DegenerateDistributionError(ValueError):
    pass


def _dist(a, b):
    d = ad.sub(a, b)
    return ad.safe_sqrt(ad.tsum(ad.mul(d, d), axis=-1))


def _angle_of(v):
    return ad.atan2(v[..., 1], v[..., 0])


def _fold(angle):
    """Absolute wrapped angle difference, in [0, pi]."""
    return ad.absolute(ad.wrap_angle(angle))


def _mouse_centroid(kp, t, agent):
    return ad.tmean(kp[:, t, agent], axis=1)  # mean over keypoints -> (B, 2)


def _mouse_heading(kp, t, agent):
    v = ad.sub(kp[:, t, agent, NOSE], kp[:, t, agent, NECK])
    return _angle_of(v)


def _fly_heading(kp, t, agent):
    v = ad.sub(kp[:, t, agent, F_HEAD], kp[:, t, agent, F_CENTROID])
    return _angle_of(v)


@dataclass(frozen=True)
class AttributeProgram:
    """A deterministic scalar attribute of a window.

    ``compute`` maps a batch (B, T, A, K, 2) to (B,) values; frame-scoped
    programs read the center frame, window-scoped ones (speeds, movements)
    use consecutive-frame differences at the center.
    """

    id: str
    domain: str  # mouse | fly
    scope: str  # frame | window
    output: str  # angle | length | speed | ratio
    compute: callable = field(compare=False)
    degenerate: callable | None = field(default=None, compare=False)


def _center(kp):
    return ad.as_array(kp).shape[1] // 2


# ---------------------------------------------------------------------------
# mouse programs

def _facing_angle_mouse(agent, other):
    def compute(kp):
        c = _center(kp)
        d = ad.sub(_mouse_centroid(kp, c, other), _mouse_centroid(kp, c, agent))
        theta = _angle_of(d)
        return _fold(ad.sub(theta, _mouse_heading(kp, c, agent)))

    def degenerate(kp):
        c = kp.shape[1] // 2
        nose_neck = kp[:, c, agent, NOSE] - kp[:, c, agent, NECK]
        return bool(np.any(np.all(np.abs(nose_neck) < 1e-12, axis=-1)))

    return compute, degenerate


def _speed_mouse(agent):
    def compute(kp):
        c = _center(kp)
        return _dist(_mouse_centroid(kp, c, agent),
                     _mouse_centroid(kp, c - 1, agent))

    return compute


def _nose_nose(kp):
    c = _center(kp)
    return _dist(kp[:, c, 0, NOSE], kp[:, c, 1, NOSE])


def _nose_tail(kp):
    c = _center(kp)
    return _dist(kp[:, c, 0, NOSE], kp[:, c, 1, TAIL])


def _head_body_angle(agent):
    def compute(kp):
        c = _center(kp)
        head = ad.sub(kp[:, c, agent, NOSE], kp[:, c, agent, NECK])
        body = ad.sub(kp[:, c, agent, TAIL], kp[:, c, agent, NECK])
        return _fold(ad.sub(_angle_of(head), _angle_of(body)))

    def degenerate(kp):
        c = kp.shape[1] // 2
        head = kp[:, c, agent, NOSE] - kp[:, c, agent, NECK]
        body = kp[:, c, agent, TAIL] - kp[:, c, agent, NECK]
        deg = (np.all(np.abs(head) < 1e-12, axis=-1)
               | np.all(np.abs(body) < 1e-12, axis=-1))
        return bool(np.any(deg))

    return compute, degenerate


def _nose_movement(agent):
    def compute(kp):
        c = _center(kp)
        v_nose = ad.sub(kp[:, c, agent, NOSE], kp[:, c - 1, agent, NOSE])
        v_cent = ad.sub(_mouse_centroid(kp, c, agent),
                        _mouse_centroid(kp, c - 1, agent))
        d = ad.sub(v_nose, v_cent)
        return ad.safe_sqrt(ad.tsum(ad.mul(d, d), axis=-1))

    return compute


# ---------------------------------------------------------------------------
# fly programs

def _speed_fly(agent):
    def compute(kp):
        c = _center(kp)
        return _dist(kp[:, c, agent, F_CENTROID], kp[:, c - 1, agent, F_CENTROID])

    return compute


def _centroid_distance(kp):
    c = _center(kp)
    return _dist(kp[:, c, 0, F_CENTROID], kp[:, c, 1, F_CENTROID])


def _angular_speed(agent):
    def compute(kp):
        c = _center(kp)
        return _fold(ad.sub(_fly_heading(kp, c, agent),
                            _fly_heading(kp, c - 1, agent)))

    return compute


def _facing_angle_fly(agent, other):
    def compute(kp):
        c = _center(kp)
        d = ad.sub(kp[:, c, other, F_CENTROID], kp[:, c, agent, F_CENTROID])
        return _fold(ad.sub(_angle_of(d), _fly_heading(kp, c, agent)))

    return compute


def _wing_angle(agent, which):
    def compute(kp):
        c = _center(kp)
        cent = kp[:, c, agent, F_CENTROID]
        back = _angle_of(ad.sub(kp[:, c, agent, F_TAIL], cent))
        left = _fold(ad.sub(_angle_of(ad.sub(kp[:, c, agent, F_WING_L], cent)), back))
        right = _fold(ad.sub(_angle_of(ad.sub(kp[:, c, agent, F_WING_R], cent)), back))
        return ad.minimum(left, right) if which == "min" else ad.maximum(left, right)

    return compute


def _axis_ratio(agent):
    def compute(kp):
        c = _center(kp)
        cent = kp[:, c, agent, F_CENTROID]
        major = _dist(kp[:, c, agent, F_HEAD], cent)
        minor = _dist(kp[:, c, agent, F_SIDE], cent)
        return ad.div(major, ad.add(minor, 1e-12))

    return compute


def _build_registry() -> dict[str, AttributeProgram]:
    progs = []
    for agent, tag in ((0, "m1"), (1, "m2")):
        other = 1 - agent
        fa, fa_deg = _facing_angle_mouse(agent, other)
        hb, hb_deg = _head_body_angle(agent)
        progs += [
            AttributeProgram(f"facing_angle_{tag}", "mouse", "frame", "angle",
                             fa, fa_deg),
            AttributeProgram(f"speed_{tag}", "mouse", "window", "speed",
                             _speed_mouse(agent)),
            AttributeProgram(f"head_body_angle_{tag}", "mouse", "frame",
                             "angle", hb, hb_deg),
            AttributeProgram(f"nose_movement_{tag}", "mouse", "window",
                             "speed", _nose_movement(agent)),
        ]
    progs += [
        AttributeProgram("nose_nose_distance", "mouse", "frame", "length",
                         _nose_nose),
        AttributeProgram("nose_tail_distance", "mouse", "frame", "length",
                         _nose_tail),
    ]
    for agent, tag in ((0, "f1"), (1, "f2")):
        other = 1 - agent
        progs += [
            AttributeProgram(f"speed_{tag}", "fly", "window", "speed",
                             _speed_fly(agent)),
            AttributeProgram(f"angular_speed_{tag}", "fly", "window", "angle",
                             _angular_speed(agent)),
            AttributeProgram(f"facing_angle_{tag}", "fly", "frame", "angle",
                             _facing_angle_fly(agent, other)),
            AttributeProgram(f"min_wing_angle_{tag}", "fly", "frame", "angle",
                             _wing_angle(agent, "min")),
            AttributeProgram(f"max_wing_angle_{tag}", "fly", "frame", "angle",
                             _wing_angle(agent, "max")),
            AttributeProgram(f"axis_ratio_{tag}", "fly", "frame", "ratio",
                             _axis_ratio(agent)),
        ]
    progs.append(AttributeProgram("centroid_distance_flies", "fly", "frame",
                                  "length", _centroid_distance))
    return {p.id: p for p in progs}


REGISTRY: dict[str, AttributeProgram] = _build_registry()

ALL_MOUSE = [
    "facing_angle_m1", "facing_angle_m2", "speed_m1", "speed_m2",
    "nose_nose_distance", "nose_tail_distance",
    "head_body_angle_m1", "head_body_angle_m2",
    "nose_movement_m1", "nose_movement_m2",
]
ALL_FLY = [
    "speed_f1", "speed_f2", "centroid_distance_flies",
    "angular_speed_f1", "angular_speed_f2",
    "facing_angle_f1", "facing_angle_f2",
    "min_wing_angle_f1", "min_wing_angle_f2",
    "max_wing_angle_f1", "max_wing_angle_f2",
    "axis_ratio_f1", "axis_ratio_f2",
]
ALIASES = {"all_mouse": ALL_MOUSE, "all_fly": ALL_FLY}


def get_program(prog_id: str) -> AttributeProgram:
    try:
        return REGISTRY[prog_id]
    except KeyError:
        raise RegistryError(f"unknown program id: {prog_id!r}") from None


def resolve_programs(spec) -> list[AttributeProgram]:
    """Resolve a comma-separated string or list of ids/aliases."""
    if isinstance(spec, str):
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    ids = []
    for item in spec:
        ids.extend(ALIASES.get(item, [item]))
    return [get_program(i) for i in ids]


def evaluate_program(p: AttributeProgram, w: Window,
                     diagnostics: list | None = None) -> float:
    """Evaluate one program on one window.

    Degenerate geometry (coincident keypoints where an angle is required)
    yields the defined fallback 0.0 and, when a ``diagnostics`` list is
    given, appends the program id to it.
    """
    kp = w.keypoints[None]
    if p.degenerate is not None and p.degenerate(kp):
        if diagnostics is not None:
            diagnostics.append(p.id)
        return 0.0
    return float(ad.as_array(p.compute(kp))[0])


@dataclass(frozen=True)
class Discretizer:
    """Two ascending thresholds splitting values into classes {0, 1, 2}."""

    t1: float
    t2: float

    def __post_init__(self):
        if not self.t1 < self.t2:
            raise DegenerateDistributionError(
                f"thresholds must ascend, got ({self.t1}, {self.t2})")

    def discretize(self, v):
        """v <= t1 -> 0; t1 < v <= t2 -> 1; v > t2 -> 2."""
        v = np.asarray(v, dtype=np.float64)
        return ((v > self.t1).astype(np.int64) + (v > self.t2).astype(np.int64))


def fit_discretizer_values(values: np.ndarray) -> Discretizer:
    """Thresholds at the 33.33rd / 66.67th linear-interpolated percentiles."""
    values = np.asarray(values, dtype=np.float64)
    if len(np.unique(values)) < 3:
        raise DegenerateDistributionError(
            "need at least 3 distinct attribute values to fit a discretizer")
    t1, t2 = np.percentile(values, [100.0 / 3.0, 200.0 / 3.0])
    if not t1 < t2:
        raise DegenerateDistributionError(
            "degenerate distribution: percentile thresholds coincide")
    return Discretizer(float(t1), float(t2))


def fit_discretizer(p: AttributeProgram, sample: Dataset,
                    window_length: int = 21) -> Discretizer:
    kp = dataset_windows(sample, window_length)
    values = ad.as_array(p.compute(kp))
    if values.size < 100:
        raise DegenerateDistributionError(
            f"need >= 100 attribute values to fit, got {values.size}")
    return fit_discretizer_values(values)


@dataclass
class ProgramSet:
    """Ordered programs plus (optionally fitted) per-program discretizers."""

    programs: list[AttributeProgram]
    discretizers: dict[str, Discretizer] = field(default_factory=dict)

    def __post_init__(self):
        if not self.programs:
            raise ValueError("ProgramSet requires at least one program")
        ids = [p.id for p in self.programs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate program ids: {ids}")

    @property
    def size(self) -> int:
        return len(self.programs)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.programs]

    def fit(self, sample: Dataset, window_length: int = 21):
        kp = dataset_windows(sample, window_length)
        values = self.attribute_matrix(kp)
        if values.shape[0] < 100:
            raise DegenerateDistributionError(
                f"need >= 100 attribute values to fit, got {values.shape[0]}")
        for j, p in enumerate(self.programs):
            self.discretizers[p.id] = fit_discretizer_values(values[:, j])
        return self

    def attribute_matrix(self, kp):
        """(B, M) continuous attributes; Tensor in, Tensor out."""
        cols = [p.compute(kp) for p in self.programs]
        if any(ad.is_tensor(c) for c in cols):
            return ad.stack(cols, axis=1)
        return np.stack(cols, axis=1)

    def class_matrix(self, values: np.ndarray) -> np.ndarray:
        """Discretize a (B, M) attribute matrix into (B, M) class indices."""
        out = np.empty(values.shape, dtype=np.int64)
        for j, p in enumerate(self.programs):
            d = self.discretizers.get(p.id)
            if d is None:
                raise RegistryError(f"discretizer not fitted for {p.id!r}")
            out[:, j] = d.discretize(values[:, j])
        return out


def evaluate_program_set(ps: ProgramSet, w: Window):
    """Length-M continuous vector and length-M class vector for one window."""
    values = ad.as_array(ps.attribute_matrix(w.keypoints[None]))
    classes = ps.class_matrix(values)
    return values[0], classes[0]
