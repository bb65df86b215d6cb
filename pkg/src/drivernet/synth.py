"""Synthetic driver scenarios: Markov behaviour traces, feature emissions, glyph frames, labels.

Each clip draws from its own generator seeded by ``(seed, candidate_index)``,
so clips can be produced in any order or in parallel with identical results.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .feature import FeatureStreams

FPS = 10
N_VIEWS = 3

# readiness rule constants
WINDOW = 16
YAW_LIMIT = 20.0
PITCH_LIMIT = 15.0
UPRIGHT_LIMIT = float(np.tan(np.radians(15.0)))
MIN_FRACTION = 0.8
WHEEL_REGION = (0.25, 0.30, 0.75, 0.60)  # x_min, y_min, x_max, y_max

READY, NOT_READY = 1, 0
LABEL_NAMES = {READY: "ready", NOT_READY: "not_ready"}
LABEL_VALUES = {v: k for k, v in LABEL_NAMES.items()}

# COCO-17 keypoint indices used by the rule
L_SHOULDER, R_SHOULDER, L_HIP, R_HIP = 5, 6, 11, 12


class BehaviorState(enum.IntEnum):
    attentive = 0
    mirror_check = 1
    phone_text = 2
    phone_call = 3
    reach_object = 4
    lean_rest = 5


@dataclass(frozen=True)
class Emission:
    yaw: tuple[float, float]
    pitch: tuple[float, float]
    roll: tuple[float, float]
    lean: tuple[float, float]  # torso lean in degrees, positive = forward
    left_hand: dict = field(default_factory=dict)  # region -> probability
    right_hand: dict = field(default_factory=dict)


# hand region centres in the over-shoulder view
HAND_REGIONS = {
    "wheel_left": (0.38, 0.45),
    "wheel_right": (0.62, 0.45),
    "lap": (0.50, 0.88),
    "phone": (0.50, 0.76),
    "ear": (0.15, 0.15),
    "console": (0.86, 0.72),
}

_ATTENTIVE_HEAD = dict(yaw=(0.0, 5.0), pitch=(-2.0, 4.0), roll=(0.0, 3.0))
_UPRIGHT = (0.0, 3.0)
_ON_WHEEL_L = {"wheel_left": 0.97, "lap": 0.03}
_ON_WHEEL_R = {"wheel_right": 0.97, "console": 0.03}

# States that break exactly one clause copy the other modalities from
# `attentive`, which caps what any single stream can tell about the label.
EMISSIONS = {
    BehaviorState.attentive: Emission(**_ATTENTIVE_HEAD, lean=_UPRIGHT,
                                      left_hand=_ON_WHEEL_L, right_hand=_ON_WHEEL_R),
    BehaviorState.mirror_check: Emission(yaw=(45.0, 6.0), pitch=(0.0, 4.0), roll=(0.0, 3.0),
                                         lean=_UPRIGHT, left_hand=_ON_WHEEL_L,
                                         right_hand=_ON_WHEEL_R),
    BehaviorState.phone_text: Emission(yaw=(0.0, 6.0), pitch=(-35.0, 5.0), roll=(0.0, 3.0),
                                       lean=_UPRIGHT, left_hand={"phone": 1.0},
                                       right_hand={"phone": 1.0}),
    BehaviorState.phone_call: Emission(**_ATTENTIVE_HEAD, lean=_UPRIGHT,
                                       left_hand={"ear": 1.0}, right_hand={"lap": 1.0}),
    BehaviorState.reach_object: Emission(yaw=(50.0, 8.0), pitch=(-20.0, 6.0), roll=(10.0, 4.0),
                                         lean=(28.0, 4.0), left_hand=_ON_WHEEL_L,
                                         right_hand={"console": 1.0}),
    BehaviorState.lean_rest: Emission(**_ATTENTIVE_HEAD, lean=(-25.0, 4.0),
                                      left_hand=_ON_WHEEL_L, right_hand=_ON_WHEEL_R),
}

INITIAL = np.array([0.5, 0.1, 0.1, 0.1, 0.1, 0.1])
STAY = 0.92


def transition_matrix() -> np.ndarray:
    """Dwell-biased transitions; half of the leaving mass returns to attentive."""
    n = len(BehaviorState)
    m = np.zeros((n, n))
    for i in range(n):
        m[i, i] = STAY
        others = [j for j in range(n) if j != i]
        leave = 1.0 - STAY
        if i == BehaviorState.attentive:
            for j in others:
                m[i, j] = leave / len(others)
        else:
            m[i, BehaviorState.attentive] = leave / 2
            for j in others:
                if j != BehaviorState.attentive:
                    m[i, j] = leave / 2 / (len(others) - 1)
    return m


# ---------------------------------------------------------------------------
# readiness rule


def head_clause(head_angles: np.ndarray) -> np.ndarray:
    return (np.abs(head_angles[..., 0]) <= YAW_LIMIT) & (np.abs(head_angles[..., 1]) <= PITCH_LIMIT)


def hand_clause(hand_boxes: np.ndarray) -> np.ndarray:
    boxes = hand_boxes.reshape(hand_boxes.shape[:-1] + (2, 4))
    cx = (boxes[..., 0] + boxes[..., 2]) / 2
    cy = (boxes[..., 1] + boxes[..., 3]) / 2
    x0, y0, x1, y1 = WHEEL_REGION
    inside = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
    return inside.any(axis=-1)


def upright_metric(body_pose: np.ndarray) -> np.ndarray:
    """|dx| / |dy| between the shoulder and hip midpoints (tangent of torso lean)."""
    kp = body_pose.reshape(body_pose.shape[:-1] + (17, 2))
    sh = (kp[..., L_SHOULDER, :] + kp[..., R_SHOULDER, :]) / 2
    hp = (kp[..., L_HIP, :] + kp[..., R_HIP, :]) / 2
    dx = np.abs(sh[..., 0] - hp[..., 0])
    dy = np.maximum(np.abs(sh[..., 1] - hp[..., 1]), 1e-9)
    return dx / dy


def body_clause(body_pose: np.ndarray) -> np.ndarray:
    return upright_metric(body_pose) <= UPRIGHT_LIMIT


def clause_fractions(streams: FeatureStreams, window: int = WINDOW) -> dict[str, np.ndarray]:
    n = streams.n_frames
    if n < window:
        raise ValueError(f"readiness rule needs at least {window} frames, got {n}")
    sl = slice(n - window, n)
    return {
        "head": head_clause(streams.head_angles[..., sl, :]).mean(axis=-1),
        "hand": hand_clause(streams.hand_boxes[..., sl, :]).mean(axis=-1),
        "body": body_clause(streams.body_pose[..., sl, :]).mean(axis=-1),
    }


def readiness_rule(streams: FeatureStreams, window: int = WINDOW):
    """1 (ready) iff every clause holds in at least 80% of the last ``window`` frames.

    Works on a single clip (returns int) or a batch (returns an int array).
    """
    frac = clause_fractions(streams, window)
    # counts avoid float rounding at the inclusive boundary
    need = int(np.ceil(MIN_FRACTION * window - 1e-9))
    ok = np.ones(np.shape(frac["head"]), dtype=bool)
    for f in frac.values():
        ok &= np.rint(f * window) >= need
    out = ok.astype(np.int64)
    return int(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# emissions


def _keypoints(lean_deg: float, rng: np.random.Generator) -> np.ndarray:
    """17 side-view keypoints for a torso leaning by ``lean_deg``; arms are occluded noise."""
    hip = np.array([0.45, 0.68])
    torso = 0.30
    t = np.radians(lean_deg)
    shoulder = hip + torso * np.array([np.sin(t), -np.cos(t)])
    head = shoulder + np.array([0.05, -0.11])
    kp = np.zeros((17, 2))
    kp[0] = head + [0.04, 0.0]
    kp[1] = head + [0.02, -0.02]
    kp[2] = head + [0.03, -0.02]
    kp[3] = head + [-0.02, -0.01]
    kp[4] = head + [-0.01, -0.01]
    kp[5] = shoulder + [-0.01, 0.0]
    kp[6] = shoulder + [0.01, 0.0]
    kp[7] = hip + [0.10, -0.15] + rng.normal(0, 0.03, 2)
    kp[8] = hip + [0.12, -0.14] + rng.normal(0, 0.03, 2)
    kp[9] = hip + [0.20, -0.12] + rng.normal(0, 0.04, 2)
    kp[10] = hip + [0.22, -0.11] + rng.normal(0, 0.04, 2)
    kp[11] = hip + [-0.01, 0.0]
    kp[12] = hip + [0.01, 0.0]
    kp[13] = hip + [0.20, 0.02]
    kp[14] = hip + [0.21, 0.03]
    kp[15] = hip + [0.30, 0.22]
    kp[16] = hip + [0.31, 0.23]
    kp += rng.normal(0, 0.006, kp.shape)
    return np.clip(kp, 0.0, 1.0).reshape(-1)


def _hand_box(region_probs: dict, rng: np.random.Generator) -> np.ndarray:
    names = list(region_probs)
    region = names[rng.choice(len(names), p=np.array([region_probs[k] for k in names]))]
    cx, cy = np.array(HAND_REGIONS[region]) + rng.normal(0, 0.025, 2)
    w, h = rng.normal(0.13, 0.015, 2)
    box = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    return np.clip(box, 0.0, 1.0)


def _objects(state: BehaviorState, hands: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Detected objects near the hands, as ``[M, 2, 2]`` corner pairs."""
    boxes = []
    if state in (BehaviorState.phone_text, BehaviorState.phone_call):
        lx = hands[:4] if state == BehaviorState.phone_call else hands[4:]
        c = np.array([(lx[0] + lx[2]) / 2, (lx[1] + lx[3]) / 2]) + rng.normal(0, 0.01, 2)
        boxes.append([[c[0] - 0.03, c[1] - 0.05], [c[0] + 0.03, c[1] + 0.05]])
    if rng.random() < 0.15:
        c = rng.uniform(0.1, 0.9, 2)
        boxes.append([[c[0] - 0.04, c[1] - 0.04], [c[0] + 0.04, c[1] + 0.04]])
    return np.clip(np.array(boxes, dtype=np.float64).reshape(-1, 2, 2), 0.0, 1.0)


def sample_states(n_frames: int, rng: np.random.Generator) -> np.ndarray:
    m = transition_matrix()
    states = np.empty(n_frames, dtype=np.int64)
    states[0] = rng.choice(len(INITIAL), p=INITIAL)
    for t in range(1, n_frames):
        states[t] = rng.choice(m.shape[0], p=m[states[t - 1]])
    return states


def emit_streams(states: np.ndarray, rng: np.random.Generator) -> FeatureStreams:
    n = len(states)
    head = np.zeros((n, 3))
    body = np.zeros((n, 34))
    hands = np.zeros((n, 8))
    objects = []
    yaw_sign = 1.0 if rng.random() < 0.5 else -1.0
    for t, s in enumerate(states):
        e = EMISSIONS[BehaviorState(s)]
        head[t] = [
            yaw_sign * rng.normal(*e.yaw),
            rng.normal(*e.pitch),
            rng.normal(*e.roll),
        ]
        body[t] = _keypoints(rng.normal(*e.lean), rng)
        hands[t, :4] = _hand_box(e.left_hand, rng)
        hands[t, 4:] = _hand_box(e.right_hand, rng)
        objects.append(_objects(BehaviorState(s), hands[t], rng))
    head = np.clip(head, -180.0, 180.0)
    return FeatureStreams(head, body, hands, objects=objects, valid=np.ones(n, dtype=bool))


# ---------------------------------------------------------------------------
# glyph frames


def _paint(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> None:
    """Mark pixels in ``img [3, W, H]``: mask, then x- and y-coded intensity."""
    w, h = img.shape[1:]
    px = np.clip((xs * w).astype(int), 0, w - 1)
    py = np.clip((ys * h).astype(int), 0, h - 1)
    img[0, px, py] = 1.0
    img[1, px, py] = (px + 0.5) / w
    img[2, px, py] = (py + 0.5) / h


def render_frames(streams: FeatureStreams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Three glyph views per frame: ``[V, N, 3, W, H]``.

    View 0 draws a bar from the image centre along the head direction, view 1
    draws the body keypoints as dots, view 2 draws the two hand boxes.
    """
    n = streams.n_frames
    frames = np.zeros((N_VIEWS, n, 3, size, size))
    steps = np.linspace(0.0, 1.0, 3 * size)
    for t in range(n):
        yaw, pitch, roll = np.radians(streams.head_angles[t])
        end = np.array([0.5 + 0.42 * np.sin(yaw), 0.5 - 0.42 * np.sin(pitch)])
        _paint(frames[0, t], 0.5 + steps * (end[0] - 0.5), 0.5 + steps * (end[1] - 0.5))
        kp = streams.body_pose[t].reshape(17, 2)
        _paint(frames[1, t], kp[:, 0], kp[:, 1])
        for box in streams.hand_boxes[t].reshape(2, 4):
            x0, y0, x1, y1 = box
            edge = np.linspace(0.0, 1.0, 2 * size)
            xs = np.concatenate([x0 + edge * (x1 - x0), x0 + edge * (x1 - x0),
                                 np.full_like(edge, x0), np.full_like(edge, x1)])
            ys = np.concatenate([np.full_like(edge, y0), np.full_like(edge, y1),
                                 y0 + edge * (y1 - y0), y0 + edge * (y1 - y0)])
            _paint(frames[2, t], xs, ys)
    frames += rng.normal(0.0, 0.02, frames.shape)
    return frames


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ClipSample:
    clip_id: str
    clips: np.ndarray | None  # [V, N, 3, W, H]
    streams: FeatureStreams
    label: int
    states: np.ndarray
    fps: int = FPS

    @property
    def n_frames(self) -> int:
        return self.streams.n_frames


@dataclass
class Dataset:
    """A batch of clips held in memory; ``clips`` is ``[K, V, N, 3, W, H]`` or None."""

    clip_ids: list[str]
    clips: np.ndarray | None
    streams: FeatureStreams
    labels: np.ndarray
    states: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clip_ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        s = self.streams
        objects = None if s.objects is None else [s.objects[i] for i in idx]
        return Dataset(
            [self.clip_ids[i] for i in idx],
            None if self.clips is None else self.clips[idx],
            FeatureStreams(s.head_angles[idx], s.body_pose[idx], s.hand_boxes[idx],
                           objects=objects, normalized=s.normalized),
            self.labels[idx],
            self.states[idx],
            dict(self.meta),
        )

    def sample(self, i: int) -> ClipSample:
        s = self.streams
        return ClipSample(
            self.clip_ids[i],
            None if self.clips is None else self.clips[i],
            FeatureStreams(s.head_angles[i], s.body_pose[i], s.hand_boxes[i],
                           objects=None if s.objects is None else s.objects[i]),
            int(self.labels[i]),
            self.states[i],
        )

    @staticmethod
    def from_samples(samples: list[ClipSample], meta: dict | None = None) -> "Dataset":
        clips = None
        if all(s.clips is not None for s in samples):
            clips = np.stack([s.clips for s in samples])
        return Dataset(
            [s.clip_id for s in samples],
            clips,
            FeatureStreams.stack([s.streams for s in samples]),
            np.array([s.label for s in samples], dtype=np.int64),
            np.stack([s.states for s in samples]),
            meta or {},
        )


def clip_rng(seed: int, index: int, part: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, part])


def make_clip(seed: int, index: int, n_frames: int = WINDOW, frame_size: int = 32,
              render: bool = True) -> ClipSample:
    rng = clip_rng(seed, index, 0)
    states = sample_states(n_frames, rng)
    streams = emit_streams(states, rng)
    clips = render_frames(streams, frame_size, clip_rng(seed, index, 1)) if render else None
    return ClipSample(f"clip_{index:05d}", clips, streams, readiness_rule(streams), states)


def synthesize(count: int, seed: int, n_frames: int = WINDOW, frame_size: int = 32,
               render: bool = True) -> Dataset:
    """Balanced in-memory dataset: candidates are drawn in index order and kept while
    their label's quota (half the count, rounded up for ready) is open."""
    if count < 2:
        raise ValueError("a dataset needs at least 2 clips")
    quota = {READY: (count + 1) // 2, NOT_READY: count // 2}
    kept = []
    index = 0
    while quota[READY] or quota[NOT_READY]:
        c = make_clip(seed, index, n_frames, frame_size, render=False)
        if quota[c.label]:
            quota[c.label] -= 1
            kept.append(index)
        index += 1
        if index > 200 * count:
            raise RuntimeError("rejection sampling failed to balance labels")
    samples = [make_clip(seed, i, n_frames, frame_size, render=render) for i in kept]
    meta = {"seed": seed, "count": count, "n_frames": n_frames, "frame_size": frame_size,
            "fps": FPS, "candidates": index}
    return Dataset.from_samples(samples, meta)


def clause_ceiling(dataset: Dataset, clause: str) -> float:
    """Best accuracy of any rule that only knows whether ``clause`` holds (>= 80%).

    Clips failing the clause are surely not ready; among the rest the best
    guess is the majority label.
    """
    frac = clause_fractions(dataset.streams)[clause]
    ok = np.rint(frac * WINDOW) >= int(np.ceil(MIN_FRACTION * WINDOW - 1e-9))
    labels = dataset.labels
    correct = np.sum(~ok & (labels == NOT_READY))
    rest = labels[ok]
    correct += max(np.sum(rest == READY), np.sum(rest == NOT_READY))
    return float(correct / len(labels))
