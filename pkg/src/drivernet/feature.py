"""Feature block: head-angle, body-pose and hand-box streams to per-frame feature embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .config import STREAM_DIMS, ConfigError, ModelConfig
from .context import block_rng
from .layers import GRU, Linear, Module, MultiHeadAttention
from .tensor import Tensor

STD_FLOOR = 1e-6
_FIELDS = {"body": "body_pose", "head": "head_angles", "hand": "hand_boxes"}


class StreamError(ValueError):
    pass


@dataclass
class FeatureStreams:
    """Per-frame extractor outputs; arrays are ``[..., N, d]``.

    ``hand_boxes`` holds the left box then the right box, each as
    ``x_t, y_t, x_b, y_b`` in normalised image coordinates. ``objects`` (one
    ``[M, 2, 2]`` array per frame, per clip when batched) and ``valid`` are
    carried for ingestion but never reach the model.
    """

    head_angles: np.ndarray
    body_pose: np.ndarray
    hand_boxes: np.ndarray
    objects: list | None = None
    valid: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        for name in ("head_angles", "body_pose", "hand_boxes"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        lead = {a.shape[:-1] for a in (self.head_angles, self.body_pose, self.hand_boxes)}
        if len(lead) != 1:
            raise StreamError(f"streams disagree on leading extents: {sorted(lead)}")
        for key, attr in _FIELDS.items():
            if getattr(self, attr).shape[-1] != STREAM_DIMS[key]:
                raise StreamError(
                    f"{attr} must have {STREAM_DIMS[key]} features, got {getattr(self, attr).shape}"
                )

    @property
    def n_frames(self) -> int:
        return self.head_angles.shape[-2]

    def modality(self, name: str) -> np.ndarray:
        return getattr(self, _FIELDS[name])

    def validate(self) -> None:
        """Raise StreamError unless raw values respect the extractor contracts."""
        if self.normalized:
            raise StreamError("validation applies to raw, un-normalised streams")
        if np.any(np.abs(self.head_angles) > 180):
            raise StreamError("head angles must lie in [-180, 180] degrees")
        for attr in ("body_pose", "hand_boxes"):
            a = getattr(self, attr)
            if np.any((a < 0) | (a > 1)):
                raise StreamError(f"{attr} coordinates must lie in [0, 1]")
        boxes = self.hand_boxes.reshape(self.hand_boxes.shape[:-1] + (2, 4))
        if np.any(boxes[..., 0] > boxes[..., 2]) or np.any(boxes[..., 1] > boxes[..., 3]):
            raise StreamError("hand boxes need x_t <= x_b and y_t <= y_b")
        for frame_objs in _iter_object_frames(self.objects):
            o = np.asarray(frame_objs, dtype=np.float64).reshape(-1, 2, 2)
            if np.any(o[:, 0] > o[:, 1]):
                raise StreamError("object boxes need top-left <= bottom-right")

    @staticmethod
    def stack(items: list["FeatureStreams"]) -> "FeatureStreams":
        normalized = {s.normalized for s in items}
        if len(normalized) != 1:
            raise StreamError("cannot batch normalised and raw streams together")
        return FeatureStreams(
            np.stack([s.head_angles for s in items]),
            np.stack([s.body_pose for s in items]),
            np.stack([s.hand_boxes for s in items]),
            objects=[s.objects for s in items],
            normalized=normalized.pop(),
        )


def _iter_object_frames(objects):
    # single clip: list of [M, 2, 2] arrays; batched: list of such lists
    for item in objects or ():
        if isinstance(item, np.ndarray):
            yield item
        elif item is not None:
            yield from _iter_object_frames(item)


@dataclass
class NormStats:
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, streams: FeatureStreams) -> "NormStats":
        """Per-channel statistics over every sample and frame (training split only)."""
        if streams.normalized:
            raise StreamError("statistics must be fitted on raw streams")
        mean, std = {}, {}
        for key in _FIELDS:
            a = streams.modality(key).reshape(-1, STREAM_DIMS[key])
            lo, hi = a.min(axis=0), a.max(axis=0)
            # a constant channel keeps its exact value so it normalises to exactly 0
            mean[key] = np.where(lo == hi, lo, a.mean(axis=0))
            std[key] = np.maximum(a.std(axis=0), STD_FLOOR)
        return cls(mean, std)

    def to_dict(self) -> dict:
        return {
            "mean": {k: v.tolist() for k, v in self.mean.items()},
            "std": {k: v.tolist() for k, v in self.std.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            {k: np.asarray(v, dtype=np.float64) for k, v in d["mean"].items()},
            {k: np.asarray(v, dtype=np.float64) for k, v in d["std"].items()},
        )


def apply_stats(streams: FeatureStreams, stats: NormStats) -> FeatureStreams:
    """Z-score every channel with no guard; see :func:`normalize_features`."""
    changes = {
        attr: (streams.modality(key) - stats.mean[key]) / stats.std[key] for key, attr in _FIELDS.items()
    }
    return replace(streams, normalized=True, **changes)


def normalize_features(streams: FeatureStreams, stats: NormStats | None) -> FeatureStreams:
    if stats is None or not stats.mean:
        raise StreamError("normalisation statistics are missing")
    if streams.normalized:
        raise StreamError("streams are already normalised")
    return apply_stats(streams, stats)


def denormalize_features(streams: FeatureStreams, stats: NormStats) -> FeatureStreams:
    if not streams.normalized:
        raise StreamError("streams are not normalised")
    changes = {
        attr: streams.modality(key) * stats.std[key] + stats.mean[key] for key, attr in _FIELDS.items()
    }
    return replace(streams, normalized=False, **changes)


class FeatureBlock(Module):
    def __init__(self, config: ModelConfig, with_head: bool = False):
        cfg = self.config = config
        s = cfg.seed
        self.modalities = cfg.ordered_modalities
        self.fcl = {}
        self.gru = {}
        for i, m in enumerate(self.modalities):
            self.fcl[m] = Linear(STREAM_DIMS[m], cfg.fcl_dims[m], block_rng(s, 2, 0, i))
            self.gru[m] = GRU(cfg.fcl_dims[m], cfg.gru_dims[m], block_rng(s, 2, 1, i))
        width = cfg.feature_width
        self.feat_attention = MultiHeadAttention(width, cfg.heads, block_rng(s, 2, 2))
        self.align = Linear(width, cfg.d_model, block_rng(s, 2, 3))
        self.head = None
        if with_head:
            self.head = Linear(cfg.n_frames * cfg.d_model, 2, block_rng(s, 2, 4), activation=None)

    def encode_streams(self, streams: FeatureStreams) -> Tensor:
        """Per-stream FCL and GRU, concatenated in body, head, hand order: ``[B, N, width]``."""
        parts = []
        for m in self.modalities:
            x = Tensor(streams.modality(m))
            if x.ndim != 3:
                raise T.DimensionError(f"{m} stream must be [B, N, d], got {x.shape}")
            parts.append(self.gru[m](self.fcl[m](x)))
        return parts[0] if len(parts) == 1 else T.concatenate(parts, axis=-1)

    def __call__(self, streams: FeatureStreams) -> Tensor:
        if not self.modalities:
            raise ConfigError("feature block needs at least one modality")
        x = self.encode_streams(streams)
        # tokens are the N frames; projections span the full feature width
        x = T.layer_norm(x + self.feat_attention(x), axis=-1)
        return self.align(x)

    def standalone_logits(self, streams: FeatureStreams) -> Tensor:
        if self.head is None:
            raise ConfigError("feature block was built without a classification head")
        x = self(streams)
        if x.shape[1] * x.shape[2] != self.head.d_in:
            raise T.DimensionError(f"head expects N*d = {self.head.d_in}, got {x.shape}")
        return self.head(T.flatten(x, 1))
