"""Context block: multi-view clips to per-frame context embeddings."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .layers import Linear, Module, MultiHeadAttention, ViewAggregator, uniform_init
from .tensor import Tensor


def block_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([seed, *path])


class VisualEncoder(Module):
    """Stack of 3x3x3 convolutions (temporal stride 1, spatial stride 2) and spatial mean.

    Maps ``[S, N, C, W, H]`` to ``[S, N, channels[-1]]``; N is preserved.
    """

    def __init__(self, in_channels: int, channels, rng: np.random.Generator):
        self.channels = tuple(channels)
        c_prev = in_channels
        self.stages = {}
        for i, c in enumerate(self.channels):
            stage = Module()
            stage.kernel = uniform_init(rng, (3, 3, 3, c_prev, c), 27 * c_prev)
            stage.bias = uniform_init(rng, (c,), 27 * c_prev)
            self.stages[str(i)] = stage
            c_prev = c

    @property
    def min_frame(self) -> int:
        return 2 ** len(self.channels)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 5:
            raise T.DimensionError(f"encoder expects [S, N, C, W, H], got {x.shape}")
        if min(x.shape[3:]) < self.min_frame:
            raise T.DimensionError(
                f"frames {x.shape[3]}x{x.shape[4]} too small for {len(self.channels)} stages"
            )
        h = T.transpose(x, (0, 1, 3, 4, 2))
        for stage in self.stages.values():
            h = T.relu(T.conv3d(h, stage.kernel, stage.bias, spatial_stride=2))
        return T.mean(h, axis=(2, 3))


class ContextBlock(Module):
    def __init__(self, config: ModelConfig, with_head: bool = False):
        cfg = self.config = config
        s = cfg.seed
        self.encoder = VisualEncoder(3, cfg.encoder_channels, block_rng(s, 1, 0))
        self.view_attention = MultiHeadAttention(cfg.d_model, cfg.heads, block_rng(s, 1, 1))
        self.aggregator = ViewAggregator(
            cfg.aggregation, cfg.n_views, cfg.d_model, block_rng(s, 1, 2), kernel=cfg.conv_kernel
        )
        self.head = None
        if with_head:
            self.head = Linear(cfg.n_frames * cfg.d_model, 2, block_rng(s, 1, 3), activation=None)

    def encode_views(self, clips: Tensor) -> Tensor:
        """``[B, V, N, C, W, H]`` to ``[B, V, N, d]`` with views folded into the batch."""
        clips = T.as_tensor(clips)
        if clips.ndim != 6:
            raise T.DimensionError(f"clips must be [B, V, N, C, W, H], got {clips.shape}")
        b, v, n, c, w, h = clips.shape
        if v != self.config.n_views or c != 3:
            raise T.DimensionError(f"expected {self.config.n_views} RGB views, got {clips.shape}")
        flat = T.reshape(clips, (b * v, n, c, w, h))
        emb = self.encoder(flat)
        return T.reshape(emb, (b, v, n, emb.shape[-1]))

    def __call__(self, clips) -> Tensor:
        x = self.encode_views(clips)
        b, v, n, d = x.shape
        x = T.reshape(T.transpose(x, (0, 2, 1, 3)), (b * n, v, d))
        x_nr = T.layer_norm(x + self.view_attention(x), axis=-1)
        return T.reshape(self.aggregator(x_nr), (b, n, d))

    def standalone_logits(self, clips) -> Tensor:
        if self.head is None:
            raise ConfigError("context block was built without a classification head")
        x = self(clips)
        if x.shape[1] * x.shape[2] != self.head.d_in:
            raise T.DimensionError(f"head expects N*d = {self.head.d_in}, got {x.shape}")
        return self.head(T.flatten(x, 1))
