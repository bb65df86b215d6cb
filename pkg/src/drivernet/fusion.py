"""Cross-modal fusion, the assembled readiness classifier, and parameter accounting."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .context import ContextBlock, block_rng
from .feature import FeatureBlock, FeatureStreams
from .layers import Dropout, Linear, Module, MultiHeadAttention
from .tensor import Tensor


class FusionBlock(Module):
    def __init__(self, config: ModelConfig):
        cfg = self.config = config
        s = cfg.seed
        self.strategy = cfg.fusion
        d = cfg.d_model
        if self.strategy == "cf":
            self.fcl_cf = Linear(cfg.n_frames * 2 * d, d, block_rng(s, 3, 0))
        elif self.strategy == "caf":
            self.cross_attention = MultiHeadAttention(d, cfg.heads, block_rng(s, 3, 1))
        elif self.strategy != "af":
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}")
        self.head_fcl1 = Linear(d, cfg.head_hidden, block_rng(s, 3, 2))
        self.dropout = Dropout(cfg.dropout, block_rng(s, 3, 3))
        self.head_fcl2 = Linear(cfg.head_hidden, 2, block_rng(s, 3, 4), activation=None)

    def fuse(self, x_context: Tensor, x_feature: Tensor) -> Tensor:
        """Merge two ``[B, N, d]`` sequences into one ``[B, d]`` vector per sample."""
        x_context, x_feature = T.as_tensor(x_context), T.as_tensor(x_feature)
        if x_context.shape != x_feature.shape:
            raise T.DimensionError(
                f"context {x_context.shape} and feature {x_feature.shape} extents differ"
            )
        if self.strategy == "cf":
            b, n, d = x_context.shape
            if n * 2 * d != self.fcl_cf.d_in:
                raise T.DimensionError(
                    f"concatenation fusion was sized for N={self.config.n_frames}, got N={n}"
                )
            joined = T.concatenate([x_context, x_feature], axis=-1)
            return self.fcl_cf(T.reshape(joined, (b, n * 2 * d)))
        if self.strategy == "af":
            return T.mean(x_context + x_feature, axis=1)
        return T.mean(self.cross_attention(x_context, x_feature), axis=1)

    def classify(self, fused: Tensor) -> Tensor:
        return self.head_fcl2(self.dropout(self.head_fcl1(fused)))

    def __call__(self, x_context: Tensor, x_feature: Tensor) -> Tensor:
        return self.classify(self.fuse(x_context, x_feature))


class DriverNet(Module):
    """Context and feature blocks (without their standalone heads) joined by a fusion block."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.context = ContextBlock(config, with_head=False)
        self.feature = FeatureBlock(config, with_head=False)
        self.fusion = FusionBlock(config)
        self.frozen_context = False
        self.frozen_feature = False

    def set_regime(self, regime: str) -> None:
        """``all`` trains everything; ``fusion`` freezes the context and feature blocks."""
        if regime not in ("all", "fusion"):
            raise ConfigError(f"unknown regime {regime!r}")
        frozen = regime == "fusion"
        self.frozen_context = self.frozen_feature = frozen
        for block in (self.context, self.feature):
            block.freeze() if frozen else block.unfreeze()

    def load_blocks(self, context: ContextBlock | None = None, feature: FeatureBlock | None = None) -> None:
        """Copy pre-trained block parameters in; standalone heads are dropped."""
        for mine, theirs in ((self.context, context), (self.feature, feature)):
            if theirs is None:
                continue
            src = dict(theirs.named_parameters())
            for name, p in mine.named_parameters():
                if src[name].shape != p.shape:
                    raise T.DimensionError(f"{name}: {src[name].shape} vs {p.shape}")
                p.data[...] = src[name].data

    def embed(self, clips, streams: FeatureStreams) -> tuple[Tensor, Tensor]:
        return self.context(clips), self.feature(streams)

    def __call__(self, clips, streams: FeatureStreams) -> Tensor:
        x_context, x_feature = self.embed(clips, streams)
        return self.fusion(x_context, x_feature)


# ---------------------------------------------------------------------------
# parameter accounting

# reference figures quoted from the published tables, keyed by (model, variant)
PUBLISHED_COUNTS = {
    ("context", "gap"): 270_338,
    ("context", "ws"): 270_341,
    ("context", "conv1d"): 466_946,
    ("feature", "body"): 32_634,
    ("feature", "head"): 21_370,
    ("feature", "hand"): 19_450,
    ("feature", "all"): 184_978,
    ("drivernet", "gap/cf"): 2_536_592,
    ("drivernet", "gap/af"): 447_152,
    ("drivernet", "gap/caf"): 1_036_976,
    ("drivernet", "ws/cf"): 2_536_595,
    ("drivernet", "ws/af"): 447_155,
    ("drivernet", "ws/caf"): 1_036_979,
    ("drivernet", "conv1d/cf"): 2_741_394,
    ("drivernet", "conv1d/af"): 651_954,
    ("drivernet", "conv1d/caf"): 1_241_778,
}
PUBLISHED_DELTAS = {"cf-af": 2_089_440, "caf-af": 589_824, "ws-gap": 3, "conv1d-gap": 196_608}


def _is_encoder(name: str) -> bool:
    return "encoder" in name.split(".")


def count_parameters(module: Module, scope: str = "total", include_encoder: bool = False):
    """Exact parameter counts.

    ``total`` counts every parameter, ``trainable`` skips frozen ones, and
    ``by-layer`` returns an ordered mapping from parameter name to size. The
    visual encoder is left out unless ``include_encoder`` is set, matching how
    the published figures treat the pre-trained encoder.
    """
    named = [(n, p) for n, p in module.named_parameters() if include_encoder or not _is_encoder(n)]
    if scope == "total":
        return sum(p.size for _, p in named)
    if scope == "trainable":
        return sum(p.size for _, p in named if p.requires_grad)
    if scope == "by-layer":
        return OrderedDict((n, p.size) for n, p in named)
    raise ValueError(f"unknown scope {scope!r}")


def parameter_table(d_model: int = 256, n_frames: int = 16, seed: int = 0) -> list[dict]:
    """Our counts for every configuration in the published tables, beside the reference figures."""
    rows = []
    base = ModelConfig(n_frames=n_frames, d_model=d_model, seed=seed,
                       encoder_channels=(4, d_model), frame_size=32)
    for agg in ("gap", "ws", "conv1d"):
        block = ContextBlock(base.with_(aggregation=agg), with_head=True)
        rows.append(_row("context", agg, count_parameters(block)))
    for mods, label in ((("body",), "body"), (("head",), "head"), (("hand",), "hand"),
                        (("body", "head", "hand"), "all")):
        block = FeatureBlock(base.with_(modalities=mods), with_head=True)
        rows.append(_row("feature", label, count_parameters(block)))
    for agg in ("gap", "ws", "conv1d"):
        for fusion in ("cf", "af", "caf"):
            model = DriverNet(base.with_(aggregation=agg, fusion=fusion))
            rows.append(_row("drivernet", f"{agg}/{fusion}", count_parameters(model)))
    return rows


def _row(model: str, variant: str, ours: int) -> dict:
    ref = PUBLISHED_COUNTS.get((model, variant))
    return {
        "model": model,
        "variant": variant,
        "ours": ours,
        "published": ref,
        "match": None if ref is None else ours == ref,
    }


def strategy_deltas(rows: list[dict]) -> dict[str, dict[str, int]]:
    """CF-AF and CAF-AF differences of assembled-model counts, per aggregation."""
    by = {r["variant"]: r["ours"] for r in rows if r["model"] == "drivernet"}
    out = {}
    for agg in ("gap", "ws", "conv1d"):
        out[agg] = {
            "cf-af": by[f"{agg}/cf"] - by[f"{agg}/af"],
            "caf-af": by[f"{agg}/caf"] - by[f"{agg}/af"],
        }
    return out


def snapshot(module: Module) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in module.named_parameters()}
