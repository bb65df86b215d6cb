"""Finite-difference gradient suite over every layer and every assembled configuration.

Layers are checked one tensor at a time against ``LAYER_TOL``. Assembled models
are checked against ``MODEL_TOL`` in the normwise sense of
:func:`drivernet.gradcheck.normwise_error`, because a few tensors (for example
the keys of an attention whose inputs barely differ) have true gradients near
the finite-difference roundoff floor where a per-tensor ratio is pure noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import AGGREGATIONS, FUSIONS, REGIMES, ModelConfig, miniature
from .context import ContextBlock, VisualEncoder
from .feature import FeatureBlock, FeatureStreams
from .fusion import DriverNet
from .gradcheck import GradReport, check_gradients, max_error, normwise_error
from .layers import GRU, Linear, MultiHeadAttention, ViewAggregator
from .tensor import Tensor

LAYER_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    error: float
    tolerance: float
    reports: list[GradReport] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def miniature_inputs(seed: int = 123, config: ModelConfig | None = None):
    """B=2 clips of V=3 views, N frames, 8x8 pixels, plus matching normalised streams.

    Each view gets a distinct colour offset so the view attention sees
    distinguishable tokens.
    """
    cfg = config or miniature()
    rng = np.random.default_rng(seed)
    b, n, s = 2, cfg.n_frames, cfg.frame_size
    clips = rng.normal(size=(b, cfg.n_views, n, 3, s, s))
    clips += np.arange(cfg.n_views).reshape(1, -1, 1, 1, 1, 1) * np.array([1.5, -0.75, 1.2]).reshape(
        1, 1, 1, 3, 1, 1
    )
    streams = FeatureStreams(
        rng.normal(size=(b, n, 3)), rng.normal(size=(b, n, 34)), rng.normal(size=(b, n, 8)),
        normalized=True,
    )
    return clips, streams


def _layer_cases(seed: int):
    """Yield (name, forward, [(tensor name, tensor), ...]) for every layer type."""
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def named(module, **inputs):
        return [*inputs.items(), *module.named_parameters()]

    fc = Linear(3, 4, rng)
    x_fc = leaf(5, 3)
    yield "linear", lambda: fc(x_fc), named(fc, x=x_fc)

    mha = MultiHeadAttention(4, 2, rng)
    x_sa = leaf(2, 3, 4)
    yield "self_attention", lambda: mha(x_sa), named(mha, x=x_sa)

    cross = MultiHeadAttention(4, 2, rng)
    q, kv = leaf(1, 2, 4), leaf(1, 3, 4)
    yield "cross_attention", lambda: cross(q, kv), named(cross, query=q, key_value=kv)

    gru = GRU(3, 4, rng)
    x_gru = leaf(2, 4, 3)
    yield "gru", lambda: gru(x_gru), named(gru, x=x_gru)

    for variant in AGGREGATIONS:
        agg = ViewAggregator(variant, 3, 4, rng)
        if variant == "ws":
            agg.logits.data[...] = rng.normal(size=3)
        x_v = leaf(2, 3, 4)
        yield f"aggregate_{variant}", (lambda a=agg, x=x_v: a(x)), named(agg, x=x_v)

    enc = VisualEncoder(3, (3, 4), rng)
    x_enc = leaf(2, 4, 3, 8, 8)
    yield "visual_encoder", lambda: enc(x_enc), named(enc, x=x_enc)

    x_ln = leaf(3, 6)
    yield "layer_norm", lambda: T.layer_norm(x_ln, axis=-1), [("x", x_ln)]


def check_layers(seed: int = 0) -> list[SuiteResult]:
    """Each layer alone under a random linear projection of its output; per-tensor criterion."""
    results = []
    for name, fn, tensors in _layer_cases(seed):
        weights = np.random.default_rng([seed, 1]).normal(size=fn().shape)
        t0 = time.perf_counter()
        reports = check_gradients(lambda: T.sum(fn() * weights), [t for _, t in tensors],
                                  [n for n, _ in tensors])
        results.append(SuiteResult(name, max_error(reports), LAYER_TOL, reports,
                                   time.perf_counter() - t0))
    return results


def check_blocks(seed: int = 0) -> list[SuiteResult]:
    """Standalone context and feature blocks with their heads."""
    cfg = miniature()
    clips, streams = miniature_inputs(seed, cfg)
    results = []
    for name, block, run in (
        ("context_block", ContextBlock(cfg, with_head=True), lambda b: b.standalone_logits(clips)),
        ("feature_block", FeatureBlock(cfg, with_head=True), lambda b: b.standalone_logits(streams)),
    ):
        named = list(block.named_parameters())
        t0 = time.perf_counter()
        reports = check_gradients(lambda: T.cross_entropy(run(block), [0, 1]),
                                  [p for _, p in named], [n for n, _ in named])
        results.append(SuiteResult(name, normwise_error(reports), MODEL_TOL, reports,
                                   time.perf_counter() - t0))
    return results


def check_model(aggregation: str, fusion: str, regime: str, seed: int = 0) -> SuiteResult:
    """Gradient of the cross-entropy loss of one assembled miniature model.

    In the ``fusion`` regime only the fusion block is trainable, so only its
    tensors are checked; the frozen blocks must receive no gradient at all.
    """
    cfg = miniature(aggregation=aggregation, fusion=fusion)
    clips, streams = miniature_inputs(seed, cfg)
    model = DriverNet(cfg)
    model.set_regime(regime)
    model.eval()  # dropout off: the loss must be a deterministic function
    if aggregation == "ws":
        model.context.aggregator.logits.data[...] = [0.4, -0.3, 0.1]
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    t0 = time.perf_counter()
    reports = check_gradients(lambda: T.cross_entropy(model(clips, streams), [0, 1]),
                              [p for _, p in named], [n for n, _ in named])
    frozen_untouched = all(p.grad is None for p in model.parameters() if not p.requires_grad)
    error = normwise_error(reports) if frozen_untouched else float("inf")
    return SuiteResult(f"{aggregation}/{fusion}/{regime}", error, MODEL_TOL, reports,
                       time.perf_counter() - t0)


def run_suite(seed: int = 0, log=None) -> list[SuiteResult]:
    results = check_layers(seed) + check_blocks(seed)
    for r in results:
        if log:
            log(r)
    for agg in AGGREGATIONS:
        for fusion in FUSIONS:
            for regime in REGIMES:
                r = check_model(agg, fusion, regime, seed)
                if log:
                    log(r)
                results.append(r)
    return results


def per_tensor_errors(result: SuiteResult) -> dict[str, float]:
    """Worst per-tensor relative error for each module path inside one check."""
    worst: dict[str, float] = {}
    for rep in result.reports:
        key = rep.name.rsplit(".", 1)[0] if "." in rep.name else rep.name
        worst[key] = max(worst.get(key, 0.0), rep.error)
    return worst
