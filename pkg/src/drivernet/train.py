"""Optimisation, training regimes, metrics and k-fold cross-validation."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig, TrainConfig
from .context import ContextBlock
from .feature import FeatureBlock, FeatureStreams, NormStats, normalize_features
from .formats import load_checkpoint, save_checkpoint
from .fusion import DriverNet
from .layers import Module, Parameter
from .synth import Dataset
from .tensor import Tensor

log = logging.getLogger(__name__)

KINDS = ("context", "feature", "drivernet")


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    """Adaptive-moment optimiser over the trainable (unfrozen) parameters only."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params: list[Parameter] = [p for p in params if p.requires_grad]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# model construction and forward dispatch


def build_model(kind: str, config: ModelConfig) -> Module:
    if kind == "context":
        return ContextBlock(config, with_head=True)
    if kind == "feature":
        return FeatureBlock(config, with_head=True)
    if kind == "drivernet":
        return DriverNet(config)
    raise ConfigError(f"unknown model kind {kind!r}")


def needs_frames(kind: str) -> bool:
    return kind in ("context", "drivernet")


def forward(model: Module, clips, streams: FeatureStreams) -> Tensor:
    if isinstance(model, DriverNet):
        return model(clips, streams)
    if isinstance(model, ContextBlock):
        return model.standalone_logits(clips)
    if isinstance(model, FeatureBlock):
        return model.standalone_logits(streams)
    raise ConfigError(f"cannot run {type(model).__name__}")


def _batch(dataset: Dataset, idx, norm: NormStats, frames: bool):
    sub = dataset.subset(idx)
    streams = normalize_features(sub.streams, norm)
    clips = Tensor(sub.clips) if frames else None
    if frames and sub.clips is None:
        raise ConfigError("this model needs rendered frames but the dataset has none")
    return clips, streams, sub.labels


def _frozen_blocks(model: Module) -> bool:
    return isinstance(model, DriverNet) and model.frozen_context and model.frozen_feature


def _embed_all(model: DriverNet, dataset: Dataset, norm: NormStats, batch: int):
    """Frozen-block outputs for every clip (the blocks have no stochastic layers)."""
    xc, xf = [], []
    with T.no_grad():
        for start in range(0, len(dataset), batch):
            idx = np.arange(start, min(start + batch, len(dataset)))
            clips, streams, _ = _batch(dataset, idx, norm, True)
            c, f = model.embed(clips, streams)
            xc.append(c.data)
            xf.append(f.data)
    return np.concatenate(xc), np.concatenate(xf)


# ---------------------------------------------------------------------------
# training


@dataclass
class History:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def improved(self) -> bool:
        return len(self.losses) >= 2 and self.losses[-1] < self.losses[0]


def train(model: Module, dataset: Dataset, cfg: TrainConfig, norm: NormStats,
          regime: str = "all") -> History:
    """Minimise softmax cross-entropy with Adam over fixed epochs.

    For a DriverNet the regime decides what moves: ``all`` updates every
    parameter (the encoder too unless ``cfg.train_encoder`` is off), ``fusion``
    updates only the fusion block. Deterministic for a given ``cfg.seed``.
    """
    if isinstance(model, DriverNet):
        model.set_regime(regime)
    encoder = _encoder_of(model)
    if encoder is not None and not cfg.train_encoder:
        encoder.freeze()
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    if not opt.params:
        raise ConfigError("nothing to train: every parameter is frozen")
    rng = np.random.default_rng([cfg.seed, 7])
    frames = needs_frames(_kind(model))
    cached = None
    if _frozen_blocks(model):
        cached = _embed_all(model, dataset, norm, cfg.batch_size)
    history = History()
    t0 = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            T.reset_tape()
            try:
                if cached is not None:
                    logits = model.fusion(Tensor(cached[0][idx]), Tensor(cached[1][idx]))
                    labels = dataset.labels[idx]
                else:
                    clips, streams, labels = _batch(dataset, idx, norm, frames)
                    logits = forward(model, clips, streams)
                loss = T.cross_entropy(logits, labels)
                T.backward(loss)
            except T.NonFiniteError as e:
                raise TrainingDiverged(
                    f"training diverged in epoch {epoch}, batch starting at {start}: {e}"
                ) from e
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.losses.append(total / seen)
        log.debug("epoch %d loss %.4f", epoch, history.losses[-1])
    model.eval()
    history.seconds = time.perf_counter() - t0
    return history


def _encoder_of(model: Module):
    if isinstance(model, DriverNet):
        return model.context.encoder
    return getattr(model, "encoder", None)


def _kind(model: Module) -> str:
    if isinstance(model, DriverNet):
        return "drivernet"
    if isinstance(model, ContextBlock):
        return "context"
    return "feature"


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    accuracy: float
    precision: float | None
    recall: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    latency_ms: dict = field(default_factory=dict)
    folds: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        d = asdict(self)
        d["folds"] = [f.to_dict() if isinstance(f, MetricsReport) else f for f in self.folds]
        return d


def confusion(predictions, labels) -> tuple[int, int, int, int]:
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    return int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)), int(np.sum(~p & y))


def metrics_from_predictions(predictions, labels) -> MetricsReport:
    """Ready (1) is the positive class; 0/0 precision or recall is reported as None."""
    tp, fp, tn, fn = confusion(predictions, labels)
    n = tp + fp + tn + fn
    if n == 0:
        raise ValueError("no predictions to score")
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return MetricsReport((tp + tn) / n, precision, recall, tp, fp, tn, fn)


def predict(model: Module, dataset: Dataset, norm: NormStats, batch: int = 16) -> np.ndarray:
    if norm is None:
        raise ConfigError("normalisation statistics are required for evaluation")
    model.eval()
    frames = needs_frames(_kind(model))
    preds = []
    with T.no_grad():
        for start in range(0, len(dataset), batch):
            idx = np.arange(start, min(start + batch, len(dataset)))
            clips, streams, _ = _batch(dataset, idx, norm, frames)
            preds.append(forward(model, clips, streams).data.argmax(axis=1))
    return np.concatenate(preds)


def measure_latency(model: Module, dataset: Dataset, norm: NormStats, clips: int = 8,
                    fusion_only: bool = False) -> dict:
    """Median and p95 wall-clock milliseconds for single-clip inference.

    With ``fusion_only`` the block embeddings are computed first and only the
    fusion block and head are timed.
    """
    model.eval()
    frames = needs_frames(_kind(model))
    times = []
    with T.no_grad():
        for i in range(min(clips, len(dataset))):
            c, s, _ = _batch(dataset, [i], norm, frames)
            if fusion_only and isinstance(model, DriverNet):
                xc, xf = model.embed(c, s)
                t0 = time.perf_counter()
                model.fusion(xc, xf)
            else:
                t0 = time.perf_counter()
                forward(model, c, s)
            times.append((time.perf_counter() - t0) * 1000.0)
    return {"median": float(np.median(times)), "p95": float(np.percentile(times, 95)),
            "clips": len(times)}


def evaluate(model: Module, dataset: Dataset, norm: NormStats, latency_clips: int = 8) -> MetricsReport:
    report = metrics_from_predictions(predict(model, dataset, norm), dataset.labels)
    if latency_clips:
        report.latency_ms = measure_latency(model, dataset, norm, latency_clips)
    return report


def summarize_folds(folds: list[MetricsReport]) -> MetricsReport:
    """Pool fold reports: confusion counts summed, mean and population std per metric;
    undefined precision/recall values are left out of the means."""
    tp = sum(f.tp for f in folds)
    fp = sum(f.fp for f in folds)
    tn = sum(f.tn for f in folds)
    fn = sum(f.fn for f in folds)
    pooled = metrics_from_predictions([1] * tp + [1] * fp + [0] * tn + [0] * fn,
                                      [1] * tp + [0] * fp + [0] * tn + [1] * fn)
    mean, std = {}, {}
    for key in ("accuracy", "precision", "recall"):
        vals = [getattr(f, key) for f in folds if getattr(f, key) is not None]
        mean[key] = float(np.mean(vals)) if vals else None
        std[key] = float(np.std(vals)) if vals else None
    lat = [f.latency_ms["median"] for f in folds if "median" in f.latency_ms]
    pooled.latency_ms = {"median": float(np.median(lat))} if lat else {}
    pooled.folds = list(folds)
    pooled.mean, pooled.std = mean, std
    return pooled


def _pct(value) -> str:
    return "n/a" if value is None else f"{100 * value:.2f}"


def metrics_table(rows) -> str:
    """Aligned text table of ``(name, parameter count or None, MetricsReport)`` rows.

    Columns are model, parameters, accuracy, precision, recall (percent) and
    median per-clip cost in milliseconds. Cross-validated reports show
    mean and population std of accuracy.
    """
    header = ("model", "params", "A", "P", "R", "cost_ms")
    lines = [header]
    for name, params, r in rows:
        if r.mean:
            acc = f"{_pct(r.mean['accuracy'])} +- {_pct(r.std['accuracy'])}"
            prec, rec = _pct(r.mean["precision"]), _pct(r.mean["recall"])
        else:
            acc, prec, rec = _pct(r.accuracy), _pct(r.precision), _pct(r.recall)
        cost = r.latency_ms.get("median")
        lines.append((name, "-" if params is None else f"{params:,}", acc, prec, rec,
                      "-" if cost is None else f"{cost:.2f}"))
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
        for row in lines
    )


# ---------------------------------------------------------------------------
# cross-validation


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle split into k disjoint folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("k-fold cross-validation needs k >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    order = np.random.default_rng([seed, 11]).permutation(n)
    return [np.sort(f) for f in np.array_split(order, k)]


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.default_rng([seed, 13, fold]).integers(2**31 - 1))


def fit(kind: str, config: ModelConfig, train_set: Dataset, cfg: TrainConfig,
        regime: str = "all", block_cfg: TrainConfig | None = None):
    """Train one model from fresh initialisation on ``train_set``.

    For a DriverNet in the ``fusion`` regime, the context and feature blocks are
    first trained standalone with their own heads, then frozen, and the fusion
    block is trained on top.
    """
    norm = NormStats.fit(train_set.streams)
    histories = {}
    model = build_model(kind, config)
    if kind == "drivernet" and regime == "fusion":
        block_cfg = block_cfg or cfg
        ctx = ContextBlock(config, with_head=True)
        histories["context"] = train(ctx, train_set, block_cfg, norm)
        feat = FeatureBlock(config, with_head=True)
        histories["feature"] = train(feat, train_set, block_cfg, norm)
        model.load_blocks(ctx, feat)
    histories[kind] = train(model, train_set, cfg, norm, regime=regime)
    return model, norm, histories


def _run_fold(args) -> MetricsReport:
    kind, config, dataset, train_idx, val_idx, cfg, regime, block_cfg, latency = args
    model, norm, histories = fit(kind, config, dataset.subset(train_idx), cfg, regime, block_cfg)
    report = evaluate(model, dataset.subset(val_idx), norm, latency_clips=latency)
    report.latency_ms["train_seconds"] = sum(h.seconds for h in histories.values())
    return report


def cross_validate(kind: str, config: ModelConfig, dataset: Dataset, k: int = 5,
                   regime: str = "all", cfg: TrainConfig = TrainConfig(),
                   block_cfg: TrainConfig | None = None, jobs: int = 1,
                   latency_clips: int = 4) -> MetricsReport:
    """k-fold CV with a fresh initialisation per fold; fold seeds derive from ``cfg.seed``."""
    folds = kfold_indices(len(dataset), k, cfg.seed)
    tasks = []
    for i, val_idx in enumerate(folds):
        train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        s = fold_seed(cfg.seed, i)
        fcfg = TrainConfig(**{**cfg.to_dict(), "seed": s})
        bcfg = None if block_cfg is None else TrainConfig(**{**block_cfg.to_dict(), "seed": s})
        tasks.append((kind, config.with_(seed=s), dataset, train_idx, val_idx, fcfg, regime,
                      bcfg, latency_clips))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    return summarize_folds(results)


def holdout_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([seed, 17]).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: Module, norm: NormStats, extra: dict | None = None) -> None:
    arrays = {name: p.data for name, p in model.named_parameters()}
    info = {"kind": _kind(model)}
    if extra:
        info.update(extra)
    save_checkpoint(path, arrays, model.config.to_dict(), norm, info)


def load_model(path) -> tuple[Module, NormStats, dict]:
    header, arrays = load_checkpoint(path)
    config = ModelConfig.from_dict(header["model_config"])
    kind = header.get("extra", {}).get("kind", "drivernet")
    model = build_model(kind, config)
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise ConfigError(f"checkpoint does not match the model configuration: {missing[:5]}")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise ConfigError(f"{name}: checkpoint shape {arrays[name].shape} vs model {p.shape}")
        p.data[...] = arrays[name]
    stats = header.get("normalization_stats")
    norm = NormStats.from_dict(stats) if stats else None
    model.eval()
    return model, norm, header
