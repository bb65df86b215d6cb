"""Desk-scale experiment recipes shared by the scripts and the acceptance suite.

Each recipe fixes a dataset size, frame resolution, encoder width and epoch
budget sized to finish on a single CPU core, and returns plain dictionaries so
callers can print or serialise them.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import FUSIONS, MODALITIES, ModelConfig, TrainConfig
from .feature import NormStats
from .fusion import DriverNet, count_parameters
from .synth import Dataset, synthesize
from .train import cross_validate, evaluate, fit, holdout_split, measure_latency


@dataclass(frozen=True)
class DeskRecipe:
    clips: int = 600
    frame_size: int = 16
    encoder_channels: tuple[int, ...] = (8, 16, 64)
    d_model: int = 64
    epochs: int = 10
    feature_epochs: int = 30
    aggregation: str = "conv1d"
    fusion: str = "cf"
    k: int = 5
    test_fraction: float = 0.2
    seeds: tuple[int, ...] = (0, 1, 2)
    data_seed_offset: int = 42
    train: TrainConfig = field(default_factory=TrainConfig)

    def model_config(self, seed: int, **changes) -> ModelConfig:
        base = ModelConfig(
            frame_size=self.frame_size,
            encoder_channels=self.encoder_channels,
            d_model=self.d_model,
            aggregation=self.aggregation,
            fusion=self.fusion,
            seed=seed,
        )
        return base.with_(**changes)

    def train_config(self, seed: int, epochs: int | None = None) -> TrainConfig:
        d = {**self.train.to_dict(), "seed": seed, "epochs": epochs or self.epochs}
        return TrainConfig(**d)

    def dataset(self, seed: int, render: bool = True) -> Dataset:
        return synthesize(self.clips, self.data_seed_offset + seed, frame_size=self.frame_size,
                          render=render)

    def to_dict(self) -> dict:
        return asdict(self)


DESK = DeskRecipe()

MODALITY_VARIANTS = {"all": MODALITIES, "body": ("body",), "head": ("head",), "hand": ("hand",)}


def feature_trend(recipe: DeskRecipe = DESK, seeds=None, log=print) -> dict:
    """Hold-out accuracy of the standalone feature block per modality subset and seed."""
    seeds = recipe.seeds if seeds is None else seeds
    per_seed = {name: [] for name in MODALITY_VARIANTS}
    t0 = time.perf_counter()
    for seed in seeds:
        data = recipe.dataset(seed, render=False)
        tr, te = holdout_split(len(data), recipe.test_fraction, seed)
        for name, mods in MODALITY_VARIANTS.items():
            cfg = recipe.model_config(seed, modalities=mods)
            model, norm, _ = fit("feature", cfg, data.subset(tr),
                                 recipe.train_config(seed, recipe.feature_epochs))
            acc = evaluate(model, data.subset(te), norm, latency_clips=0).accuracy
            per_seed[name].append(acc)
            log(f"seed {seed} feature[{name}] accuracy {acc:.4f}")
    mean = {name: float(np.mean(v)) for name, v in per_seed.items()}
    return {"per_seed": per_seed, "mean": mean, "seeds": list(seeds),
            "seconds": time.perf_counter() - t0}


def regime_comparison(recipe: DeskRecipe = DESK, seeds=None, jobs: int = 1, log=print) -> dict:
    """k-fold CV of the fused model trained end to end versus on frozen pre-trained blocks."""
    seeds = recipe.seeds if seeds is None else seeds
    runs = {"all": [], "fusion": []}
    t0 = time.perf_counter()
    for seed in seeds:
        data = recipe.dataset(seed)
        for regime in runs:
            report = cross_validate("drivernet", recipe.model_config(seed), data, k=recipe.k,
                                    regime=regime, cfg=recipe.train_config(seed), jobs=jobs)
            runs[regime].append(report)
            fold_acc = " ".join(f"{f.accuracy:.3f}" for f in report.folds)
            log(f"seed {seed} T_{regime}: folds {fold_acc} mean {report.mean['accuracy']:.4f}"
                f" +- {report.std['accuracy']:.4f}")
        del data
    summary = {
        regime: {
            "per_seed": [r.mean["accuracy"] for r in reports],
            "mean": float(np.mean([r.mean["accuracy"] for r in reports])),
            "precision": float(np.mean([r.mean["precision"] for r in reports])),
            "recall": float(np.mean([r.mean["recall"] for r in reports])),
        }
        for regime, reports in runs.items()
    }
    return {"regimes": summary, "reports": {k: [r.to_dict() for r in v] for k, v in runs.items()},
            "seeds": list(seeds), "seconds": time.perf_counter() - t0}


def latency_report(recipe: DeskRecipe = DESK, clips: int = 32, seed: int = 0) -> dict:
    """Median and p95 single-clip latency per fusion strategy, all sharing one set of blocks.

    ``fusion_only`` times the fusion block and head on precomputed embeddings
    (no data loading, no visual encoder); ``full`` times the whole forward pass.
    """
    data = recipe.dataset(seed).subset(range(clips))
    norm = NormStats.fit(data.streams)
    report = {}
    for fusion in FUSIONS:
        # blocks draw from seed-derived streams that do not depend on the fusion choice
        model = DriverNet(recipe.model_config(seed, fusion=fusion))
        report[fusion] = {
            "fusion_only": measure_latency(model, data, norm, clips, fusion_only=True),
            "full": measure_latency(model, data, norm, clips),
            "parameters": count_parameters(model),
        }
    return report
