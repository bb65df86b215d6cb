"""Experiment configuration dataclasses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

AGGREGATIONS = ("gap", "ws", "conv1d")
FUSIONS = ("cf", "af", "caf")
MODALITIES = ("body", "head", "hand")
REGIMES = ("all", "fusion")

# raw per-frame feature widths
STREAM_DIMS = {"body": 34, "head": 3, "hand": 8}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_frames: int = 16
    n_views: int = 3
    frame_size: int = 32
    encoder_channels: tuple[int, ...] = (16, 32, 64, 256)
    d_model: int = 256
    heads: int = 4
    aggregation: str = "gap"
    conv_kernel: int = 3
    fusion: str = "cf"
    modalities: tuple[str, ...] = MODALITIES
    fcl_dims: dict = field(default_factory=lambda: {"body": 64, "head": 16, "hand": 16})
    gru_dims: dict = field(default_factory=lambda: {"body": 128, "head": 32, "hand": 32})
    head_hidden: int = 32
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        # normalise sequences coming from JSON
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        self.validate()

    def validate(self) -> None:
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        bad = [m for m in self.modalities if m not in MODALITIES]
        if bad:
            raise ConfigError(f"unknown modalities {bad}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("duplicate modality")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.feature_width % self.heads:
            raise ConfigError(
                f"feature width {self.feature_width} not divisible by {self.heads} heads"
            )
        if self.encoder_channels[-1] != self.d_model:
            raise ConfigError("last encoder channel count must equal d_model")
        if self.aggregation == "conv1d" and self.n_views < self.conv_kernel:
            raise ConfigError(
                f"conv1d aggregation needs n_views >= kernel {self.conv_kernel}, got {self.n_views}"
            )
        if self.frame_size < 2 ** len(self.encoder_channels):
            raise ConfigError(
                f"frame size {self.frame_size} too small for {len(self.encoder_channels)} "
                "stride-2 encoder stages"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def ordered_modalities(self) -> tuple[str, ...]:
        """Active modalities in the fixed body, head, hand order."""
        return tuple(m for m in MODALITIES if m in self.modalities)

    @property
    def feature_width(self) -> int:
        return sum(self.gru_dims[m] for m in self.ordered_modalities)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def miniature(**changes) -> ModelConfig:
    """Tiny widths used by gradient checks: every path, few parameters."""
    base = ModelConfig(
        n_frames=4,
        frame_size=8,
        encoder_channels=(3, 4),
        d_model=4,
        heads=2,
        fcl_dims={"body": 3, "head": 2, "hand": 2},
        gru_dims={"body": 4, "head": 2, "hand": 2},
        head_hidden=3,
    )
    return replace(base, **changes)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    train_encoder: bool = True

    def to_dict(self) -> dict:
        return asdict(self)
