"""Configuration objects: architecture, loss weights, training schedule.

A model is fully described by a `ModelConfig`; the decoder rebuilds the
network from the copy stored in the bitstream header, so every field here
must be serializable as plain integers/floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Architecture hyperparameters of the scene network.

    The decoder output size is ``grid × prod(upscale_factors)``; the config
    is rejected unless that product matches ``frame_h × frame_w`` exactly.
    """

    frame_h: int
    frame_w: int
    frame_count: int
    grid_h: int = 9
    grid_w: int = 16
    upscale_factors: tuple[int, ...] = (5, 2, 2, 2, 2)
    stage_channels: tuple[int, ...] = (96, 64, 48, 32, 16)
    embed_dim: int = 64          # width of the temporal feature vectors
    token_dim: int = 64          # width of the spatial tokens
    mlp_hidden: int = 96         # hidden width of the temporal/fusion MLPs
    b: float = 1.25              # positional-encoding base
    l: int = 80                  # positional-encoding levels
    c: int = 3                   # per-frame context embedding channels
    use_context_embedding: bool = True   # per-frame transmitted embedding on/off
    use_flow_heads: bool = True          # auxiliary flow/regularization heads

    def __post_init__(self):
        self.upscale_factors = tuple(int(f) for f in self.upscale_factors)
        self.stage_channels = tuple(int(ch) for ch in self.stage_channels)
        self.validate()

    def validate(self) -> None:
        if self.l < 1:
            raise ConfigError(f"encoding levels must be >= 1, got {self.l}")
        if not (self.b > 1.0):
            raise ConfigError(f"encoding base must be > 1, got {self.b}")
        if self.c < 1:
            raise ConfigError(f"context channels must be >= 1, got {self.c}")
        if self.frame_count < 1:
            raise ConfigError(f"frame_count must be >= 1, got {self.frame_count}")
        if len(self.stage_channels) != len(self.upscale_factors):
            raise ConfigError(
                "stage_channels and upscale_factors must have equal length, "
                f"got {len(self.stage_channels)} vs {len(self.upscale_factors)}")
        if not self.stage_channels or any(ch < 1 for ch in self.stage_channels):
            raise ConfigError(f"stage_channels must all be positive, got {self.stage_channels}")
        if any(f < 1 for f in self.upscale_factors):
            raise ConfigError(f"upscale factors must all be positive, got {self.upscale_factors}")
        scale = self.total_upscale
        if self.grid_h * scale != self.frame_h or self.grid_w * scale != self.frame_w:
            raise ConfigError(
                f"grid {self.grid_h}x{self.grid_w} with upscale {scale} gives "
                f"{self.grid_h * scale}x{self.grid_w * scale}, expected "
                f"{self.frame_h}x{self.frame_w}")
        if self.embed_dim != self.token_dim:
            raise ConfigError(
                "temporal feature width must match token width for the fusion "
                f"product, got embed_dim={self.embed_dim} token_dim={self.token_dim}")

    @property
    def total_upscale(self) -> int:
        return math.prod(self.upscale_factors)

    @property
    def encoding_dim(self) -> int:
        """Length of the positional encoding of one scalar."""
        return 2 * self.l

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def embedding_numel(self) -> int:
        """Flattened length of one per-frame context embedding."""
        return self.c * self.grid_h * self.grid_w

    def t_norm(self, t: int) -> float:
        """Frame index mapped to [0, 1]; 0 for single-frame sequences."""
        if not (0 <= t < self.frame_count):
            raise ConfigError(f"frame index {t} out of range [0, {self.frame_count})")
        if self.frame_count == 1:
            return 0.0
        return t / (self.frame_count - 1)


@dataclass
class LossWeights:
    """Weights of the training objective."""

    alpha: float = 0.7        # L1 / (1 - SSIM) balance inside the spatial term
    lam: float = 10.0         # weight of the spatial term in the total
    sigma2: float = 10.0      # variance of the temporal-distance prior
    tau: float = 0.1          # contrastive temperature
    window: int = 80          # how many previous frames the contrastive term sees

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.sigma2 <= 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")


@dataclass
class TrainConfig:
    """Per-video optimization settings."""

    lr0: float = 5e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 10   # epochs
    epochs: int = 900
    max_steps: int | None = None   # optional hard cap on optimizer steps
    batch: int = 1                 # frames per optimizer step (fixed at 1)
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    use_freq_loss: bool = True
    use_flow_loss: bool = True
    use_contrastive_loss: bool = True
    flow_regularized: bool = True  # False recovers the unmasked flow loss

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch != 1:
            raise ConfigError("only batch size 1 is supported")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        return self.lr0 * self.lr_decay ** (epoch // self.lr_decay_every)


def geometric_channels(base: int, n_stages: int, decay: float = 0.7,
                       floor: int = 8) -> tuple[int, ...]:
    """Decoder stage widths decaying geometrically from `base`."""
    return tuple(max(floor, round(base * decay ** i)) for i in range(n_stages))


# Named presets. The 720p/1080p entries follow the published upscale
# factor lists; widths are free parameters chosen per rate target.
_PRESETS: dict[str, dict] = {
    # desk-scale preset for the 128x256 synthetic sequence
    "small": dict(
        grid_h=4, grid_w=8, upscale_factors=(2, 2, 2, 2, 2),
        stage_channels=(48, 38, 28, 20, 16),
        embed_dim=64, token_dim=64, mlp_hidden=96,
    ),
    # 720p: 9x16 grid, factors [5, 2, 2, 2, 2]
    "medium": dict(
        grid_h=9, grid_w=16, upscale_factors=(5, 2, 2, 2, 2),
        stage_channels=geometric_channels(196, 5),
        embed_dim=128, token_dim=128, mlp_hidden=192,
    ),
    # 1080p: 9x16 grid, factors [5, 3, 2, 2, 2]
    "large": dict(
        grid_h=9, grid_w=16, upscale_factors=(5, 3, 2, 2, 2),
        stage_channels=geometric_channels(256, 5),
        embed_dim=160, token_dim=160, mlp_hidden=256,
    ),
}


def preset_names() -> tuple[str, ...]:
    return tuple(_PRESETS)


def make_config(preset: str, frame_h: int, frame_w: int, frame_count: int,
                **overrides) -> ModelConfig:
    """Build a ModelConfig from a named preset plus field overrides."""
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; known: {sorted(_PRESETS)}")
    kwargs = dict(_PRESETS[preset])
    kwargs.update(overrides)
    return ModelConfig(frame_h=frame_h, frame_w=frame_w, frame_count=frame_count,
                       **kwargs)


def with_frames(config: ModelConfig, frame_count: int) -> ModelConfig:
    """Same architecture, different sequence length."""
    return replace(config, frame_count=frame_count)
