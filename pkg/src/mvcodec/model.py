"""The scene network: an implicit representation mapping frame index to frame.

Five trainable sub-networks are required to synthesize frames (two temporal
MLPs, the spatial token encoder, the fusion MLP and the upsampling decoder).
The per-frame context embedder and the flow/regularization heads are
auxiliary: they exist only while training and never enter the bitstream.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import ConfigError

SYNTHESIS_MODULES = ("time_fuse", "time_mod", "spatial", "fusion", "decoder")
AUXILIARY_MODULES = ("context_embedder", "flow_head", "reg_head")


def positional_encoding(value, base: float, levels: int,
                        dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal encoding of a scalar (or a 1-D batch of scalars).

    Output layout is interleaved per level:
    ``(sin(b^0 pi v), cos(b^0 pi v), ..., sin(b^{l-1} pi v), cos(b^{l-1} pi v))``.
    Arguments are evaluated in float64 before the final cast; with b=1.25 and
    l=80 the top frequency is ~1e8 rad and float32 would lose the phase.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if not base > 1.0:
        raise ValueError(f"base must be > 1, got {base}")
    v = torch.as_tensor(value, dtype=torch.float64)
    if not torch.isfinite(v).all():
        raise ValueError("positional encoding input must be finite")
    freqs = base ** torch.arange(levels, dtype=torch.float64) * math.pi
    args = v.unsqueeze(-1) * freqs
    enc = torch.stack((torch.sin(args), torch.cos(args)), dim=-1)
    return enc.reshape(*v.shape, 2 * levels).to(dtype)


def make_coordinate_grid(grid_h: int, grid_w: int) -> torch.Tensor:
    """Normalized coordinate lattice over [0,1]^2, shape (2, grid_h, grid_w).

    Channel 0 is the row coordinate, channel 1 the column coordinate.
    """
    ys = torch.linspace(0.0, 1.0, grid_h) if grid_h > 1 else torch.zeros(1)
    xs = torch.linspace(0.0, 1.0, grid_w) if grid_w > 1 else torch.zeros(1)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((yy, xx), dim=0)


class TemporalMLP(nn.Module):
    """Two-layer MLP from a positional encoding to a feature vector."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, enc: torch.Tensor) -> torch.Tensor:
        return self.net(enc)


class ContextEmbedder(nn.Module):
    """1x1 convolution over the full-resolution frame, average-pooled down to
    the spatial grid. The output is the tiny per-frame tensor that travels in
    the bitstream."""

    def __init__(self, channels: int, grid_h: int, grid_w: int):
        super().__init__()
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.conv = nn.Conv2d(3, channels, kernel_size=1)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        if frame.dim() != 3 or frame.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) frame, got {tuple(frame.shape)}")
        _, h, w = frame.shape
        if h % self.grid_h or w % self.grid_w:
            raise ValueError(
                f"frame {h}x{w} not divisible by grid {self.grid_h}x{self.grid_w}")
        x = self.conv(frame)
        return F.avg_pool2d(x, (h // self.grid_h, w // self.grid_w))


class SpatialEncoder(nn.Module):
    """Coordinate tokens with optional per-frame context, mixed by a
    single-head self-attention block with a residual connection."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        grid = make_coordinate_grid(config.grid_h, config.grid_w)
        self.register_buffer("grid", grid)
        enc = torch.cat(
            [positional_encoding(grid[i].reshape(-1).double(), config.b, config.l)
             for i in range(2)], dim=-1)
        # (n_tokens, 4l): row encoding then column encoding
        self.register_buffer("grid_encoding", enc)
        in_ch = 2 * config.encoding_dim + (config.c if config.use_context_embedding else 0)
        self.token_proj = nn.Linear(in_ch, config.token_dim)
        self.norm = nn.LayerNorm(config.token_dim)
        d = config.token_dim
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def tokens(self, context: torch.Tensor | None) -> torch.Tensor:
        """Project grid encodings (plus context channels) to token width."""
        feats = self.grid_encoding
        if self.config.use_context_embedding:
            if context is None:
                raise ValueError("this model requires a per-frame context embedding")
            ctx = context.reshape(context.shape[0], -1).transpose(0, 1)
            feats = torch.cat((feats, ctx.to(feats.dtype)), dim=-1)
        elif context is not None:
            raise ValueError("context supplied but the model was built without it")
        return self.token_proj(feats)

    def transform(self, tokens: torch.Tensor) -> torch.Tensor:
        """Self-attention with residual; identity when out_proj is zero."""
        h = self.norm(tokens)
        q, k, v = self.q_proj(h), self.k_proj(h), self.v_proj(h)
        attn = torch.softmax(q @ k.transpose(0, 1) / math.sqrt(q.shape[-1]), dim=-1)
        return tokens + self.out_proj(attn @ v)

    def forward(self, context: torch.Tensor | None) -> torch.Tensor:
        return self.transform(self.tokens(context))


class FusionMLP(nn.Module):
    """Fuses the spatial tokens with the temporal vector by elementwise
    product followed by an MLP."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, tokens: torch.Tensor, time_vec: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != time_vec.shape[-1]:
            raise ConfigError(
                f"token width {tokens.shape[-1]} incompatible with temporal "
                f"width {time_vec.shape[-1]}")
        return self.net(tokens * time_vec)


class UpsampleDecoder(nn.Module):
    """Stack of conv + pixel-shuffle stages from the grid to full resolution.

    The stage-0 feature map is modulated by a channel-wise affine transform
    (scale and shift) projected from the second temporal vector; the
    projection starts at identity (zero weight, scale-one/shift-zero bias)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.mod_proj = nn.Linear(config.embed_dim, 2 * config.token_dim)
        nn.init.zeros_(self.mod_proj.weight)
        with torch.no_grad():
            self.mod_proj.bias[:config.token_dim] = 1.0
            self.mod_proj.bias[config.token_dim:] = 0.0
        convs = []
        in_ch = config.token_dim
        for out_ch, r in zip(config.stage_channels, config.upscale_factors):
            convs.append(nn.Conv2d(in_ch, out_ch * r * r, kernel_size=3, padding=1))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.factors = config.upscale_factors
        self.head = nn.Conv2d(in_ch, 3, kernel_size=3, padding=1)

    def forward(self, fmap: torch.Tensor, mod_vec: torch.Tensor):
        d = fmap.shape[0]
        mods = self.mod_proj(mod_vec)
        x = fmap * mods[:d, None, None] + mods[d:, None, None]
        for conv, r in zip(self.convs, self.factors):
            x = F.gelu(F.pixel_shuffle(conv(x), r))
        return torch.sigmoid(self.head(x)), x


@dataclass
class FrameOutputs:
    """Everything one forward pass produces for a single frame.

    Flow and regularization maps are present only in training mode."""

    frame: torch.Tensor                   # (3, H, W) in [0, 1]
    features: torch.Tensor                # last-stage feature map
    flow_fwd: torch.Tensor | None = None  # (2, H, W), channel 0 = x
    flow_bwd: torch.Tensor | None = None
    reg_map: torch.Tensor | None = None   # (2, H, W), per-pixel simplex
    context: torch.Tensor | None = None   # embedding used for this frame


class SceneModel(nn.Module):
    """The full scene representation.

    `forward_train` consumes the original frame (to derive the context
    embedding) and runs the auxiliary heads; `forward_decode` consumes a
    transmitted embedding and skips them.
    """

    def __init__(self, config: ModelConfig, include_aux: bool = True):
        super().__init__()
        config.validate()
        self.config = config
        enc_dim = config.encoding_dim
        self.time_fuse = TemporalMLP(enc_dim, config.mlp_hidden, config.embed_dim)
        self.time_mod = TemporalMLP(enc_dim, config.mlp_hidden, config.embed_dim)
        self.spatial = SpatialEncoder(config)
        self.fusion = FusionMLP(config.token_dim, config.mlp_hidden)
        self.decoder = UpsampleDecoder(config)
        if include_aux and config.use_context_embedding:
            self.context_embedder = ContextEmbedder(config.c, config.grid_h, config.grid_w)
        else:
            self.context_embedder = None
        if include_aux and config.use_flow_heads:
            last = config.stage_channels[-1]
            self.flow_head = nn.Conv2d(last, 4, kernel_size=1)
            self.reg_head = nn.Conv2d(last, 2, kernel_size=1)
        else:
            self.flow_head = None
            self.reg_head = None

    def time_feature(self, t_norm: float, head: str) -> torch.Tensor:
        """Temporal feature vector for a normalized timestamp."""
        mlp = {"fuse": self.time_fuse, "mod": self.time_mod}.get(head)
        if mlp is None:
            raise ValueError(f"unknown temporal head {head!r}")
        weight = mlp.net[0].weight
        enc = positional_encoding(t_norm, self.config.b, self.config.l,
                                  dtype=weight.dtype).to(weight.device)
        return mlp(enc)

    def context(self, frame: torch.Tensor) -> torch.Tensor:
        if self.context_embedder is None:
            raise ConfigError("model has no context embedder")
        return self.context_embedder(frame)

    def render(self, t: int, context: torch.Tensor | None = None):
        """Shared synthesis path: frame plus last-stage features."""
        cfg = self.config
        t_norm = cfg.t_norm(t)
        tokens = self.spatial(context)
        fused = self.fusion(tokens, self.time_feature(t_norm, "fuse"))
        fmap = fused.transpose(0, 1).reshape(cfg.token_dim, cfg.grid_h, cfg.grid_w)
        return self.decoder(fmap, self.time_feature(t_norm, "mod"))

    def flow_outputs(self, features: torch.Tensor):
        if self.flow_head is None or self.reg_head is None:
            raise ConfigError("model has no flow heads")
        flows = self.flow_head(features)
        reg = torch.softmax(self.reg_head(features), dim=0)
        return flows[:2], flows[2:], reg

    def forward_train(self, t: int, frame: torch.Tensor) -> FrameOutputs:
        if frame is None:
            raise ValueError("training mode requires the original frame")
        ctx = self.context(frame) if self.config.use_context_embedding else None
        out_frame, features = self.render(t, ctx)
        flow_fwd = flow_bwd = reg = None
        if self.flow_head is not None:
            flow_fwd, flow_bwd, reg = self.flow_outputs(features)
        return FrameOutputs(out_frame, features, flow_fwd, flow_bwd, reg, ctx)

    def forward_decode(self, t: int, context: torch.Tensor | None = None) -> FrameOutputs:
        if self.config.use_context_embedding and context is None:
            raise ValueError(f"decode requires the transmitted embedding for frame {t}")
        out_frame, features = self.render(t, context)
        return FrameOutputs(out_frame, features, context=context)

    def synthesis_state(self) -> "OrderedDict[str, torch.Tensor]":
        """Weights required to synthesize frames, in a fixed canonical order.

        Coordinate-grid buffers are excluded: the decoder rebuilds them from
        the config, so only learned parameters travel in the bitstream."""
        out: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, param in self.named_parameters():
            if name.split(".", 1)[0] in SYNTHESIS_MODULES:
                out[name] = param.detach()
        return out

    def auxiliary_state(self) -> "OrderedDict[str, torch.Tensor]":
        out: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, param in self.named_parameters():
            if name.split(".", 1)[0] in AUXILIARY_MODULES:
                out[name] = param.detach()
        return out

    def synthesis_param_count(self) -> int:
        return sum(t.numel() for t in self.synthesis_state().values())
