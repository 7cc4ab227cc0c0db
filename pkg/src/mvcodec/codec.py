"""Encoder (per-video optimization), decoder (random-access synthesis) and
rate accounting.

Encoding a video means overfitting the scene network to it under the full
objective, then post-training-quantizing the synthesis weights and the
per-frame context embeddings into a bitstream. Decoding rebuilds the network
from the header, dequantizes once, and renders any requested frame
independently of decode order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import losses
from .bitstream import Bitstream, parse_bitstream, serialize_bitstream
from .config import ModelConfig, TrainConfig
from .errors import ConfigError, EncodingDivergedError
from .model import FrameOutputs, SceneModel
from .oracles import EmbeddingBuffer, compute_flow_targets
from .quantize import (QuantizedModel, dequantize_tensor, quantize_embeddings,
                       quantize_state)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    l_spa: float
    l_freq: float
    l_flow: float
    l_ent: float
    l_cont: float
    l_total: float
    psnr: float


@dataclass
class EncodeResult:
    model: SceneModel
    embeddings: torch.Tensor | None   # (T, c, grid_h, grid_w) or None
    log: list[EpochStats] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def encode(frames: torch.Tensor, config: ModelConfig, train: TrainConfig,
           flow_oracle=None, embed_oracle=None,
           cache_dir: Path | None = None, progress=None) -> EncodeResult:
    """Overfit the scene network to a (T, 3, H, W) tensor of frames.

    Frames are visited sequentially within each epoch (batch size 1) so the
    contrastive buffer stays fresh; the learning rate decays by `lr_decay`
    every `lr_decay_every` epochs. Deterministic for a fixed seed.
    """
    if frames.dim() != 4 or frames.shape[0] == 0:
        raise ConfigError(f"expected a nonempty (T, 3, H, W) tensor, got {tuple(frames.shape)}")
    t_count, _, h, w = frames.shape
    if (t_count, h, w) != (config.frame_count, config.frame_h, config.frame_w):
        raise ConfigError(
            f"video is {t_count}x{h}x{w}, config expects "
            f"{config.frame_count}x{config.frame_h}x{config.frame_w}")
    use_flow = train.use_flow_loss and config.use_flow_heads and t_count > 1
    if use_flow and flow_oracle is None:
        raise ConfigError("flow loss enabled but no flow oracle supplied")
    use_cont = train.use_contrastive_loss and t_count > 1
    if use_cont and embed_oracle is None:
        raise ConfigError("contrastive loss enabled but no embedding oracle supplied")

    torch.manual_seed(train.seed)
    model = SceneModel(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=train.lr0)

    flow_targets = {}
    if use_flow:
        flow_targets = compute_flow_targets(frames, flow_oracle, cache_dir)

    buffer = EmbeddingBuffer(capacity=max(train.weights.window, t_count))
    weights = train.weights
    zero = torch.zeros(())
    started = time.monotonic()
    log: list[EpochStats] = []
    steps = 0
    done = False

    for epoch in range(train.epochs):
        lr = train.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        acc = {k: [] for k in ("spa", "freq", "flow", "ent", "cont", "total", "psnr")}

        for t in range(t_count):
            target = frames[t]
            out: FrameOutputs = model.forward_train(t, target)

            l_spa = losses.loss_spa(out.frame, target, weights.alpha)
            l_freq = losses.loss_freq(out.frame, target) if train.use_freq_loss else zero
            if use_flow and t > 0:
                gt_f, gt_b = flow_targets[t]
                l_flow = losses.loss_flow(out.flow_fwd, out.flow_bwd, gt_f, gt_b,
                                          out.reg_map, regularized=train.flow_regularized)
                l_ent = losses.loss_ent(out.reg_map) if train.flow_regularized else zero
            else:
                l_flow = zero
                l_ent = zero
            if use_cont:
                window = buffer.window(t, weights.window)
            else:
                window = []
            if window:
                h_t = embed_oracle.extract(out.frame)
                prev = torch.stack([e for _, e in window])
                gw = losses.gaussian_weights(t, [j for j, _ in window], weights.sigma2)
                l_cont = losses.loss_cont(h_t, prev, gw, weights.tau)
            else:
                h_t = None
                l_cont = zero

            try:
                total = losses.loss_total(l_spa, l_freq, l_flow, l_ent, l_cont, weights)
            except ValueError as exc:
                raise EncodingDivergedError(
                    f"epoch {epoch}, frame {t}: {exc}") from exc

            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            steps += 1

            if use_cont:
                with torch.no_grad():
                    stored = h_t.detach() if h_t is not None \
                        else embed_oracle.extract(out.frame.detach())
                buffer.put(t, stored)

            with torch.no_grad():
                mse = torch.mean((out.frame.detach() - target) ** 2)
                psnr = 10.0 * math.log10(1.0 / max(float(mse), 1e-12))
            acc["spa"].append(l_spa.item())
            acc["freq"].append(l_freq.item())
            acc["flow"].append(l_flow.item())
            acc["ent"].append(l_ent.item())
            acc["cont"].append(l_cont.item())
            acc["total"].append(total.item())
            acc["psnr"].append(psnr)

            if train.max_steps is not None and steps >= train.max_steps:
                done = True
                break

        stats = EpochStats(epoch, lr, _mean(acc["spa"]), _mean(acc["freq"]),
                           _mean(acc["flow"]), _mean(acc["ent"]), _mean(acc["cont"]),
                           _mean(acc["total"]), _mean(acc["psnr"]))
        log.append(stats)
        if progress is not None:
            progress(stats)
        if done:
            break

    embeddings = None
    if config.use_context_embedding:
        with torch.no_grad():
            embeddings = torch.stack([model.context(frames[t]) for t in range(t_count)])
    model.eval()
    return EncodeResult(model=model, embeddings=embeddings, log=log, steps=steps,
                        seconds=time.monotonic() - started)


def build_bitstream(result: EncodeResult, weight_bitwidth: int = 8,
                    embed_bitwidth: int = 8) -> Bitstream:
    """Quantize a trained model into a stream container."""
    tensors = quantize_state(result.model.synthesis_state(), weight_bitwidth)
    embeddings = []
    if result.model.config.use_context_embedding:
        if result.embeddings is None:
            raise ConfigError("model transmits embeddings but none were computed")
        embeddings = quantize_embeddings(result.embeddings, embed_bitwidth)
    quantized = QuantizedModel(tensors=tensors, embeddings=embeddings,
                               weight_bitwidth=weight_bitwidth,
                               embed_bitwidth=embed_bitwidth)
    return Bitstream(config=result.model.config, quantized=quantized)


class Decoder:
    """Random-access frame synthesis from a quantized model.

    Dequantization happens once at construction; decoding frame t afterwards
    is a pure forward pass, independent of any other decode call.
    """

    def __init__(self, bitstream: Bitstream):
        self.config = bitstream.config
        state = {t.name: dequantize_tensor(t) for t in bitstream.quantized.tensors}
        self.model = SceneModel(self.config, include_aux=False)
        self.model.load_state_dict(state, strict=False)
        self.model.eval()
        if self.config.use_context_embedding:
            self.embeddings = torch.stack(
                [dequantize_tensor(e) for e in bitstream.quantized.embeddings])
        else:
            self.embeddings = None

    @classmethod
    def from_bytes(cls, data: bytes) -> "Decoder":
        return cls(parse_bitstream(data))

    @torch.no_grad()
    def decode_frame(self, t: int) -> torch.Tensor:
        if not (0 <= t < self.config.frame_count):
            raise ValueError(f"frame index {t} out of range [0, {self.config.frame_count})")
        ctx = self.embeddings[t] if self.embeddings is not None else None
        return self.model.forward_decode(t, ctx).frame

    @torch.no_grad()
    def decode_all(self) -> torch.Tensor:
        return torch.stack([self.decode_frame(t) for t in range(self.config.frame_count)])


def float_decode(result: EncodeResult) -> torch.Tensor:
    """Decode every frame with unquantized weights and embeddings (the
    quantization-free reference point for rate-distortion deltas)."""
    model = result.model
    model.eval()
    frames = []
    with torch.no_grad():
        for t in range(model.config.frame_count):
            ctx = result.embeddings[t] if result.embeddings is not None else None
            frames.append(model.forward_decode(t, ctx).frame)
    return torch.stack(frames)


def compute_bpp(n_params: int, quant_bit: int, fe_bits: int,
                frame_count: int, width: int, height: int) -> float:
    """Bits per pixel: (NP x QuantBit + FE) / (FN x W x H).

    Counts only synthesis parameters and embedding code bits, the way
    published rate numbers for model-based codecs are reported.
    """
    if frame_count < 1 or width < 1 or height < 1:
        raise ValueError("frame count and frame size must be positive")
    if n_params < 0 or fe_bits < 0 or quant_bit < 1:
        raise ValueError("negative payload sizes make no sense")
    return (n_params * quant_bit + fe_bits) / (frame_count * width * height)


def bpp_of_bitstream(bs: Bitstream, serialized_len: int | None = None) -> dict[str, float]:
    """Rate summary of a stream.

    `model_bpp` is the parameter-count formula; `payload_bpp` counts actual
    packed code bits (equal when every tensor shares one bitwidth);
    `file_bpp` includes headers, scales and the checksum.
    """
    cfg = bs.config
    qm = bs.quantized
    pixels = cfg.frame_count * cfg.frame_w * cfg.frame_h
    fe_bits = qm.embedding_bits
    out = {
        "model_bpp": compute_bpp(qm.param_count, qm.weight_bitwidth, fe_bits,
                                 cfg.frame_count, cfg.frame_w, cfg.frame_h),
        "payload_bpp": (qm.tensor_bits + fe_bits) / pixels,
        "n_params": float(qm.param_count),
    }
    if serialized_len is not None:
        out["file_bpp"] = serialized_len * 8 / pixels
    return out


def encode_to_file(frames, config, train, path, weight_bitwidth: int = 8,
                   embed_bitwidth: int = 8, **kwargs) -> tuple[EncodeResult, Bitstream]:
    result = encode(frames, config, train, **kwargs)
    bs = build_bitstream(result, weight_bitwidth, embed_bitwidth)
    Path(path).write_bytes(serialize_bitstream(bs))
    return result, bs


def decode_from_file(path) -> Decoder:
    return Decoder.from_bytes(Path(path).read_bytes())
