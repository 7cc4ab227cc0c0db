"""Per-tensor uniform affine quantization.

The grid spans the exact value range of each tensor: ``offset = min``,
``scale = (max - min) / (2^bits - 1)``. Rounding is half-away-from-zero so
streams are bit-exact across platforms. Constant tensors degenerate to
``scale = 0`` with all-zero codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class QuantizedTensor:
    """Integer codes plus the affine grid that restores real values."""

    name: str
    shape: tuple[int, ...]
    bitwidth: int
    scale: float
    offset: float
    codes: np.ndarray   # uint16, flattened, every value < 2**bitwidth

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint16)

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def payload_bits(self) -> int:
        return self.numel * self.bitwidth

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (self.name == other.name and self.shape == other.shape
                and self.bitwidth == other.bitwidth
                and self.scale == other.scale and self.offset == other.offset
                and np.array_equal(self.codes, other.codes))


def quantize_tensor(values: torch.Tensor, bitwidth: int, name: str = "") -> QuantizedTensor:
    """Quantize a tensor onto a uniform grid spanning its value range."""
    if not (2 <= bitwidth <= 16):
        raise ValueError(f"bitwidth must be in [2, 16], got {bitwidth}")
    if values.numel() == 0:
        raise ValueError(f"cannot quantize empty tensor {name!r}")
    arr = values.detach().cpu().numpy().astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite values in tensor {name!r}")
    lo = float(arr.min())
    hi = float(arr.max())
    levels = (1 << bitwidth) - 1
    if hi == lo:
        codes = np.zeros(arr.size, dtype=np.uint16)
        return QuantizedTensor(name, arr.shape, bitwidth, 0.0, lo, codes)
    scale = float(np.float32((hi - lo) / levels))
    # half-away-from-zero; arguments are nonnegative so floor(x + 0.5) suffices.
    # Rounding runs in float64 so the scale/2 error bound is not eroded.
    q = np.floor((arr.reshape(-1).astype(np.float64) - lo) / scale + 0.5)
    codes = np.clip(q, 0, levels).astype(np.uint16)
    return QuantizedTensor(name, arr.shape, bitwidth, scale, lo, codes)


def dequantize_tensor(q: QuantizedTensor) -> torch.Tensor:
    """Restore real values: ``offset + scale * code``."""
    if q.codes.size and int(q.codes.max()) >= (1 << q.bitwidth):
        raise ValueError(
            f"code {int(q.codes.max())} out of range for {q.bitwidth}-bit tensor "
            f"{q.name!r}")
    vals = np.float32(q.offset) + np.float32(q.scale) * q.codes.astype(np.float32)
    return torch.from_numpy(vals.reshape(q.shape).astype(np.float32))


def pack_codes(codes: np.ndarray, bitwidth: int) -> bytes:
    """Pack codes at exact bitwidth, LSB-first, no padding between codes.

    Only the final byte may carry (zero) fill bits.
    """
    n = codes.size
    if n == 0:
        return b""
    u16 = np.ascontiguousarray(codes, dtype="<u2")
    bits = np.unpackbits(u16.view(np.uint8).reshape(-1, 2), axis=1,
                         bitorder="little")[:, :bitwidth]
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(payload: bytes, bitwidth: int, count: int) -> np.ndarray:
    """Inverse of `pack_codes` for a known code count."""
    need = (count * bitwidth + 7) // 8
    if len(payload) < need:
        raise ValueError(f"payload holds {len(payload)} bytes, need {need}")
    bits = np.unpackbits(np.frombuffer(payload, np.uint8, need), bitorder="little")
    bits = bits[:count * bitwidth].reshape(count, bitwidth).astype(np.uint16)
    weights = (np.uint16(1) << np.arange(bitwidth, dtype=np.uint16))
    return (bits * weights).sum(axis=1, dtype=np.uint16)


@dataclass
class QuantizedModel:
    """A model after post-training quantization: everything the decoder needs
    besides the architecture config."""

    tensors: list[QuantizedTensor]
    embeddings: list[QuantizedTensor] = field(default_factory=list)
    weight_bitwidth: int = 8
    embed_bitwidth: int = 8

    @property
    def param_count(self) -> int:
        return sum(t.numel for t in self.tensors)

    @property
    def embedding_bits(self) -> int:
        return sum(e.payload_bits for e in self.embeddings)

    @property
    def tensor_bits(self) -> int:
        return sum(t.payload_bits for t in self.tensors)


def quantize_state(state: dict[str, torch.Tensor], bitwidth: int) -> list[QuantizedTensor]:
    return [quantize_tensor(tensor, bitwidth, name) for name, tensor in state.items()]


def quantize_embeddings(embeddings: torch.Tensor, bitwidth: int = 8) -> list[QuantizedTensor]:
    """Per-frame grids: each frame's context tensor gets its own range."""
    return [quantize_tensor(embeddings[t], bitwidth, f"frame_{t}")
            for t in range(embeddings.shape[0])]
