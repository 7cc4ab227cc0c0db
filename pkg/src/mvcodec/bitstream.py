"""Bitstream container: header, quantized tensor table, embedding section.

Layout (all integers little-endian):

    magic "MVC1" | version u16 | flags u8 | weight_bits u8 | embed_bits u8
    grid_h u16 | grid_w u16 | n_stages u8 | (factor u8, channels u16)*
    embed_dim u16 | token_dim u16 | mlp_hidden u16 | b f32 | l u16 | c u8
    frame_h u32 | frame_w u32 | frame_count u32
    n_tensors u16
    per tensor: name_hash u64 | ndim u8 | dim u32 * ndim | bitwidth u8
                | scale f32 | offset f32 | payload_len u32 | payload
    per frame (if flag bit 0): scale f32 | offset f32 | payload
    crc32 u32  (over everything before it)

Tensor names are not stored; the parser rebuilds the canonical synthesis
tensor list from the config and matches 64-bit FNV-1a hashes positionally,
which also proves no auxiliary-head tensor snuck into the table. Codes are
packed at their exact bitwidth with no padding inside a payload.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .config import ModelConfig
from .errors import (BadMagicError, BitstreamError, ChecksumError,
                     TruncatedStreamError, VersionError)
from .quantize import QuantizedModel, QuantizedTensor, pack_codes, unpack_codes

MAGIC = b"MVC1"
VERSION = 1

_FLAG_EMBEDDINGS = 1
_FLAG_FLOW_HEADS = 2


def fnv1a64(name: str) -> int:
    h = 0xCBF29CE484222325
    for byte in name.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass
class Bitstream:
    """Parsed (or to-be-serialized) stream contents."""

    config: ModelConfig
    quantized: QuantizedModel
    version: int = VERSION

    def __post_init__(self):
        # floats that travel as f32 are canonicalized so that
        # parse(serialize(b)) == b holds field for field
        if self.config.b != _f32(self.config.b):
            self.config = replace(self.config, b=_f32(self.config.b))

    @property
    def payload_bits(self) -> int:
        """Exact bit count of tensor plus embedding codes (no headers)."""
        return self.quantized.tensor_bits + self.quantized.embedding_bits


def synthesis_tensor_names(config: ModelConfig) -> list[str]:
    """Canonical order of synthesis tensors for this architecture."""
    from .model import SceneModel
    model = SceneModel(config, include_aux=False)
    return list(model.synthesis_state().keys())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise TruncatedStreamError(
                f"stream ended at byte {len(self.data)}, needed {self.pos + size}")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def read_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(
                f"stream ended at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def serialize_bitstream(bs: Bitstream) -> bytes:
    cfg = bs.config
    qm = bs.quantized
    expected = synthesis_tensor_names(cfg)
    got = [t.name for t in qm.tensors]
    if got != expected:
        raise BitstreamError(
            "tensor table must hold exactly the synthesis tensors in canonical "
            f"order; got {got[:3]}... expected {expected[:3]}...")
    if cfg.use_context_embedding and len(qm.embeddings) != cfg.frame_count:
        raise BitstreamError(
            f"{len(qm.embeddings)} embeddings for {cfg.frame_count} frames")

    out = bytearray()
    out += MAGIC
    flags = (_FLAG_EMBEDDINGS if cfg.use_context_embedding else 0) \
        | (_FLAG_FLOW_HEADS if cfg.use_flow_heads else 0)
    out += struct.pack("<HBBB", bs.version, flags, qm.weight_bitwidth, qm.embed_bitwidth)
    out += struct.pack("<HHB", cfg.grid_h, cfg.grid_w, len(cfg.stage_channels))
    for factor, ch in zip(cfg.upscale_factors, cfg.stage_channels):
        out += struct.pack("<BH", factor, ch)
    out += struct.pack("<HHHfHB", cfg.embed_dim, cfg.token_dim, cfg.mlp_hidden,
                       cfg.b, cfg.l, cfg.c)
    out += struct.pack("<III", cfg.frame_h, cfg.frame_w, cfg.frame_count)

    out += struct.pack("<H", len(qm.tensors))
    for t in qm.tensors:
        payload = pack_codes(t.codes, t.bitwidth)
        out += struct.pack("<QB", fnv1a64(t.name), len(t.shape))
        out += struct.pack(f"<{len(t.shape)}I", *t.shape)
        out += struct.pack("<BffI", t.bitwidth, t.scale, t.offset, len(payload))
        out += payload

    if cfg.use_context_embedding:
        for e in qm.embeddings:
            out += struct.pack("<ff", e.scale, e.offset)
            out += pack_codes(e.codes, e.bitwidth)

    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def parse_bitstream(data: bytes) -> Bitstream:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a model-based video codec stream")
    r = _Reader(data)
    r.pos = 4
    version, flags, weight_bits, embed_bits = r.read("<HBBB")
    if version != VERSION:
        raise VersionError(f"stream version {version}, reader supports {VERSION}")
    grid_h, grid_w, n_stages = r.read("<HHB")
    factors, channels = [], []
    for _ in range(n_stages):
        f, ch = r.read("<BH")
        factors.append(f)
        channels.append(ch)
    embed_dim, token_dim, mlp_hidden, b, l, c = r.read("<HHHfHB")
    frame_h, frame_w, frame_count = r.read("<III")
    try:
        config = ModelConfig(
            frame_h=frame_h, frame_w=frame_w, frame_count=frame_count,
            grid_h=grid_h, grid_w=grid_w,
            upscale_factors=tuple(factors), stage_channels=tuple(channels),
            embed_dim=embed_dim, token_dim=token_dim, mlp_hidden=mlp_hidden,
            b=b, l=l, c=c,
            use_context_embedding=bool(flags & _FLAG_EMBEDDINGS),
            use_flow_heads=bool(flags & _FLAG_FLOW_HEADS))
    except Exception as exc:
        raise BitstreamError(f"header holds an invalid config: {exc}") from exc

    expected = synthesis_tensor_names(config)
    (n_tensors,) = r.read("<H")
    if n_tensors != len(expected):
        raise BitstreamError(
            f"tensor table holds {n_tensors} tensors, architecture needs "
            f"{len(expected)}")
    tensors = []
    for name in expected:
        name_hash, ndim = r.read("<QB")
        if name_hash != fnv1a64(name):
            raise BitstreamError(
                f"tensor hash mismatch at {name!r}: stream does not match the "
                "declared architecture")
        shape = r.read(f"<{ndim}I")
        bitwidth, scale, offset, payload_len = r.read("<BffI")
        payload = r.read_bytes(payload_len)
        count = int(np.prod(shape)) if shape else 1
        if payload_len != (count * bitwidth + 7) // 8:
            raise BitstreamError(f"payload length mismatch for tensor {name!r}")
        codes = unpack_codes(payload, bitwidth, count)
        tensors.append(QuantizedTensor(name, shape, bitwidth, scale, offset, codes))

    embeddings = []
    if flags & _FLAG_EMBEDDINGS:
        numel = config.embedding_numel
        nbytes = (numel * embed_bits + 7) // 8
        for t in range(frame_count):
            scale, offset = r.read("<ff")
            codes = unpack_codes(r.read_bytes(nbytes), embed_bits, numel)
            embeddings.append(QuantizedTensor(
                f"frame_{t}", (config.c, config.grid_h, config.grid_w),
                embed_bits, scale, offset, codes))

    (stored_crc,) = r.read("<I")
    if r.pos != len(data):
        raise TruncatedStreamError(
            f"{len(data) - r.pos} unexpected trailing bytes")
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    return Bitstream(
        config=config,
        quantized=QuantizedModel(tensors=tensors, embeddings=embeddings,
                                 weight_bitwidth=weight_bits,
                                 embed_bitwidth=embed_bits),
        version=version)
