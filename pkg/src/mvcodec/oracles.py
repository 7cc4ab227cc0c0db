"""External supervision oracles: optical-flow targets and frame embeddings.

Both oracles are pluggable. The "pretrained" implementations wrap large
published networks and need their weights on disk; the "fallback"
implementations are small, deterministic and self-contained, so the whole
pipeline can run (and be tested) without downloading anything.

Flow convention: `estimate(prev, cur)` returns (forward, backward) fields of
shape (2, H, W) in pixels/frame, channel 0 horizontal, channel 1 vertical.
Forward displaces content of `prev` onto `cur`; backward the reverse.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, OracleUnavailableError, TruncatedStreamError

CACHE_ENV_VAR = "MVCODEC_CACHE_DIR"

EMBED_DIM = 512


# ---------------------------------------------------------------------------
# Optical flow
# ---------------------------------------------------------------------------

class BlockMatchingFlow:
    """Hierarchical block matching with parabolic subpixel refinement; the
    self-contained flow oracle.

    A global translation is estimated first over the whole frame; each block
    of the current frame is then matched under SAD plus a small quadratic
    penalty toward the global motion, which resolves the aperture ambiguity
    of locally one-dimensional patterns. The winning displacement is refined
    by fitting a parabola through neighboring costs and the block-grid field
    is upsampled bilinearly. Rigid integer shifts within the search radius
    are recovered exactly (away from borders): the cost minimum sits on the
    lattice and the refinement vanishes there.
    """

    oracle_id = "fallback"

    def __init__(self, block_size: int = 8, search_radius: int = 4,
                 global_prior: float = 0.01):
        self.block_size = block_size
        self.search_radius = search_radius
        self.global_prior = global_prior

    @staticmethod
    def _parabolic(c_minus: np.ndarray, c0: np.ndarray, c_plus: np.ndarray,
                   valid: np.ndarray) -> np.ndarray:
        denom = c_minus - 2.0 * c0 + c_plus
        # c0 == 0 is a perfect lattice match; refinement must not move it
        ok = valid & (denom > 1e-12) & (c0 > 0)
        sub = np.zeros_like(c0)
        sub[ok] = 0.5 * (c_minus[ok] - c_plus[ok]) / denom[ok]
        return np.clip(sub, -0.5, 0.5)

    def _match(self, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        """Flow from src to dst: dst[y, x] ~ src[y - v, x - u]."""
        h, w = dst.shape
        bs, r = self.block_size, self.search_radius
        pad = np.pad(src, r, mode="edge")
        ny, nx = h // bs, w // bs
        # small displacements first so SAD ties resolve to the least motion
        offsets = sorted(((dy, dx) for dy in range(-r, r + 1)
                          for dx in range(-r, r + 1)),
                         key=lambda d: (abs(d[0]) + abs(d[1]), d))
        index_of = np.full((2 * r + 1, 2 * r + 1), -1, dtype=np.int64)
        costs = np.empty((len(offsets), ny, nx))
        for i, (dy, dx) in enumerate(offsets):
            index_of[dy + r, dx + r] = i
            cand = pad[r - dy: r - dy + h, r - dx: r - dx + w]
            diff = np.abs(dst - cand)
            costs[i] = diff.reshape(ny, bs, nx, bs).sum(axis=(1, 3))
        costs /= bs * bs  # mean abs difference, comparable across block sizes

        # coarse level: one translation for the whole frame, then a quadratic
        # pull toward it so texture-free directions inherit the global motion
        off = np.asarray(offsets, dtype=np.float64)
        total = costs.sum(axis=(1, 2))
        g = int(total.argmin())
        gy, gx = off[g]
        penalty = self.global_prior * ((off[:, 0] - gy) ** 2 + (off[:, 1] - gx) ** 2)
        flat = (costs + penalty[:, None, None]).reshape(len(offsets), -1)
        raw_flat = costs.reshape(len(offsets), -1)
        best = flat.argmin(axis=0)
        dy0 = off[best, 0].astype(np.int64)
        dx0 = off[best, 1].astype(np.int64)
        cols = np.arange(flat.shape[1])
        c0 = flat[best, cols]
        raw_c0 = raw_flat[best, cols]

        def neighbor_cost(ddy, ddx):
            yy = np.clip(dy0 + ddy, -r, r)
            xx = np.clip(dx0 + ddx, -r, r)
            valid = (np.abs(dy0 + ddy) <= r) & (np.abs(dx0 + ddx) <= r)
            return flat[index_of[yy + r, xx + r], cols], valid

        cxm, vxm = neighbor_cost(0, -1)
        cxp, vxp = neighbor_cost(0, 1)
        cym, vym = neighbor_cost(-1, 0)
        cyp, vyp = neighbor_cost(1, 0)
        exact = raw_c0 <= 0
        fx = dx0 + self._parabolic(cxm, c0, cxp, vxm & vxp & ~exact)
        fy = dy0 + self._parabolic(cym, c0, cyp, vym & vyp & ~exact)

        grid = torch.from_numpy(
            np.stack((fx, fy)).reshape(2, ny, nx).astype(np.float32))
        field = F.interpolate(grid.unsqueeze(0), size=(h, w), mode="bilinear",
                              align_corners=False)
        return field.squeeze(0).numpy()

    def estimate(self, prev: torch.Tensor, cur: torch.Tensor):
        if prev.shape != cur.shape:
            raise ValueError("frame pair must share one shape")
        # mean-centering makes the match invariant to global exposure changes
        prev_g = prev.mean(dim=0).cpu().numpy().astype(np.float64)
        cur_g = cur.mean(dim=0).cpu().numpy().astype(np.float64)
        prev_g -= prev_g.mean()
        cur_g -= cur_g.mean()
        h, w = cur_g.shape
        if h % self.block_size or w % self.block_size:
            raise ValueError(
                f"frame {h}x{w} not divisible into {self.block_size}px blocks")
        fwd = torch.from_numpy(self._match(prev_g, cur_g))
        bwd = torch.from_numpy(self._match(cur_g, prev_g))
        return fwd, bwd


class RaftFlow:
    """Wrapper around a published recurrent flow network (torchvision)."""

    oracle_id = "pretrained"

    def __init__(self):
        try:
            from torchvision.models.optical_flow import (Raft_Small_Weights,
                                                         raft_small)
            self._net = raft_small(weights=Raft_Small_Weights.DEFAULT).eval()
        except Exception as exc:  # missing package or weights not downloadable
            raise OracleUnavailableError(
                f"pretrained flow oracle unavailable: {exc}") from exc

    @torch.no_grad()
    def estimate(self, prev: torch.Tensor, cur: torch.Tensor):
        if prev.shape != cur.shape:
            raise ValueError("frame pair must share one shape")
        a = prev.unsqueeze(0) * 2 - 1
        b = cur.unsqueeze(0) * 2 - 1
        fwd = self._net(a, b)[-1][0]
        bwd = self._net(b, a)[-1][0]
        return fwd, bwd


def make_flow_oracle(kind: str):
    if kind == "fallback":
        return BlockMatchingFlow()
    if kind == "pretrained":
        return RaftFlow()
    raise ConfigError(f"unknown flow oracle {kind!r}")


# ---------------------------------------------------------------------------
# Frame embeddings
# ---------------------------------------------------------------------------

class RandomConvEmbedding(nn.Module):
    """Frozen random convolutional stack with global average pooling.

    Weights come from a fixed-seed generator, so the embedding is a
    deterministic, differentiable function of the input frame.
    """

    oracle_id = "fallback"

    def __init__(self, seed: int = 0x5EED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [(3, 16, 4), (16, 32, 2), (32, 64, 2)]
        convs = []
        for cin, cout, stride in widths:
            conv = nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / (9 * cin)) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        proj = nn.Conv2d(64, EMBED_DIM, kernel_size=1)
        with torch.no_grad():
            proj.weight.copy_(torch.randn(proj.weight.shape, generator=gen)
                              * (1.0 / 64) ** 0.5)
            proj.bias.copy_(torch.randn(proj.bias.shape, generator=gen) * 0.1)
        self.proj = proj
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        x = frame.unsqueeze(0) if frame.dim() == 3 else frame
        for conv in self.convs:
            x = F.gelu(conv(x))
        x = self.proj(x)
        return x.mean(dim=(-2, -1)).squeeze(0)

    def extract(self, frame: torch.Tensor) -> torch.Tensor:
        return self(frame)


class ResNetEmbedding(nn.Module):
    """Frozen pretrained classification trunk with global pooling (torchvision)."""

    oracle_id = "pretrained"

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import ResNet34_Weights, resnet34
            net = resnet34(weights=ResNet34_Weights.IMAGENET1K_V1).eval()
        except Exception as exc:
            raise OracleUnavailableError(
                f"pretrained embedding oracle unavailable: {exc}") from exc
        self.trunk = nn.Sequential(*list(net.children())[:-1])
        for p in self.parameters():
            p.requires_grad_(False)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        x = frame.unsqueeze(0) if frame.dim() == 3 else frame
        x = (x - self.mean) / self.std
        return self.trunk(x).flatten(1).squeeze(0)

    def extract(self, frame: torch.Tensor) -> torch.Tensor:
        return self(frame)


def make_embedding_oracle(kind: str):
    if kind == "fallback":
        return RandomConvEmbedding()
    if kind == "pretrained":
        return ResNetEmbedding()
    raise ConfigError(f"unknown embedding oracle {kind!r}")


class EmbeddingBuffer:
    """Latest embedding per frame index; at most one entry per index.

    `window(t, span)` returns the entries with indices in [t - span, t - 1],
    most recent timestamp first. The query frame itself is never included.
    """

    def __init__(self, capacity: int = 512):
        self.capacity = capacity
        self._store: dict[int, torch.Tensor] = {}

    def put(self, t: int, embedding: torch.Tensor) -> None:
        self._store[t] = embedding.detach()
        if len(self._store) > self.capacity:
            self._store.pop(min(self._store))

    def window(self, t: int, span: int) -> list[tuple[int, torch.Tensor]]:
        lo = max(0, t - span)
        idx = [j for j in range(t - 1, lo - 1, -1) if j in self._store]
        return [(j, self._store[j]) for j in idx]

    def __len__(self) -> int:
        return len(self._store)


# ---------------------------------------------------------------------------
# Flow target cache
# ---------------------------------------------------------------------------

_FLOW_MAGIC = b"MVFC"


def flow_cache_key(frames: torch.Tensor, oracle_id: str) -> str:
    """Content hash of the sequence + oracle identity."""
    h = hashlib.blake2b(digest_size=16)
    h.update(oracle_id.encode())
    h.update(struct.pack("<4I", *frames.shape))
    arr = (frames.clamp(0, 1) * 255).round().to(torch.uint8).cpu().numpy()
    h.update(arr.tobytes())
    return h.hexdigest()


def save_flow_records(path: Path, records: dict[int, tuple[torch.Tensor, torch.Tensor]]):
    """Binary container of (t, forward, backward) float32 records."""
    ts = sorted(records)
    with open(path, "wb") as f:
        f.write(_FLOW_MAGIC)
        f.write(struct.pack("<I", len(ts)))
        for t in ts:
            fwd, bwd = records[t]
            _, h, w = fwd.shape
            f.write(struct.pack("<IHH", t, h, w))
            f.write(fwd.cpu().numpy().astype("<f4").tobytes())
            f.write(bwd.cpu().numpy().astype("<f4").tobytes())


def load_flow_records(path: Path) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:4] != _FLOW_MAGIC:
        raise ValueError(f"{path} is not a flow cache file")
    pos = 4
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    records = {}
    for _ in range(count):
        if pos + 8 > len(data):
            raise TruncatedStreamError(f"flow cache {path} ends mid-record")
        t, h, w = struct.unpack_from("<IHH", data, pos)
        pos += 8
        n = 2 * h * w * 4
        if pos + 2 * n > len(data):
            raise TruncatedStreamError(f"flow cache {path} ends mid-record")
        fwd = np.frombuffer(data, "<f4", 2 * h * w, pos).reshape(2, h, w)
        bwd = np.frombuffer(data, "<f4", 2 * h * w, pos + n).reshape(2, h, w)
        pos += 2 * n
        records[t] = (torch.from_numpy(fwd.copy()), torch.from_numpy(bwd.copy()))
    return records


def default_cache_dir() -> Path:
    override = os.environ.get(CACHE_ENV_VAR)
    if override:
        return Path(override)
    return Path.home() / ".cache" / "mvcodec"


def compute_flow_targets(frames: torch.Tensor, oracle,
                         cache_dir: Path | None = None,
                         ) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
    """Flow targets for every consecutive pair, computed once per sequence.

    Frame 0 has no predecessor and gets no record. When `cache_dir` is given
    the records are stored under a content-hash filename and reused.
    """
    path = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        path = cache_dir / f"flow_{flow_cache_key(frames, oracle.oracle_id)}.bin"
        if path.exists():
            return load_flow_records(path)
    records = {}
    for t in range(1, frames.shape[0]):
        records[t] = oracle.estimate(frames[t - 1], frames[t])
    if path is not None:
        save_flow_records(path, records)
    return records
