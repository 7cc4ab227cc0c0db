"""Frame ingestion and the deterministic synthetic test sequence.

PNG directories are read in lexicographic order; raw YUV 4:2:0 files are
converted with the BT.709 full-range matrix. All frames become float32 RGB
tensors in [0, 1], shape (3, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image


@dataclass
class VideoSequence:
    frames: torch.Tensor           # (T, 3, H, W) float32 in [0, 1]
    fps: float = 30.0              # metadata only
    source: str = ""

    def __post_init__(self):
        if self.frames.dim() != 4 or self.frames.shape[0] == 0 or self.frames.shape[1] != 3:
            raise ValueError(
                f"frames must be a nonempty (T, 3, H, W) tensor, got {tuple(self.frames.shape)}")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_h(self) -> int:
        return self.frames.shape[2]

    @property
    def frame_w(self) -> int:
        return self.frames.shape[3]


def load_png_dir(path) -> VideoSequence:
    path = Path(path)
    files = sorted(p for p in path.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"no image files in {path}")
    frames = []
    shape = None
    for p in files:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(f"{p.name} is {arr.shape[:2]}, expected {shape[:2]}")
        frames.append(torch.from_numpy(arr).permute(2, 0, 1))
    return VideoSequence(torch.stack(frames), source=str(path))


# BT.709 full-range YCbCr -> RGB
_KR, _KB = 0.2126, 0.0722
_KG = 1.0 - _KR - _KB


def yuv_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Full-range BT.709 conversion of planar uint8 data, output (H, W, 3)."""
    yn = y.astype(np.float32) / 255.0
    cb = (u.astype(np.float32) - 128.0) / 255.0
    cr = (v.astype(np.float32) - 128.0) / 255.0
    r = yn + 2.0 * (1.0 - _KR) * cr
    b = yn + 2.0 * (1.0 - _KB) * cb
    g = (yn - _KR * r - _KB * b) / _KG
    return np.clip(np.stack((r, g, b), axis=-1), 0.0, 1.0)


def load_yuv420(path, width: int, height: int,
                frame_count: int | None = None) -> VideoSequence:
    """Raw planar 4:2:0, chroma upsampled nearest-neighbor."""
    data = Path(path).read_bytes()
    frame_bytes = width * height * 3 // 2
    if width % 2 or height % 2:
        raise ValueError("4:2:0 needs even frame dimensions")
    if frame_count is None:
        if len(data) == 0 or len(data) % frame_bytes:
            raise ValueError(
                f"file holds {len(data)} bytes, not a multiple of {frame_bytes}")
        frame_count = len(data) // frame_bytes
    elif len(data) < frame_count * frame_bytes:
        raise ValueError(
            f"file holds {len(data)} bytes, {frame_count} frames need "
            f"{frame_count * frame_bytes}")
    frames = []
    for t in range(frame_count):
        base = t * frame_bytes
        yp = np.frombuffer(data, np.uint8, width * height, base)
        yp = yp.reshape(height, width)
        usz = (width // 2) * (height // 2)
        up = np.frombuffer(data, np.uint8, usz, base + width * height)
        vp = np.frombuffer(data, np.uint8, usz, base + width * height + usz)
        up = up.reshape(height // 2, width // 2).repeat(2, 0).repeat(2, 1)
        vp = vp.reshape(height // 2, width // 2).repeat(2, 0).repeat(2, 1)
        rgb = yuv_to_rgb(yp, up, vp)
        frames.append(torch.from_numpy(rgb).permute(2, 0, 1))
    return VideoSequence(torch.stack(frames), source=str(path))


def load_frames(path, format: str = "png_dir", width: int | None = None,
                height: int | None = None, frame_count: int | None = None) -> VideoSequence:
    if format == "png_dir":
        return load_png_dir(path)
    if format == "yuv420":
        if width is None or height is None:
            raise ValueError("yuv420 input needs explicit width and height")
        return load_yuv420(path, width, height, frame_count)
    raise ValueError(f"unknown input format {format!r}")


def write_png_dir(frames: torch.Tensor, path, prefix: str = "frame") -> list[Path]:
    """Write frames as 8-bit PNGs; exact round trip for 8-bit-derived data."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    arr = (frames.clamp(0, 1) * 255.0).round().to(torch.uint8).cpu().numpy()
    for t in range(arr.shape[0]):
        p = path / f"{prefix}_{t:04d}.png"
        Image.fromarray(arr[t].transpose(1, 2, 0)).save(p)
        written.append(p)
    return written


def _smooth_noise(rng: np.random.Generator, h: int, w: int, blur: int = 3) -> np.ndarray:
    """Low-pass filtered uniform noise in [0, 1]."""
    noise = rng.random((h, w))
    for _ in range(blur):
        noise = 0.25 * (np.roll(noise, 1, 0) + np.roll(noise, -1, 0)
                        + np.roll(noise, 1, 1) + np.roll(noise, -1, 1))
    lo, hi = noise.min(), noise.max()
    return (noise - lo) / (hi - lo + 1e-12)


def _scene(rng: np.random.Generator, frame_count: int, h: int, w: int,
           phase_sign: float) -> np.ndarray:
    """One scene: drifting smooth gradient plus a moving textured sprite.

    The sprite translates by whole pixels at a few px/frame, so consecutive
    placements overlap and block-matching flow recovers the motion exactly.
    """
    ys, xs = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    freq = rng.uniform(0.8, 1.6, size=3)
    angle = rng.uniform(0, np.pi)
    axis = np.cos(angle) * xs + np.sin(angle) * ys
    base_phase = rng.uniform(0, 2 * np.pi, size=3)
    # the whole gradient translates rigidly along its axis, like a slow pan:
    # every channel shares one displacement so scene motion is coherent
    shift = phase_sign * rng.uniform(0.06, 0.10)

    side = max(h // 8, 8)
    sprite = np.stack([_smooth_noise(rng, side, side, blur=2) for _ in range(3)])
    margin = 2
    vx = int(rng.integers(2, 4))
    vy = int(rng.integers(-1, 2))
    y0 = int(rng.integers(h // 4, 3 * h // 4 - side))
    x0 = int(rng.integers(margin, max(margin + 1, w - side - margin - vx * frame_count)))

    # per-frame exposure jitter, not smooth in t: the kind of appearance
    # variation a transmitted per-frame embedding sees directly
    gain = rng.uniform(-0.0, 0.0, size=frame_count)  # probe: no jitter

    video = np.empty((frame_count, 3, h, w), dtype=np.float32)
    for t in range(frame_count):
        u = t / max(frame_count - 1, 1)
        moved = axis + shift * u
        for ch in range(3):
            video[t, ch] = 0.5 + gain[t] + 0.30 * np.sin(
                2 * np.pi * freq[ch] * moved + base_phase[ch])
        sx = int(np.clip(x0 + vx * t, margin, w - side - margin))
        sy = int(np.clip(y0 + vy * t, margin, h - side - margin))
        box = video[t, :, sy:sy + side, sx:sx + side]
        video[t, :, sy:sy + side, sx:sx + side] = 0.4 * box + 0.6 * sprite
    return np.clip(video, 0.0, 1.0)


def synth_video(frame_count: int = 16, height: int = 128, width: int = 256,
                seed: int = 0, scenes: int = 1) -> VideoSequence:
    """Deterministic synthetic sequence: moving gradient plus textured sprite.

    With scenes=2 the second half cuts to different gradient parameters and a
    different sprite, giving frame content the temporal encodings alone
    cannot disambiguate cheaply.
    """
    if scenes not in (1, 2):
        raise ValueError("scenes must be 1 or 2")
    rng = np.random.default_rng(seed)
    if scenes == 1:
        video = _scene(rng, frame_count, height, width, phase_sign=1.0)
    else:
        half = frame_count // 2
        first = _scene(rng, half, height, width, phase_sign=1.0)
        second = _scene(rng, frame_count - half, height, width, phase_sign=-1.0)
        video = np.concatenate([first, second], axis=0)
    return VideoSequence(torch.from_numpy(video), source=f"synth(seed={seed},scenes={scenes})")
