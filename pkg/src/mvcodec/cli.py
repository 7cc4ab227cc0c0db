"""Command-line surface: encode, decode, eval, bdrate, synth.

Failures map to distinct exit codes: 2 usage (argparse), 3 configuration,
4 file I/O, 5 malformed bitstream, 6 diverged encode.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .bitstream import parse_bitstream, serialize_bitstream
from .codec import (Decoder, bpp_of_bitstream, build_bitstream, encode,
                    float_decode)
from .config import TrainConfig, make_config, preset_names
from .errors import (BitstreamError, ConfigError, EncodingDivergedError,
                     MVCodecError)
from .metrics import RDCurve, bd_rate, load_rd_csv, ms_ssim, psnr
from .oracles import default_cache_dir, make_embedding_oracle, make_flow_oracle
from .video_io import load_frames, synth_video, write_png_dir

EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_BITSTREAM = 5
EXIT_DIVERGED = 6


def load_run_config(path) -> dict[str, str]:
    """Flat dotted-key config file: one `section.key = value` per line,
    `#` comments. Later keys win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _gather_settings(args) -> dict[str, str]:
    settings: dict[str, str] = {}
    if getattr(args, "config", None):
        settings.update(load_run_config(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        settings[key.strip()] = value.strip()
    return settings


def _coerce(value: str):
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    return value


def _load_video(args, settings):
    fmt = settings.get("video.format", getattr(args, "format", "png_dir") or "png_dir")
    width = settings.get("video.width")
    height = settings.get("video.height")
    count = settings.get("video.frames")
    return load_frames(args.frames, format=fmt,
                       width=int(width) if width else None,
                       height=int(height) if height else None,
                       frame_count=int(count) if count else None)


def _cmd_synth(args) -> int:
    video = synth_video(frame_count=args.frames, height=args.height,
                        width=args.width, seed=args.seed, scenes=args.scenes)
    written = write_png_dir(video.frames, args.out)
    print(f"wrote {len(written)} frames to {args.out}")
    return 0


def _cmd_encode(args) -> int:
    settings = _gather_settings(args)
    video = _load_video(args, settings)
    model_overrides = {k.split(".", 1)[1]: _coerce(v) for k, v in settings.items()
                       if k.startswith("model.") and k != "model.preset"}
    preset = settings.get("model.preset", args.preset)
    config = make_config(preset, video.frame_h, video.frame_w, video.frame_count,
                         **model_overrides)
    train_overrides = {k.split(".", 1)[1]: _coerce(v) for k, v in settings.items()
                       if k.startswith("train.")}
    if args.epochs is not None:
        train_overrides["epochs"] = args.epochs
    if args.steps is not None:
        train_overrides["max_steps"] = args.steps
    if args.seed is not None:
        train_overrides["seed"] = args.seed
    train = TrainConfig(**train_overrides)

    oracle_kind = settings.get("oracle.kind", args.oracle)
    flow = make_flow_oracle(oracle_kind) if config.use_flow_heads else None
    embed = make_embedding_oracle(oracle_kind) if train.use_contrastive_loss else None
    cache = Path(settings.get("oracle.cache", default_cache_dir()))

    def report(stats):
        if stats.epoch % max(1, args.log_every) == 0:
            print(f"epoch {stats.epoch:4d}  lr {stats.lr:.2e}  "
                  f"loss {stats.l_total:.4f}  psnr {stats.psnr:.2f} dB")

    result = encode(video.frames, config, train, flow_oracle=flow,
                    embed_oracle=embed, cache_dir=cache, progress=report)
    bs = build_bitstream(result, args.bitwidth, args.embed_bitwidth)
    data = serialize_bitstream(bs)
    Path(args.out).write_bytes(data)
    rates = bpp_of_bitstream(bs, len(data))
    recon = float_decode(result)
    mean_psnr = sum(psnr(recon[t], video.frames[t]) for t in range(video.frame_count))
    print(f"wrote {args.out}: {len(data)} bytes, model {rates['model_bpp']:.4f} bpp, "
          f"file {rates['file_bpp']:.4f} bpp, float psnr {mean_psnr / video.frame_count:.2f} dB, "
          f"{result.steps} steps in {result.seconds:.0f}s")
    return 0


def _parse_indices(spec: str, frame_count: int) -> list[int]:
    if spec == "all":
        return list(range(frame_count))
    try:
        indices = [int(s) for s in spec.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad frame index list {spec!r}") from exc
    for i in indices:
        if not (0 <= i < frame_count):
            raise ConfigError(f"frame index {i} out of range [0, {frame_count})")
    return indices


def _cmd_decode(args) -> int:
    decoder = Decoder.from_bytes(Path(args.bitstream).read_bytes())
    indices = _parse_indices(args.indices, decoder.config.frame_count)
    frames = torch.stack([decoder.decode_frame(t) for t in indices])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arr = (frames.clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
    from PIL import Image
    for i, t in enumerate(indices):
        Image.fromarray(arr[i].transpose(1, 2, 0)).save(out / f"frame_{t:04d}.png")
    if args.raw:
        import numpy as np
        np.save(out / "frames.npy", frames.numpy())
    print(f"decoded {len(indices)} frames to {out}")
    if args.reference:
        ref = load_frames(args.reference)
        vals = [psnr(frames[i], ref.frames[t]) for i, t in enumerate(indices)]
        ms = [ms_ssim(frames[i], ref.frames[t]) for i, t in enumerate(indices)]
        print(f"mean psnr {sum(vals) / len(vals):.3f} dB  "
              f"mean ms-ssim {sum(ms) / len(ms):.5f}")
    return 0


def _cmd_eval(args) -> int:
    data = Path(args.bitstream).read_bytes()
    bs = parse_bitstream(data)
    decoder = Decoder(bs)
    ref = load_frames(args.reference)
    if ref.frame_count != decoder.config.frame_count:
        raise ConfigError(
            f"reference has {ref.frame_count} frames, stream has "
            f"{decoder.config.frame_count}")
    recon = decoder.decode_all()
    n = ref.frame_count
    mean_psnr = sum(psnr(recon[t], ref.frames[t]) for t in range(n)) / n
    mean_ms = sum(ms_ssim(recon[t], ref.frames[t]) for t in range(n)) / n
    rates = bpp_of_bitstream(bs, len(data))
    row = f"{args.label},{rates['model_bpp']!r},{mean_psnr!r},{mean_ms!r}"
    if args.csv:
        path = Path(args.csv)
        header = not path.exists()
        with open(path, "a") as f:
            if header:
                f.write("label,bpp,psnr,msssim\n")
            f.write(row + "\n")
    print(row)
    return 0


def _cmd_bdrate(args) -> int:
    def single_curve(path) -> RDCurve:
        curves = load_rd_csv(path)
        if len(curves) != 1:
            raise ConfigError(
                f"{path} holds {len(curves)} labeled curves; expected exactly 1")
        return next(iter(curves.values()))

    anchor = single_curve(args.anchor)
    test = single_curve(args.test)
    value = bd_rate(anchor, test, metric=args.quality, method=args.method)
    print(f"{value:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvcodec",
        description="Model-based video codec: one trained network per scene.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the deterministic synthetic sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=1, choices=(1, 2))
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("encode", help="train on a video and write a bitstream")
    p.add_argument("--frames", required=True, help="input directory or raw file")
    p.add_argument("--format", default="png_dir", choices=("png_dir", "yuv420"))
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="small", choices=preset_names())
    p.add_argument("--config", help="flat dotted-key config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="hard cap on optimizer steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--bitwidth", type=int, default=8)
    p.add_argument("--embed-bitwidth", type=int, default=8)
    p.add_argument("--oracle", default="fallback", choices=("fallback", "pretrained"))
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decode frames from a bitstream")
    p.add_argument("--bitstream", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--indices", default="all",
                   help='"all" or comma-separated frame indices')
    p.add_argument("--reference", help="original frames for quality reporting")
    p.add_argument("--raw", action="store_true", help="also dump exact float frames")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("eval", help="rate-distortion point of a stream vs reference")
    p.add_argument("--bitstream", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--label", default="mvcodec")
    p.add_argument("--csv", help="append the point to this CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bdrate", help="Bjontegaard delta rate between two curves")
    p.add_argument("--anchor", required=True, help="CSV with label,bpp,psnr,msssim")
    p.add_argument("--test", required=True)
    p.add_argument("--quality", default="psnr", choices=("psnr", "msssim"))
    p.add_argument("--method", default="auto", choices=("auto", "cubic", "akima"))
    p.set_defaults(func=_cmd_bdrate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EncodingDivergedError as exc:
        print(f"error: encoding diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BitstreamError as exc:
        print(f"error: bad bitstream: {exc}", file=sys.stderr)
        return EXIT_BITSTREAM
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MVCodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
