"""Command-line entry point: ``promptic {train,encode,decode,eval,profile}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from .bitstream import decode_file, encode_file
from .conditioning import MaskSpec, load_mask
from .entropy import CorruptStreamError
from .evaluation import rd_sweep
from .io import load_checkpoint, read_image
from .network import TOY_CONFIG, CodecConfig, PromptCodec
from .profiling import profile_complexity
from .training import IMAGE_SUFFIXES, TrainingConfig, run_training

__all__ = ["build_parser", "main"]

logger = logging.getLogger("promptic")


class CliError(Exception):
    """A user-facing failure; reported as a JSON error line with exit code 1."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _m_grid(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise argparse.ArgumentTypeError("m values must lie in [0, 1]")
    return values


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _size(text: str):
    parts = text.lower().replace("x", ",").split(",")
    try:
        dims = [int(p) for p in parts if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use H or HxW")
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) <= 0:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use H or HxW")
    return tuple(dims)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptic", description="Prompt-conditioned variable-rate ROI image codec.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the staged training schedule from a JSON config")
    p.add_argument("--config", required=True, type=Path)

    p = sub.add_parser("encode", help="compress an image to a bitstream")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--mask", type=Path, help="grayscale mask image or JSON mask spec (default: all ones)")
    p.add_argument("--m", required=True, type=_unit_float, help="rate parameter in [0, 1]")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("decode", help="reconstruct an image from a bitstream")
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("eval", help="rate-distortion sweep with weighted PSNR")
    p.add_argument("--images", required=True, type=Path, help="image file or directory")
    p.add_argument("--masks", type=Path, help="directory of masks named after the images")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--m-grid", type=_m_grid, default=_m_grid("0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"))
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--report", required=True, type=Path, help="output base path; .csv/.json/.png are added")

    p = sub.add_parser("profile", help="kMACs/pixel and parameter count")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--preset", choices=("toy", "default"))
    p.add_argument("--size", type=_size, default=(256, 256), help="H or HxW, multiples of 64")
    return parser


def _load_model(path: Path) -> PromptCodec:
    if not path.is_file():
        raise CliError("missing_checkpoint", f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _image_files(path: Path) -> List[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if files:
            return files
    raise CliError("missing_input", f"no images found at {path}")


def _find_mask(mask_dir: Path, stem: str) -> Optional[Path]:
    for suffix in (".json", ".png", ".pgm", ".bmp", ".tif", ".tiff"):
        candidate = mask_dir / f"{stem}{suffix}"
        if candidate.is_file():
            return candidate
    return None


def _cmd_train(args) -> dict:
    try:
        config = TrainingConfig.from_json(args.config.read_text())
    except FileNotFoundError:
        raise CliError("missing_input", f"config not found: {args.config}")
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("bad_config", f"invalid training config: {exc}")
    ckpt = run_training(config)
    return {"checkpoint": str(ckpt)}


def _cmd_encode(args) -> dict:
    model = _load_model(args.ckpt)
    if not args.image.is_file():
        raise CliError("missing_input", f"image not found: {args.image}")
    mask = None
    if args.mask is not None:
        if not args.mask.is_file():
            raise CliError("missing_input", f"mask not found: {args.mask}")
        mask = MaskSpec.from_json(args.mask.read_text()) if args.mask.suffix == ".json" else args.mask
    result = encode_file(args.image, mask, args.m, model, args.out)
    return {
        "bytes": result.num_bytes,
        "bpp": result.bpp,
        "estimated_bpp": result.estimated_bpp,
        "m_q": result.header.m_q,
    }


def _cmd_decode(args) -> dict:
    model = _load_model(args.ckpt)
    if not args.inp.is_file():
        raise CliError("missing_input", f"bitstream not found: {args.inp}")
    result = decode_file(args.inp, model, args.out)
    return {"height": result.header.height, "width": result.header.width, "m_lambda": result.header.m_lambda}


def _cmd_eval(args) -> dict:
    model = _load_model(args.ckpt)
    files = _image_files(args.images)
    if args.masks is not None and not args.masks.is_dir():
        raise CliError("missing_input", f"mask directory not found: {args.masks}")

    paths = {p.stem: p for p in files}

    def mask_source(image_id, H, W):
        if args.masks is None:
            return None
        found = _find_mask(args.masks, image_id)
        if found is None:
            return None
        if found.suffix == ".json":
            from .conditioning import generate_mask

            return torch.from_numpy(generate_mask(MaskSpec.from_json(found.read_text()), H, W))
        return torch.from_numpy(load_mask(found, H, W))

    images = ((stem, read_image(path)) for stem, path in paths.items())
    points = rd_sweep(model, images, args.m_grid, mask_source, args.alpha, args.beta, report=args.report)
    return {"points": len(points), "report": str(args.report.with_suffix(".csv"))}


def _cmd_profile(args) -> dict:
    H, W = args.size
    if H % 64 or W % 64:
        raise CliError("bad_argument", f"profile size {H}x{W} must be a multiple of 64")
    if args.ckpt is not None:
        model = _load_model(args.ckpt)
    else:
        model = PromptCodec(**TOY_CONFIG) if args.preset == "toy" else PromptCodec(CodecConfig())
    stats = profile_complexity(model, H, W)
    return {"kmacs_per_pixel": stats["kmacs_per_pixel"], "params": stats["params"], "by_type": stats["by_type"]}


COMMANDS = {
    "train": _cmd_train,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "profile": _cmd_profile,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 1
    except CorruptStreamError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
