"""Checkpoint archives, image files and padding."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .network import CodecConfig, PromptCodec

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "read_image",
    "write_image",
    "write_gray",
    "pad_to_multiple",
]

PathLike = Union[str, Path]
_CONFIG_KEY = "__config__"


def save_checkpoint(model: PromptCodec, path: PathLike) -> None:
    """Write parameters and config to a NumPy ``.npz`` archive.

    Every state-dict entry becomes a float32 array under its dotted name; the
    codec config is stored as a JSON string under ``__config__``.
    """
    arrays = {name: t.detach().cpu().float().numpy() for name, t in model.state_dict().items()}
    arrays[_CONFIG_KEY] = np.array(model.config.to_json())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: PathLike, dtype: torch.dtype = torch.float32) -> PromptCodec:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        config = CodecConfig.from_dict(json.loads(str(archive[_CONFIG_KEY])))
        state = {k: torch.from_numpy(archive[k]) for k in archive.files if k != _CONFIG_KEY}
    model = PromptCodec(config)
    model.load_state_dict(state)
    return model.to(dtype).eval()


def read_image(path: PathLike) -> torch.Tensor:
    """Load an image file as a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def write_image(x: torch.Tensor, path: PathLike) -> None:
    """Save a (3, H, W) tensor in [0, 1] as an 8-bit RGB image."""
    arr = (x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_gray(x, path: PathLike) -> None:
    """Save an (H, W) array in [0, 1] as an 8-bit grayscale image scaled by 255."""
    arr = np.asarray(x, dtype=np.float64)
    arr = (np.clip(arr, 0, 1) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def pad_to_multiple(x: torch.Tensor, multiple: int = 64) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Reflect-pad the last two dims of ``x`` up to a multiple; returns the original (H, W)."""
    H, W = x.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph == 0 and pw == 0:
        return x, (H, W)
    squeeze = x.dim() == 3
    h = x.unsqueeze(0) if squeeze else x
    mode = "reflect" if ph < H and pw < W else "replicate"
    h = F.pad(h, (0, pw, 0, ph), mode=mode)
    return (h[0] if squeeze else h), (H, W)
