"""Bitstream container and the image-level encode / decode paths.

Layout::

    magic "PICR" | version u8 | height u16 | width u16 | m_q u8 | reserved u8
    z chunk | y chunk

All integers are big-endian; each chunk is ``u32 length | range-coded bytes |
0xBEEF``.  The ROI mask is never transmitted: the decoder rebuilds its
conditioning from ``m_q / 255`` alone.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch

from .conditioning import MaskSpec, generate_mask, load_mask
from .entropy import (
    CorruptStreamError,
    TruncatedStreamError,
    estimate_rate,
    pack_chunk,
    range_decode,
    range_encode,
    round_half_away,
    unpack_chunk,
)
from .io import load_checkpoint, pad_to_multiple, read_image, write_image
from .network import PromptCodec

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "BitstreamHeader",
    "quantize_rate",
    "EncodeResult",
    "DecodeResult",
    "encode_image",
    "decode_image",
    "encode_file",
    "decode_file",
]

MAGIC = b"PICR"
VERSION = 1
_HEADER = struct.Struct(">4sBHHBB")
HEADER_SIZE = _HEADER.size
PAD_MULTIPLE = 64


def quantize_rate(m: float) -> int:
    """8-bit rate parameter, round(m * 255) with ties away from zero."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"rate parameter {m} outside [0, 1]")
    return int(math.floor(m * 255.0 + 0.5))


@dataclass(frozen=True)
class BitstreamHeader:
    height: int
    width: int
    m_q: int
    version: int = VERSION

    @property
    def m_lambda(self) -> float:
        return self.m_q / 255.0

    def pack(self) -> bytes:
        if not (0 < self.height < 1 << 16 and 0 < self.width < 1 << 16):
            raise ValueError(f"image size {self.width}x{self.height} does not fit the header")
        return _HEADER.pack(MAGIC, self.version, self.height, self.width, self.m_q, 0)

    @classmethod
    def unpack(cls, data: bytes) -> "BitstreamHeader":
        if len(data) < HEADER_SIZE:
            raise TruncatedStreamError(f"stream has {len(data)} bytes, header needs {HEADER_SIZE}")
        magic, version, height, width, m_q, _ = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported version {version}")
        if height == 0 or width == 0:
            raise CorruptStreamError("zero image dimension in header")
        return cls(height=height, width=width, m_q=m_q, version=version)


@dataclass
class EncodeResult:
    data: bytes
    header: BitstreamHeader
    y_hat: torch.Tensor
    z_hat: torch.Tensor
    estimated_bpp: float

    @property
    def num_bytes(self) -> int:
        return len(self.data)

    @property
    def bpp(self) -> float:
        return 8.0 * len(self.data) / (self.header.height * self.header.width)


@dataclass
class DecodeResult:
    image: torch.Tensor
    header: BitstreamHeader
    y_hat: torch.Tensor
    z_hat: torch.Tensor


def _z_contexts(shape) -> list:
    C, h, w = shape
    return np.repeat(np.arange(C), h * w).tolist()


def _as_ints(t: torch.Tensor) -> list:
    return t.reshape(-1).to(torch.int64).tolist()


@torch.no_grad()
def encode_image(model: PromptCodec, image: torch.Tensor, roi_mask: Optional[torch.Tensor], m: float) -> EncodeResult:
    """Encode one (3, H, W) image in [0, 1] with a (1, H, W) ROI mask.

    The rate parameter is quantized to 8 bits before it conditions the
    encoder, so encoder and decoder see the same value.
    """
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError("expected a (3, H, W) image")
    H, W = image.shape[-2:]
    if roi_mask is None:
        roi_mask = torch.ones(1, H, W)
    roi_mask = torch.as_tensor(roi_mask)
    if roi_mask.shape[-2:] != (H, W):
        raise ValueError(f"mask {tuple(roi_mask.shape[-2:])} does not match image {(H, W)}")
    header = BitstreamHeader(height=H, width=W, m_q=quantize_rate(m))
    dtype = next(model.parameters()).dtype
    x, _ = pad_to_multiple(image.to(dtype), PAD_MULTIPLE)
    roi, _ = pad_to_multiple(roi_mask.reshape(1, H, W).to(dtype), PAD_MULTIPLE)

    model.eval()
    bundle = model.analyze(x[None], roi[None], header.m_lambda, mode="eval")
    z_hat, mu, sigma = bundle.z_hat[0], bundle.mu[0], bundle.sigma[0]
    residual = round_half_away(bundle.y[0] - mu)

    z_chunk = range_encode(_as_ints(z_hat), model.prior.build_table(), _z_contexts(z_hat.shape))
    y_contexts = _as_ints(model.gaussian.scale_index(sigma))
    y_chunk = range_encode(_as_ints(residual), model.gaussian.table, y_contexts)
    data = header.pack() + pack_chunk(z_chunk) + pack_chunk(y_chunk)

    lik = model.likelihoods(bundle)
    est = float(estimate_rate([lik["y"].double(), lik["z"].double()], H, W))
    return EncodeResult(data=data, header=header, y_hat=bundle.y_hat[0], z_hat=z_hat, estimated_bpp=est)


@torch.no_grad()
def decode_image(model: PromptCodec, data: bytes) -> DecodeResult:
    """Inverse of :func:`encode_image`; raises on any malformed stream."""
    header = BitstreamHeader.unpack(data)
    z_payload, pos = unpack_chunk(data, HEADER_SIZE)
    y_payload, pos = unpack_chunk(data, pos)
    if pos != len(data):
        raise CorruptStreamError(f"{len(data) - pos} trailing bytes after the last chunk")

    cfg = model.config
    dtype = next(model.parameters()).dtype
    Hp = header.height + (-header.height) % PAD_MULTIPLE
    Wp = header.width + (-header.width) % PAD_MULTIPLE
    z_shape = (cfg.hyper_channels, Hp // 64, Wp // 64)
    z_vals = range_decode(z_payload, model.prior.build_table(), _z_contexts(z_shape), int(np.prod(z_shape)))
    z_hat = torch.tensor(z_vals, dtype=dtype).reshape(1, *z_shape)

    model.eval()
    mu, sigma = model.hyper_params(z_hat)
    y_contexts = _as_ints(model.gaussian.scale_index(sigma[0]))
    y_vals = range_decode(y_payload, model.gaussian.table, y_contexts, len(y_contexts))
    y_hat = torch.tensor(y_vals, dtype=dtype).reshape(mu.shape) + mu

    lambda_small = torch.full((1, 1, Hp // 16, Wp // 16), header.m_lambda, dtype=dtype)
    x_hat = model.synthesize(y_hat, lambda_small, clamp=True)
    image = x_hat[0, :, : header.height, : header.width]
    return DecodeResult(image=image, header=header, y_hat=y_hat[0], z_hat=z_hat[0])


def _resolve_model(checkpoint: Union[str, Path, PromptCodec]) -> PromptCodec:
    if isinstance(checkpoint, PromptCodec):
        return checkpoint
    return load_checkpoint(checkpoint)


def _resolve_mask(mask: Union[None, str, Path, MaskSpec], H: int, W: int) -> torch.Tensor:
    if mask is None:
        return torch.ones(1, H, W)
    if isinstance(mask, MaskSpec):
        return torch.from_numpy(generate_mask(mask, H, W))
    return torch.from_numpy(load_mask(mask, H, W))


def encode_file(
    image_path: Union[str, Path],
    mask: Union[None, str, Path, MaskSpec],
    m: float,
    checkpoint: Union[str, Path, PromptCodec],
    out_path: Union[str, Path],
) -> EncodeResult:
    """Encode an image file to ``out_path``; the mask may be a file, a MaskSpec or None (all ones)."""
    model = _resolve_model(checkpoint)
    image = read_image(image_path)
    roi = _resolve_mask(mask, *image.shape[-2:])
    result = encode_image(model, image, roi, m)
    Path(out_path).write_bytes(result.data)
    return result


def decode_file(
    in_path: Union[str, Path],
    checkpoint: Union[str, Path, PromptCodec],
    out_image_path: Union[str, Path],
) -> DecodeResult:
    model = _resolve_model(checkpoint)
    result = decode_image(model, Path(in_path).read_bytes())
    write_image(result.image, out_image_path)
    return result
