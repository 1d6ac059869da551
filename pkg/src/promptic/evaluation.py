"""Weighted PSNR, rate-distortion sweeps and prompt attention maps."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .attention import window_reverse
from .bitstream import decode_image, encode_image
from .conditioning import binarize
from .network import PromptCodec

__all__ = [
    "PSNR_CAP",
    "weighted_mse",
    "weighted_psnr",
    "psnr",
    "RdPoint",
    "rd_sweep",
    "roi_value_masks",
    "write_rd_report",
    "prompt_attention_map",
]

PSNR_CAP = 100.0
RD_COLUMNS = ("image", "m_lambda", "bpp", "wpsnr_db", "bytes", "ms_encode", "ms_decode")


def _as_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype=np.float64)


def weighted_mse(x, x_hat, roi_mask, alpha: float, beta: float) -> float:
    """(alpha * SSE_roi + beta * SSE_nroi) / (alpha * N_roi + beta * N_nroi) over all channels.

    The mask is binarized at 0.5 and broadcast across the color channels, so
    the counts are element counts.
    """
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise ValueError("need alpha, beta >= 0 with alpha + beta > 0")
    x, x_hat = _as_array(x), _as_array(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    roi = np.broadcast_to(binarize(_as_array(roi_mask)).reshape((-1,) + x.shape[-2:]), x.shape)
    err = (x - x_hat) ** 2
    sse_roi, sse_nroi = err[roi].sum(), err[~roi].sum()
    n_roi = int(roi.sum())
    n_nroi = roi.size - n_roi
    denom = alpha * n_roi + beta * n_nroi
    if denom == 0:
        raise ValueError("no pixel carries a nonzero weight")
    return float((alpha * sse_roi + beta * sse_nroi) / denom)


def weighted_psnr(x, x_hat, roi_mask, alpha: float = 1.0, beta: float = 0.0) -> float:
    """Weighted PSNR in dB for pixel values in [0, 1]; zero error maps to 100 dB."""
    wmse = weighted_mse(x, x_hat, roi_mask, alpha, beta)
    if wmse == 0:
        return PSNR_CAP
    return min(-10.0 * math.log10(wmse), PSNR_CAP)


def psnr(x, x_hat) -> float:
    mse = float(np.mean((_as_array(x) - _as_array(x_hat)) ** 2))
    return PSNR_CAP if mse == 0 else min(-10.0 * math.log10(mse), PSNR_CAP)


@dataclass
class RdPoint:
    image: str
    m_lambda: float
    bpp: float
    wpsnr_db: float
    bytes: int
    ms_encode: float
    ms_decode: float
    estimated_bpp: float = float("nan")
    label: str = ""

    def row(self) -> Dict:
        return {k: getattr(self, k) for k in RD_COLUMNS}


MaskSource = Callable[[str, int, int], Optional[torch.Tensor]]


def rd_sweep(
    model: PromptCodec,
    images: Iterable[Tuple[str, torch.Tensor]],
    m_values: Sequence[float],
    mask_source: Optional[MaskSource] = None,
    alpha: float = 1.0,
    beta: float = 0.0,
    report: Optional[Union[str, Path]] = None,
) -> List[RdPoint]:
    """Encode every image at every rate through a real bitstream and measure it.

    ``mask_source(image_id, H, W)`` returns the (1, H, W) ROI mask used both to
    encode and, binarized, to weight the PSNR; None means an all-ones mask.
    A decoder-side latent that differs from the encoder's is a hard error.
    With ``report`` set, writes ``<report>.csv``, ``<report>.json`` and
    ``<report>.png``.
    """
    points = []
    for image_id, image in images:
        H, W = image.shape[-2:]
        mask = mask_source(image_id, H, W) if mask_source else None
        roi = torch.ones(1, H, W) if mask is None else torch.as_tensor(mask).reshape(1, H, W)
        for m in m_values:
            t0 = time.perf_counter()
            enc = encode_image(model, image, roi, float(m))
            t1 = time.perf_counter()
            dec = decode_image(model, enc.data)
            t2 = time.perf_counter()
            if not torch.equal(enc.y_hat, dec.y_hat):
                raise RuntimeError(f"decoder latent differs from encoder latent for {image_id} at m={m}")
            points.append(
                RdPoint(
                    image=str(image_id),
                    m_lambda=enc.header.m_lambda,
                    bpp=enc.bpp,
                    wpsnr_db=weighted_psnr(image, dec.image, roi, alpha, beta),
                    bytes=enc.num_bytes,
                    ms_encode=(t1 - t0) * 1e3,
                    ms_decode=(t2 - t1) * 1e3,
                    estimated_bpp=enc.estimated_bpp,
                )
            )
    points.sort(key=lambda p: (p.image, p.m_lambda, p.bpp))
    if report is not None:
        write_rd_report(points, report)
    return points


def roi_value_masks(roi: torch.Tensor, values: Sequence[float] = (0.25, 0.5, 0.75, 1.0)) -> List[torch.Tensor]:
    """Masks with the given value inside a binary ROI and 0 outside it."""
    inside = binarize(torch.as_tensor(roi)).to(torch.float32)
    return [inside * v for v in values]


def write_rd_report(points: Sequence[RdPoint], report: Union[str, Path]) -> Dict[str, Path]:
    base = Path(report)
    base.parent.mkdir(parents=True, exist_ok=True)
    paths = {ext: base.with_suffix(f".{ext}") for ext in ("csv", "json", "png")}
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RD_COLUMNS)
        writer.writeheader()
        for p in points:
            writer.writerow(p.row())
    paths["json"].write_text(json.dumps([p.row() for p in points], indent=2))

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for image_id in sorted({p.image for p in points}):
        pts = sorted((p for p in points if p.image == image_id), key=lambda p: p.bpp)
        ax.plot([p.bpp for p in pts], [p.wpsnr_db for p in pts], marker="o", label=image_id)
    ax.set_xlabel("bpp")
    ax.set_ylabel("weighted PSNR (dB)")
    ax.grid(True, alpha=0.3)
    if len({p.image for p in points}) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(paths["png"], dpi=100)
    plt.close(fig)
    return paths


@torch.no_grad()
def prompt_attention_map(
    model: PromptCodec,
    x: torch.Tensor,
    roi_mask: torch.Tensor,
    m: float,
    stage_index: int,
    decoder: bool = False,
) -> torch.Tensor:
    """Attention mass each image token puts on the prompt tokens of its window.

    For every image token of the chosen P-STB the softmax weights over the
    prompt columns are summed, averaged over heads and over the block's
    layers, and laid back onto the stage's spatial grid.  Returns (1, H_s, W_s)
    with values in [0, 1].  ``x`` is (1, 3, H, W) padded to multiples of 64.
    """
    blocks = model.g_s if decoder else model.g_a
    block = blocks[stage_index]
    if not block.prompted:
        raise ValueError(f"stage {stage_index} has no prompt tokens")
    layers = list(block.stage.layers)
    for layer in layers:
        layer.attn.capture = True
    try:
        bundle = model.analyze(x, roi_mask, m, mode="eval")
        if decoder:
            B = x.shape[0]
            lam = torch.full((B, 1, *bundle.y_hat.shape[-2:]), float(m), dtype=x.dtype)
            model.synthesize(bundle.y_hat, lam)
        maps = []
        for layer in layers:
            weights = layer.attn.last_weights  # (B*nW, heads, S_I, S_I + S_P)
            H, W, w, Hp, Wp, shift = layer.last_geometry
            s_img = w * w
            if weights.shape[-1] == s_img:
                raise ValueError(f"stage {stage_index} ran without prompt tokens")
            mass = weights[..., s_img:].sum(-1).mean(1)  # (B*nW, S_I)
            grid = window_reverse(mass.unsqueeze(-1), w, Hp, Wp)
            if shift:
                grid = torch.roll(grid, shifts=(shift, shift), dims=(1, 2))
            maps.append(grid[:, :H, :W, 0])
    finally:
        for layer in layers:
            layer.attn.capture = False
            layer.attn.last_weights = None
    heat = torch.stack(maps).mean(0)
    return heat[:1].clamp(0.0, 1.0)
