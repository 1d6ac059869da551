"""Multiply-accumulate counts: a closed-form walk of the architecture and a hook-based counter.

Only network layers are counted (convolutions, transposed convolutions,
linear layers and the attention products); normalization, activations,
softmax and entropy coding are not.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Dict, Tuple

import torch
import torch.nn as nn

from .attention import PromptedWindowAttention
from .blocks import SwinBlock, SwinLayer, SwinStage
from .network import PromptCodec, PromptGenerator

__all__ = [
    "conv_macs",
    "deconv_macs",
    "attention_macs",
    "swin_layer_macs",
    "closed_form_macs",
    "count_macs",
    "profile_complexity",
]


def _pair(v):
    return v if isinstance(v, tuple) else (v, v)


def conv_macs(layer: nn.Conv2d, h: int, w: int) -> Tuple[int, int, int]:
    """MACs of a convolution on an h x w input: H_out * W_out * C_in * C_out * k^2."""
    kh, kw = _pair(layer.kernel_size)
    sh, sw = _pair(layer.stride)
    ph, pw = _pair(layer.padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    macs = ho * wo * (layer.in_channels // layer.groups) * layer.out_channels * kh * kw
    return macs, ho, wo


def deconv_macs(layer: nn.ConvTranspose2d, h: int, w: int) -> Tuple[int, int, int]:
    """Transposed convolution: every input pixel scatters a C_out x k x k kernel per input channel."""
    kh, kw = _pair(layer.kernel_size)
    sh, sw = _pair(layer.stride)
    ph, pw = _pair(layer.padding)
    oph, opw = _pair(layer.output_padding)
    ho = (h - 1) * sh - 2 * ph + kh + oph
    wo = (w - 1) * sw - 2 * pw + kw + opw
    macs = h * w * (layer.in_channels // layer.groups) * layer.out_channels * kh * kw
    return macs, ho, wo


def attention_macs(windows: int, s_img: int, s_prm: int, dim: int) -> int:
    """Q/K/V projections plus score and weighted-sum products (output projection excluded)."""
    per_window = s_img * (s_img + s_prm) * dim * 2 + s_img * dim * dim + 2 * (s_img + s_prm) * dim * dim
    return windows * per_window


def swin_layer_macs(layer: SwinLayer, h: int, w: int, with_prompts: bool) -> Dict[str, int]:
    win, hp, wp, _ = layer.geometry(h, w)
    windows = (hp // win) * (wp // win)
    s_img = win * win
    s_prm = (win // 2) ** 2 if with_prompts else 0
    d = layer.dim
    hidden = layer.mlp.fc1.out_features
    return {
        "attention": attention_macs(windows, s_img, s_prm, d),
        "linear": windows * s_img * d * d + h * w * 2 * d * hidden,
    }


def _stage_macs(stage: SwinStage, h: int, w: int, prompt_hw, out, prefix: str):
    with_prompts = prompt_hw is not None
    if with_prompts:
        convs = stage.prompt_convs if stage.per_layer_prompts else stage.prompt_convs[:1]
        for i, c in enumerate(convs):
            macs, _, _ = conv_macs(c, *prompt_hw)
            out["conv"][f"{prefix}.prompt_convs.{i}"] = macs
    for i, layer in enumerate(stage.layers):
        for kind, macs in swin_layer_macs(layer, h, w, with_prompts).items():
            out[kind][f"{prefix}.layers.{i}"] = macs


def _block_macs(block: SwinBlock, h: int, w: int, prompt_hw, out, prefix: str):
    if block.resample == "down":
        macs, h, w = conv_macs(block.resample_conv, h, w)
        out["conv"][f"{prefix}.resample_conv"] = macs
        _stage_macs(block.stage, h, w, prompt_hw, out, f"{prefix}.stage")
        return h, w
    _stage_macs(block.stage, h, w, prompt_hw, out, f"{prefix}.stage")
    macs, h, w = deconv_macs(block.resample_conv, h, w)
    out["deconv"][f"{prefix}.resample_conv"] = macs
    return h, w


def _generator_macs(gen: PromptGenerator, h: int, w: int, out, prefix: str):
    macs, h, w = conv_macs(gen.input_conv, h, w)
    out["conv"][f"{prefix}.input_conv"] = macs
    sizes = [(h, w)]
    for i, layer in enumerate(gen.resample):
        if isinstance(layer, nn.ConvTranspose2d):
            macs, h, w = deconv_macs(layer, h, w)
            out["deconv"][f"{prefix}.resample.{i}"] = macs
        else:
            macs, h, w = conv_macs(layer, h, w)
            out["conv"][f"{prefix}.resample.{i}"] = macs
        sizes.append((h, w))
    return sizes


def closed_form_macs(model: PromptCodec, height: int, width: int, use_prompts: bool = True) -> Dict[str, Dict[str, int]]:
    """Per-layer MACs of one forward pass, grouped by layer type, without running the model."""
    out: Dict[str, Dict[str, int]] = defaultdict(dict)
    h, w = height, width
    enc_maps = _generator_macs(model.p_a, h, w, out, "p_a") if use_prompts else [None] * 4
    for i, block in enumerate(model.g_a):
        h, w = _block_macs(block, h, w, enc_maps[i], out, f"g_a.{i}")
    yh, yw = h, w

    block, c = model.h_a
    h, w = _block_macs(block, h, w, None, out, "h_a.0")
    macs, h, w = conv_macs(c, h, w)
    out["conv"]["h_a.1"] = macs

    dc, block = model.h_s
    macs, h, w = deconv_macs(dc, h, w)
    out["deconv"]["h_s.0"] = macs
    _block_macs(block, h, w, None, out, "h_s.1")

    dec_maps = _generator_macs(model.p_s, yh, yw, out, "p_s") if use_prompts else [None] * 4
    h, w = yh, yw
    for j, block in enumerate(model.g_s):
        h, w = _block_macs(block, h, w, dec_maps[j], out, f"g_s.{j}")
    return dict(out)


def count_macs(model: nn.Module, *inputs, **kwargs) -> Dict[str, int]:
    """Run ``model`` once and count MACs from the tensors each layer actually sees.

    Returns totals per layer type (conv, deconv, linear, attention) per batch
    image; the batch size is read from the first input when it is 4-D.
    """
    totals: Dict[str, int] = defaultdict(int)

    def conv_hook(mod, args, output):
        B, cout, ho, wo = output.shape
        kh, kw = _pair(mod.kernel_size)
        totals["conv"] += B * ho * wo * (mod.in_channels // mod.groups) * cout * kh * kw

    def deconv_hook(mod, args, output):
        B, cin, h, w = args[0].shape
        kh, kw = _pair(mod.kernel_size)
        totals["deconv"] += B * h * w * (cin // mod.groups) * mod.out_channels * kh * kw

    def linear_hook(mod, args, output):
        tokens = args[0].numel() // mod.in_features
        totals["linear"] += tokens * mod.in_features * mod.out_features

    def attn_hook(mod, args, kwargs_, output):
        x = args[0]
        prompts = args[1] if len(args) > 1 else kwargs_.get("prompts")
        windows, s_img, d = x.shape
        s_prm = 0 if prompts is None else prompts.shape[-2]
        totals["attention"] += attention_macs(windows, s_img, s_prm, d)

    handles = []
    for mod in model.modules():
        if isinstance(mod, nn.ConvTranspose2d):
            handles.append(mod.register_forward_hook(deconv_hook))
        elif isinstance(mod, nn.Conv2d):
            handles.append(mod.register_forward_hook(conv_hook))
        elif isinstance(mod, nn.Linear):
            handles.append(mod.register_forward_hook(linear_hook))
        elif isinstance(mod, PromptedWindowAttention):
            handles.append(mod.register_forward_hook(attn_hook, with_kwargs=True))
    try:
        with torch.no_grad():
            model(*inputs, **kwargs)
    finally:
        for h in handles:
            h.remove()
    first = inputs[0] if inputs else None
    batch = first.shape[0] if isinstance(first, torch.Tensor) and first.dim() == 4 else 1
    return {k: v // batch for k, v in totals.items()}


def profile_complexity(model: PromptCodec, height: int, width: int) -> Dict[str, float]:
    """kMACs per input pixel and parameter count for an H x W (multiple of 64) input."""
    if height % 64 or width % 64:
        raise ValueError("profile size must be a multiple of 64")
    per_layer = closed_form_macs(model, height, width)
    total = sum(sum(v.values()) for v in per_layer.values())
    return {
        "kmacs_per_pixel": total / (height * width) / 1000.0,
        "macs": total,
        "params": sum(p.numel() for p in model.parameters()),
        "by_type": {k: sum(v.values()) for k, v in per_layer.items()},
    }
