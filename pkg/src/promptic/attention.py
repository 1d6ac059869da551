"""Window partitioning, relative position bias and prompt-augmented attention."""

from __future__ import annotations

import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "partition_windows",
    "merge_windows",
    "window_partition",
    "window_reverse",
    "prompted_attention",
    "relative_position_index",
    "shift_region_mask",
    "PromptedWindowAttention",
]


def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    """Split a (B, H, W, C) map into (B * nW, w * w, C) token matrices."""
    B, H, W, C = x.shape
    if H % window_size or W % window_size:
        raise ValueError(
            f"feature size {H}x{W} is not divisible by window size {window_size}"
        )
    x = x.view(B, H // window_size, window_size, W // window_size, window_size, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window_size * window_size, C)


def window_reverse(windows: torch.Tensor, window_size: int, H: int, W: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`; returns (B, H, W, C)."""
    C = windows.shape[-1]
    x = windows.view(-1, H // window_size, W // window_size, window_size, window_size, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def partition_windows(features: torch.Tensor, window_size: int, shift: int = 0) -> torch.Tensor:
    """Partition a C x H x W map into (H/w * W/w, w*w, C) windows.

    When ``shift`` is positive the map is cyclically rolled by ``-shift`` along
    both spatial axes before partitioning, as in shifted-window attention.
    """
    if features.dim() != 3:
        raise ValueError("expected a C x H x W feature map")
    if not 0 <= shift < window_size:
        raise ValueError(f"shift must lie in [0, {window_size})")
    x = features.permute(1, 2, 0).unsqueeze(0)
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
    return window_partition(x, window_size)


def merge_windows(windows: torch.Tensor, window_size: int, H: int, W: int, shift: int = 0) -> torch.Tensor:
    """Inverse of :func:`partition_windows`; returns C x H x W."""
    x = window_reverse(windows, window_size, H, W)
    if shift:
        x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
    return x[0].permute(2, 0, 1)


def relative_position_index(window_size: int, table_window: Optional[int] = None) -> torch.Tensor:
    """Pairwise index into a ((2T-1)^2)-entry bias table for a w x w window.

    ``table_window`` (T) defaults to ``window_size``.  Passing a larger T lets
    a smaller window reuse the central sub-table of a larger one.
    """
    T = table_window or window_size
    if window_size > T:
        raise ValueError("window larger than the bias table")
    ys, xs = torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing="ij")
    coords = torch.stack([ys.flatten(), xs.flatten()])  # 2, S
    rel = coords[:, :, None] - coords[:, None, :]  # 2, S, S
    return (rel[0] + T - 1) * (2 * T - 1) + (rel[1] + T - 1)


def prompt_position_index(window_size: int, table_window: Optional[int] = None) -> torch.Tensor:
    """Index of each prompt slot of a w x w window into the (T/2)^2 prompt table."""
    T = table_window or window_size
    half, table_half = window_size // 2, T // 2
    ys, xs = torch.meshgrid(torch.arange(half), torch.arange(half), indexing="ij")
    return (ys * table_half + xs).flatten()


def _region_labels(size: int, window: int, shift: int) -> torch.Tensor:
    labels = torch.zeros(size, dtype=torch.long)
    if shift:
        labels[size - window:size - shift] = 1
        labels[size - shift:] = 2
    return labels


def shift_region_mask(
    height: int,
    width: int,
    window_size: int,
    shift: int,
    with_prompts: bool = False,
    dtype: torch.dtype = torch.float32,
) -> Optional[torch.Tensor]:
    """Additive mask (nW, S_I, S_I + S_P) for shifted windows, or None if unshifted.

    Tokens that the cyclic roll brought together from non-adjacent regions get
    -100 so they cannot attend to each other.  The prompt grid is rolled by
    half as much as the image grid, so its region boundaries are the image
    boundaries at half resolution.
    """
    if shift == 0:
        return None
    ly = _region_labels(height, window_size, shift)
    lx = _region_labels(width, window_size, shift)
    img = (ly[:, None] * 3 + lx[None, :]).view(1, height, width, 1)
    img = window_partition(img, window_size).squeeze(-1)  # nW, S_I
    keys = img
    if with_prompts:
        py = _region_labels(height // 2, window_size // 2, shift // 2)
        px = _region_labels(width // 2, window_size // 2, shift // 2)
        prm = (py[:, None] * 3 + px[None, :]).view(1, height // 2, width // 2, 1)
        prm = window_partition(prm, window_size // 2).squeeze(-1)
        keys = torch.cat([img, prm], dim=1)
    mask = (img[:, :, None] != keys[:, None, :]).to(dtype) * -100.0
    return mask


def prompted_attention(
    x_img: torch.Tensor,
    x_prm: Optional[torch.Tensor],
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    num_heads: int = 1,
    bias: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
    b_q: Optional[torch.Tensor] = None,
    b_k: Optional[torch.Tensor] = None,
    b_v: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """Multi-head attention whose keys and values are augmented with prompt tokens.

    Queries come from the image tokens only; keys and values are projected from
    the concatenation ``[x_img, x_prm]`` along the token axis, so the output has
    one row per image token.  Each head uses ``head_dim ** -0.5`` scaling.

    Args:
        x_img: (..., S_I, d) image tokens.
        x_prm: (..., S_P, d) prompt tokens, or None / S_P == 0 for plain attention.
        w_q, w_k, w_v: (d, d) projections applied as ``x @ w``.
        num_heads: number of heads; must divide d.
        bias: relative position bias broadcastable to (..., heads, S_I, S_I + S_P).
        mask: additive mask broadcastable to (..., heads, S_I, S_I + S_P).
        b_q, b_k, b_v: optional projection biases.
        return_weights: also return the softmax probabilities.

    Returns:
        (..., S_I, d) tensor, and the (..., heads, S_I, S_I + S_P) weights if
        requested.
    """
    d = x_img.shape[-1]
    if d % num_heads:
        raise ValueError(f"token dimension {d} is not divisible by {num_heads} heads")
    if x_prm is not None and x_prm.shape[-1] != d:
        raise ValueError(
            f"prompt token dimension {x_prm.shape[-1]} does not match image token dimension {d}"
        )
    kv_in = x_img if x_prm is None else torch.cat([x_img, x_prm], dim=-2)

    q = x_img @ w_q
    k = kv_in @ w_k
    v = kv_in @ w_v
    if b_q is not None:
        q = q + b_q
    if b_k is not None:
        k = k + b_k
    if b_v is not None:
        v = v + b_v

    head_dim = d // num_heads
    q = q.unflatten(-1, (num_heads, head_dim)).transpose(-3, -2)  # ..., h, S_I, hd
    k = k.unflatten(-1, (num_heads, head_dim)).transpose(-3, -2)
    v = v.unflatten(-1, (num_heads, head_dim)).transpose(-3, -2)

    scores = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        scores = scores + mask
    weights = scores.softmax(dim=-1)
    out = (weights @ v).transpose(-3, -2).flatten(-2)
    if return_weights:
        return out, weights
    return out


class PromptedWindowAttention(nn.Module):
    """Window attention with relative position bias and optional prompt tokens.

    Parameters are sized for ``window_size``; any smaller even window reuses the
    central part of the image bias table and the leading rows of the prompt
    bias table, which lets one layer run on feature maps of different sizes.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int, prompted: bool = False):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.prompted = prompted

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        if prompted:
            # image -> prompt columns start unbiased
            self.prompt_bias_table = nn.Parameter(torch.zeros((window_size // 2) ** 2, num_heads))
        else:
            self.register_parameter("prompt_bias_table", None)

        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.capture = False
        self.last_weights: Optional[torch.Tensor] = None

    def relative_bias(self, window_size: Optional[int] = None, with_prompts: bool = False) -> torch.Tensor:
        """Bias B of shape (heads, S_I, S_I + S_P) for a window of the given size."""
        w = window_size or self.window_size
        index = relative_position_index(w, self.window_size).to(self.relative_position_bias_table.device)
        S = w * w
        bias = self.relative_position_bias_table[index.view(-1)].view(S, S, -1)
        if with_prompts:
            if self.prompt_bias_table is None:
                raise ValueError("layer was built without prompt support")
            p_index = prompt_position_index(w, self.window_size).to(bias.device)
            p_bias = self.prompt_bias_table[p_index]  # S_P, heads
            bias = torch.cat([bias, p_bias.unsqueeze(0).expand(S, -1, -1)], dim=1)
        return bias.permute(2, 0, 1).contiguous()

    def forward(
        self,
        x: torch.Tensor,
        prompts: Optional[torch.Tensor] = None,
        window_size: Optional[int] = None,
        mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Args:
            x: (B * nW, S_I, d) image tokens per window.
            prompts: (B * nW, S_P, d) prompt tokens per window, or None.
            window_size: effective window size (defaults to the built size).
            mask: (nW, S_I, S_I + S_P) additive shift mask, or None.
        """
        w = window_size or self.window_size
        with_prompts = prompts is not None and prompts.shape[-2] > 0
        bias = self.relative_bias(w, with_prompts).to(x.dtype)
        if mask is not None:
            nW = mask.shape[0]
            bias = bias.unsqueeze(0) + mask.unsqueeze(1).to(x.dtype)  # nW, h, S, S'
            x_shape = x.shape
            x = x.view(-1, nW, *x_shape[1:])
            if with_prompts:
                prompts = prompts.view(-1, nW, *prompts.shape[1:])
        w_q, w_k, w_v = self.qkv.weight.t().chunk(3, dim=1)
        b_q, b_k, b_v = self.qkv.bias.chunk(3)
        out, weights = prompted_attention(
            x,
            prompts if with_prompts else None,
            w_q,
            w_k,
            w_v,
            num_heads=self.num_heads,
            bias=bias,
            b_q=b_q,
            b_k=b_k,
            b_v=b_v,
            return_weights=True,
        )
        if mask is not None:
            out = out.reshape(x_shape)
            weights = weights.flatten(0, 1)
        self.last_weights = weights.detach() if self.capture else None
        return self.proj(out)
