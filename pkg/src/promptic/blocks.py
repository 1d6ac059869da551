"""Swin-transformer layers and the (prompted) Swin-transformer blocks built from them."""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import PromptedWindowAttention, shift_region_mask, window_partition, window_reverse

__all__ = [
    "conv",
    "deconv",
    "effective_window",
    "pad_spatial",
    "SwinLayer",
    "SwinStage",
    "SwinBlock",
]


def conv(in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2)


def deconv(in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(
        in_ch,
        out_ch,
        kernel_size,
        stride=stride,
        padding=kernel_size // 2,
        output_padding=stride - 1,
    )


def effective_window(height: int, width: int, window_size: int, min_window: int = 2) -> int:
    """Halve the window until it fits the map (never below ``min_window``)."""
    w = window_size
    while w > min(height, width) and w > min_window:
        w //= 2
    return w


def pad_spatial(x: torch.Tensor, pad_h: int, pad_w: int) -> torch.Tensor:
    """Pad a (B, H, W, C) map at the bottom/right, reflecting when possible."""
    if pad_h == 0 and pad_w == 0:
        return x
    H, W = x.shape[1:3]
    mode = "reflect" if pad_h < H and pad_w < W else "replicate"
    y = F.pad(x.permute(0, 3, 1, 2), (0, pad_w, 0, pad_h), mode=mode)
    return y.permute(0, 2, 3, 1)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 2.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinLayer(nn.Module):
    """One pre-norm Swin layer: (shifted) window attention and an MLP, both residual.

    In prompted mode each window also attends to the prompt tokens covering the
    same area.  The prompt grid is half the image grid and is rolled by half
    the image shift so that windows keep their spatial correspondence.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        window_size: int = 8,
        shifted: bool = False,
        prompted: bool = False,
        mlp_ratio: float = 2.0,
    ):
        super().__init__()
        if prompted and window_size % 4:
            raise ValueError("prompted layers need a window size divisible by 4")
        self.dim = dim
        self.window_size = window_size
        self.shifted = shifted
        self.prompted = prompted
        self.min_window = 4 if prompted else 2
        self.norm1 = nn.LayerNorm(dim)
        self.norm_prompt = nn.LayerNorm(dim) if prompted else None
        self.attn = PromptedWindowAttention(dim, num_heads, window_size, prompted=prompted)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.last_geometry = None

    def geometry(self, H: int, W: int):
        """Effective window, padded size and shift used on an H x W map."""
        w = effective_window(H, W, self.window_size, self.min_window)
        Hp, Wp = H + (-H) % w, W + (-W) % w
        shift = w // 2 if self.shifted and min(Hp, Wp) > w else 0
        return w, Hp, Wp, shift

    def forward(self, x: torch.Tensor, prompts: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            x: (B, H, W, C) image tokens.
            prompts: (B, H/2, W/2, C) prompt tokens, or None.
        """
        B, H, W, C = x.shape
        w, Hp, Wp, shift = self.geometry(H, W)
        use_prompts = prompts is not None
        if use_prompts:
            if not self.prompted:
                raise ValueError("prompts passed to a layer built without prompt support")
            if H % 2 or W % 2 or prompts.shape[1:3] != (H // 2, W // 2):
                raise ValueError(
                    f"prompt grid {tuple(prompts.shape[1:3])} is not half of image grid {(H, W)}"
                )

        h = pad_spatial(self.norm1(x), Hp - H, Wp - W)
        if shift:
            h = torch.roll(h, shifts=(-shift, -shift), dims=(1, 2))
        tokens = window_partition(h, w)

        prompt_windows = None
        if use_prompts:
            p = pad_spatial(self.norm_prompt(prompts), (Hp - H) // 2, (Wp - W) // 2)
            if shift:
                p = torch.roll(p, shifts=(-(shift // 2), -(shift // 2)), dims=(1, 2))
            prompt_windows = window_partition(p, w // 2)

        mask = shift_region_mask(Hp, Wp, w, shift, with_prompts=use_prompts, dtype=x.dtype)
        if mask is not None:
            mask = mask.to(x.device)
        out = self.attn(tokens, prompt_windows, window_size=w, mask=mask)
        if self.attn.capture:
            self.last_geometry = (H, W, w, Hp, Wp, shift)

        out = window_reverse(out, w, Hp, Wp)
        if shift:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        x = x + out[:, :H, :W, :]
        return x + self.mlp(self.norm2(x))


class SwinStage(nn.Module):
    """A stack of Swin layers alternating unshifted and half-window-shifted windows.

    With ``prompt_channels`` set, the stage owns one strided convolution that
    turns a prompt feature map into prompt tokens at half the image-token grid.
    The same prompt tokens are shared by every layer of the stage unless
    ``per_layer_prompts`` is set, in which case each layer gets its own conv.
    """

    def __init__(
        self,
        dim: int,
        depth: int,
        num_heads: int,
        window_size: int = 8,
        prompt_channels: Optional[int] = None,
        prompt_stride: int = 2,
        per_layer_prompts: bool = False,
        mlp_ratio: float = 2.0,
    ):
        super().__init__()
        prompted = prompt_channels is not None
        self.dim = dim
        self.prompted = prompted
        self.prompt_stride = prompt_stride
        self.per_layer_prompts = per_layer_prompts
        self.layers = nn.ModuleList(
            SwinLayer(dim, num_heads, window_size, shifted=i % 2 == 1, prompted=prompted, mlp_ratio=mlp_ratio)
            for i in range(depth)
        )
        if prompted:
            k = prompt_stride + 1 if prompt_stride % 2 == 0 else prompt_stride + 2
            n = depth if per_layer_prompts else 1
            self.prompt_convs = nn.ModuleList(
                conv(prompt_channels, dim, kernel_size=k, stride=prompt_stride) for _ in range(n)
            )
        else:
            self.prompt_convs = None

    def make_prompts(self, prompt_map: torch.Tensor, H: int, W: int, index: int = 0) -> torch.Tensor:
        """(B, C_p, Hm, Wm) prompt features -> (B, H/2, W/2, dim) prompt tokens."""
        p = self.prompt_convs[index](prompt_map)
        if p.shape[-2:] != (H // 2, W // 2) or H % 2 or W % 2:
            raise ValueError(
                f"prompt tokens at {tuple(p.shape[-2:])} do not match half the image grid {(H, W)}"
            )
        return p.permute(0, 2, 3, 1)

    def forward(self, x: torch.Tensor, prompt_map: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, C, H, W) -> (B, C, H, W)."""
        H, W = x.shape[-2:]
        if prompt_map is not None and not self.prompted:
            raise ValueError("prompt features given to a plain Swin stage")
        prompts = None
        if prompt_map is not None and not self.per_layer_prompts:
            prompts = self.make_prompts(prompt_map, H, W)
        h = x.permute(0, 2, 3, 1)
        for i, layer in enumerate(self.layers):
            if prompt_map is not None and self.per_layer_prompts:
                prompts = self.make_prompts(prompt_map, H, W, i)
            h = layer(h, prompts)
        return h.permute(0, 3, 1, 2)


class SwinBlock(nn.Module):
    """Resampling convolution plus a Swin stage (STB, or P-STB when prompted).

    ``resample="down"`` runs a stride-2 convolution and then the stage on the
    reduced grid; ``resample="up"`` runs the stage on the input grid and then a
    stride-2 transposed convolution.  In both cases the Swin layers work at the
    grid where the block keeps its ``stage.dim`` channels.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        depth: int,
        num_heads: int,
        window_size: int = 8,
        resample: str = "down",
        kernel_size: int = 3,
        prompt_channels: Optional[int] = None,
        prompt_stride: int = 2,
        per_layer_prompts: bool = False,
    ):
        super().__init__()
        if resample not in ("down", "up"):
            raise ValueError(f"unknown resample mode {resample!r}")
        self.resample = resample
        dim = out_ch if resample == "down" else in_ch
        self.stage = SwinStage(
            dim,
            depth,
            num_heads,
            window_size,
            prompt_channels=prompt_channels,
            prompt_stride=prompt_stride,
            per_layer_prompts=per_layer_prompts,
        )
        if resample == "down":
            self.resample_conv = conv(in_ch, out_ch, kernel_size, stride=2)
        else:
            self.resample_conv = deconv(in_ch, out_ch, kernel_size, stride=2)

    @property
    def prompted(self) -> bool:
        return self.stage.prompted

    def forward(self, x: torch.Tensor, prompt_map: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.resample == "down":
            return self.stage(self.resample_conv(x), prompt_map)
        return self.resample_conv(self.stage(x, prompt_map))
