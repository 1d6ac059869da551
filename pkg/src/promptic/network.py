"""The prompt-conditioned transformer codec: g_a, g_s, h_a, h_s, p_a and p_s."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import SwinBlock, conv, deconv
from .entropy import FactorizedPrior, GaussianConditional, quantize

__all__ = ["CodecConfig", "LatentBundle", "PromptCodec", "TOY_CONFIG"]


@dataclass
class CodecConfig:
    stage_channels: Sequence[int] = (96, 128, 160, 192)
    latent_channels: int = 192
    hyper_channels: int = 128
    swin_layers_per_block: int = 2
    window_size: int = 8
    head_counts: Sequence[int] = (4, 4, 8, 8)
    hyper_heads: int = 4
    prompt_channels: Optional[Sequence[int]] = None
    per_layer_prompts: bool = False
    sigma_min: float = 0.11

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.head_counts = tuple(int(h) for h in self.head_counts)
        if len(self.stage_channels) != 4 or len(self.head_counts) != 4:
            raise ValueError("need exactly four encoder stages")
        if self.stage_channels[-1] != self.latent_channels:
            raise ValueError("the last stage width must equal latent_channels")
        if self.prompt_channels is None:
            self.prompt_channels = tuple(max(c // 2, 1) for c in self.stage_channels)
        self.prompt_channels = tuple(int(c) for c in self.prompt_channels)
        for c, h in zip(self.stage_channels, self.head_counts):
            if c % h:
                raise ValueError(f"stage width {c} not divisible by {h} heads")
        if self.hyper_channels % self.hyper_heads:
            raise ValueError("hyper_channels not divisible by hyper_heads")
        if self.window_size % 4:
            raise ValueError("window_size must be divisible by 4")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict) -> "CodecConfig":
        return cls(**data)


# desk-scale configuration used by the tests and the abbreviated training runs
TOY_CONFIG = dict(
    stage_channels=(32, 48, 64, 64),
    latent_channels=64,
    hyper_channels=32,
    swin_layers_per_block=2,
    window_size=8,
    head_counts=(2, 2, 4, 4),
    hyper_heads=2,
)


@dataclass
class LatentBundle:
    y: torch.Tensor
    y_hat: torch.Tensor
    z: torch.Tensor
    z_hat: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor


class PromptGenerator(nn.Module):
    """Stack of convolutions emitting one feature map per codec stage.

    The encoder-side generator downsamples with stride-2 convolutions; the
    decoder-side one upsamples with transposed convolutions.  The first map is
    the output of the stride-1 input convolution.
    """

    def __init__(self, in_ch: int, channels: Sequence[int], upsample: bool = False):
        super().__init__()
        self.input_conv = conv(in_ch, channels[0], 3)
        make = deconv if upsample else (lambda i, o: conv(i, o, 3, stride=2))
        self.resample = nn.ModuleList(make(channels[i], channels[i + 1]) for i in range(len(channels) - 1))
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        h = self.input_conv(x)
        maps = [h]
        for layer in self.resample:
            h = layer(self.act(h))
            maps.append(h)
        return maps


class PromptCodec(nn.Module):
    """Swin-transformer hyperprior codec conditioned by generated prompt tokens.

    The encoder sees the image, the ROI mask and a uniform lambda map through
    its prompt generator; the decoder sees only the quantized latent and the
    lambda map at latent resolution.
    """

    def __init__(self, config: Optional[CodecConfig] = None, **kwargs):
        super().__init__()
        if config is None:
            config = CodecConfig(**kwargs)
        self.config = config
        c = config
        L, w = c.swin_layers_per_block, c.window_size
        enc_in = (3,) + c.stage_channels[:-1]

        self.g_a = nn.ModuleList(
            SwinBlock(
                enc_in[i],
                c.stage_channels[i],
                L,
                c.head_counts[i],
                w,
                resample="down",
                kernel_size=5 if i == 0 else 3,
                prompt_channels=c.prompt_channels[i],
                prompt_stride=4,
                per_layer_prompts=c.per_layer_prompts,
            )
            for i in range(4)
        )
        dec_dims = tuple(reversed(c.stage_channels)) + (3,)
        dec_heads = tuple(reversed(c.head_counts))
        dec_prompt = tuple(reversed(c.prompt_channels))
        self.g_s = nn.ModuleList(
            SwinBlock(
                dec_dims[j],
                dec_dims[j + 1],
                L,
                dec_heads[j],
                w,
                resample="up",
                kernel_size=5 if j == 3 else 3,
                prompt_channels=dec_prompt[j],
                prompt_stride=2,
                per_layer_prompts=c.per_layer_prompts,
            )
            for j in range(4)
        )
        self.h_a = nn.ModuleList(
            [
                SwinBlock(c.latent_channels, c.hyper_channels, L, c.hyper_heads, w, resample="down"),
                conv(c.hyper_channels, c.hyper_channels, 3, stride=2),
            ]
        )
        self.h_s = nn.ModuleList(
            [
                deconv(c.hyper_channels, c.hyper_channels),
                SwinBlock(c.hyper_channels, 2 * c.latent_channels, L, c.hyper_heads, w, resample="up"),
            ]
        )
        self.p_a = PromptGenerator(5, c.prompt_channels)
        self.p_s = PromptGenerator(c.latent_channels + 1, dec_prompt, upsample=True)

        self.prior = FactorizedPrior(c.hyper_channels)
        self.gaussian = GaussianConditional(c.sigma_min)

    # sub-network groups, used for freezing and gradient audits
    def subnetworks(self) -> Dict[str, nn.Module]:
        return {
            "g_a": self.g_a,
            "g_s": self.g_s,
            "h_a": self.h_a,
            "h_s": self.h_s,
            "p_a": self.p_a,
            "p_s": self.p_s,
            "prior": self.prior,
        }

    def prompted_layers(self):
        for block in list(self.g_a) + list(self.g_s):
            for layer in block.stage.layers:
                yield layer

    # -- prompt generation -------------------------------------------------

    @staticmethod
    def _batch_rate(m, batch: int, like: torch.Tensor) -> torch.Tensor:
        m = torch.as_tensor(m, dtype=like.dtype, device=like.device)
        if m.dim() == 0:
            m = m.expand(batch)
        return m.reshape(batch, 1, 1, 1)

    def encoder_prompts(self, x: torch.Tensor, roi_mask: torch.Tensor, m) -> List[torch.Tensor]:
        """Prompt pyramid for g_a from the image, ROI mask and rate parameter.

        Map ``i`` has the resolution of the input to encoder stage ``i``.
        """
        B, _, H, W = x.shape
        if roi_mask.shape[-2:] != (H, W):
            raise ValueError(f"ROI mask {tuple(roi_mask.shape[-2:])} does not match image {(H, W)}")
        lam = self._batch_rate(m, B, x).expand(B, 1, H, W)
        roi = roi_mask.to(x.dtype).reshape(B, 1, H, W)
        return self.p_a(torch.cat([roi, lam, x], dim=1))

    def decoder_prompts(self, y_hat: torch.Tensor, lambda_small: torch.Tensor) -> List[torch.Tensor]:
        """Prompt pyramid for g_s from the quantized latent and the downscaled lambda map."""
        B, _, h, w = y_hat.shape
        if lambda_small.shape[-2:] != (h, w):
            raise ValueError(
                f"lambda map {tuple(lambda_small.shape[-2:])} does not match latent grid {(h, w)}"
            )
        lam = lambda_small.to(y_hat.dtype).expand(B, 1, h, w)
        return self.p_s(torch.cat([y_hat, lam], dim=1))

    # -- transforms --------------------------------------------------------

    def encode_latent(self, x, prompts: Optional[List[torch.Tensor]]) -> torch.Tensor:
        h = x
        for i, block in enumerate(self.g_a):
            h = block(h, None if prompts is None else prompts[i])
        return h

    def decode_latent(self, y_hat, prompts: Optional[List[torch.Tensor]]) -> torch.Tensor:
        h = y_hat
        for j, block in enumerate(self.g_s):
            h = block(h, None if prompts is None else prompts[j])
        return h

    def hyper_params(self, z_hat: torch.Tensor):
        h = z_hat
        for layer in self.h_s:
            h = layer(h)
        mu, sigma_raw = h.chunk(2, dim=1)
        sigma = self.config.sigma_min + F.softplus(sigma_raw)
        return mu, sigma

    def analyze(
        self,
        x: torch.Tensor,
        roi_mask: torch.Tensor,
        m,
        mode: str = "train",
        use_prompts: bool = True,
    ) -> LatentBundle:
        """Image and conditioning planes -> latents and Gaussian parameters."""
        H, W = x.shape[-2:]
        if H % 64 or W % 64:
            raise ValueError(f"input {H}x{W} must be padded to multiples of 64")
        prompts = self.encoder_prompts(x, roi_mask, m) if use_prompts else None
        y = self.encode_latent(x, prompts)
        z = y
        for layer in self.h_a:
            z = layer(z)
        z_hat = quantize(z, mode)
        mu, sigma = self.hyper_params(z_hat)
        if mode == "eval":
            y_hat = quantize(y, "eval", offset=mu)
        else:
            y_hat = quantize(y, mode)
        return LatentBundle(y=y, y_hat=y_hat, z=z, z_hat=z_hat, mu=mu, sigma=sigma)

    def synthesize(
        self,
        y_hat: torch.Tensor,
        lambda_small: Optional[torch.Tensor],
        clamp: bool = False,
        use_prompts: bool = True,
    ) -> torch.Tensor:
        prompts = self.decoder_prompts(y_hat, lambda_small) if use_prompts else None
        x_hat = self.decode_latent(y_hat, prompts)
        return x_hat.clamp(0.0, 1.0) if clamp else x_hat

    def likelihoods(self, bundle: LatentBundle):
        return {
            "y": self.gaussian.likelihood(bundle.y_hat, bundle.mu, bundle.sigma),
            "z": self.prior.likelihood(bundle.z_hat),
        }

    def forward(self, x, roi_mask, m, mode: str = "train", use_prompts: bool = True):
        bundle = self.analyze(x, roi_mask, m, mode=mode, use_prompts=use_prompts)
        B = x.shape[0]
        lambda_small = self._batch_rate(m, B, x).expand(B, 1, *bundle.y_hat.shape[-2:])
        x_hat = self.synthesize(bundle.y_hat, lambda_small, clamp=mode == "eval", use_prompts=use_prompts)
        return {"x_hat": x_hat, "likelihoods": self.likelihoods(bundle), "bundle": bundle}
