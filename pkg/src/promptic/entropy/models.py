"""Quantization and likelihood models for the two latent tensors."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tables import TAIL_THRESHOLD, CdfTable, gaussian_table, scale_table, table_from_pmfs

__all__ = [
    "LIKELIHOOD_FLOOR",
    "round_half_away",
    "quantize",
    "gaussian_likelihood",
    "FactorizedPrior",
    "GaussianConditional",
    "estimate_rate",
]

LIKELIHOOD_FLOOR = 2.0 ** -32


def round_half_away(v: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer, ties away from zero (torch.round ties to even)."""
    return torch.sign(v) * torch.floor(v.abs() + 0.5)


def quantize(
    v: torch.Tensor,
    mode: str,
    offset=0.0,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Additive uniform noise in ``"train"`` mode, offset rounding in ``"eval"`` mode."""
    v = torch.as_tensor(v)
    if mode == "train":
        u = torch.rand(v.shape, generator=generator, dtype=v.dtype, device=v.device) - 0.5
        return v + u
    if mode == "eval":
        return round_half_away(v - offset) + offset
    raise ValueError(f"unknown quantization mode {mode!r}")


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (2 ** -0.5))


def gaussian_likelihood(
    y_hat: torch.Tensor,
    mu: torch.Tensor,
    sigma: torch.Tensor,
    sigma_min: float = 0.11,
    floor: float = LIKELIHOOD_FLOOR,
) -> torch.Tensor:
    """Probability mass of the unit bin around ``y_hat`` under N(mu, sigma^2).

    Computed on the side of the mean where the normal CDF is small, which keeps
    precision in the tails.  Scales below ``sigma_min`` are clamped and the
    result is floored at ``floor`` so that its log stays finite.
    """
    sigma = torch.as_tensor(sigma).clamp_min(sigma_min)
    v = (y_hat - mu).abs()
    upper = _std_normal_cdf((0.5 - v) / sigma)
    lower = _std_normal_cdf((-0.5 - v) / sigma)
    return (upper - lower).clamp_min(floor)


class FactorizedPrior(nn.Module):
    """Per-channel learned univariate density for the hyper-latent.

    The cumulative is a small monotone network per channel (softplus-positive
    matrices, tanh gates); the likelihood of an integer bin is the difference
    of the cumulative at its edges.
    """

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(self.filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(self.filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        """x: (C, 1, N) -> logits of the CDF at x, same shape."""
        logits = x
        for i, matrix in enumerate(self.matrices):
            logits = torch.matmul(F.softplus(matrix), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def likelihood(self, z_hat: torch.Tensor) -> torch.Tensor:
        """Likelihood of each element of a (B, C, H, W) tensor."""
        B, C, H, W = z_hat.shape
        v = z_hat.permute(1, 0, 2, 3).reshape(C, 1, -1)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        p = p.clamp_min(LIKELIHOOD_FLOOR)
        return p.reshape(C, B, H, W).permute(1, 0, 2, 3)

    @torch.no_grad()
    def build_table(self, search_radius: int = 2048) -> CdfTable:
        """One CDF row per channel covering the bins above the tail threshold."""
        grid = torch.arange(-search_radius, search_radius + 1, dtype=torch.float64)
        x = grid.expand(self.channels, 1, -1)
        with _double_params(self):
            lower = self.logits_cumulative(x - 0.5)
            upper = self.logits_cumulative(x + 0.5)
        sign = -torch.sign(lower + upper)
        pmf = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()[:, 0, :].numpy()
        pmfs, offsets, tails = [], [], []
        for c in range(self.channels):
            keep = np.nonzero(pmf[c] >= TAIL_THRESHOLD)[0]
            if keep.size == 0:
                keep = np.array([int(np.argmax(pmf[c]))])
            lo, hi = int(keep[0]), int(keep[-1])
            row = pmf[c, lo:hi + 1]
            pmfs.append(row)
            offsets.append(lo - search_radius)
            tails.append(max(1.0 - float(row.sum()), 0.0))
        return table_from_pmfs(pmfs, offsets, tails)


class _double_params:
    """Temporarily evaluate a module in float64 without touching its stored dtype."""

    def __init__(self, module: nn.Module):
        self.module = module

    def __enter__(self):
        self.saved = {n: p.data for n, p in self.module.named_parameters()}
        for p in self.module.parameters():
            p.data = p.data.double()

    def __exit__(self, *exc):
        for n, p in self.module.named_parameters():
            p.data = self.saved[n]


class GaussianConditional(nn.Module):
    """Mean-scale Gaussian model for the image latent with a snapped scale table."""

    def __init__(self, sigma_min: float = 0.11, sigma_max: float = 256.0, levels: int = 64):
        super().__init__()
        self.sigma_min = sigma_min
        # float64 and outside the module's buffers so dtype casts cannot perturb it
        self.scale_table = torch.tensor(scale_table(sigma_min, sigma_max, levels), dtype=torch.float64)
        self._table: Optional[CdfTable] = None

    def likelihood(self, y_hat: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        return gaussian_likelihood(y_hat, mu, sigma, self.sigma_min)

    def scale_index(self, sigma: torch.Tensor) -> torch.Tensor:
        """Index of the nearest table scale in log space."""
        log_table = self.scale_table.log()
        log_sigma = sigma.double().clamp(self.scale_table[0], self.scale_table[-1]).log()
        idx = torch.bucketize(log_sigma, log_table)
        idx = idx.clamp(1, len(log_table) - 1)
        lower_closer = (log_sigma - log_table[idx - 1]) <= (log_table[idx] - log_sigma)
        return torch.where(lower_closer, idx - 1, idx)

    @property
    def table(self) -> CdfTable:
        if self._table is None:
            self._table = gaussian_table(self.scale_table.numpy())
        return self._table


def estimate_rate(likelihoods: Sequence[torch.Tensor], height: int, width: int) -> torch.Tensor:
    """Bits per pixel implied by element likelihoods for an H x W (unpadded) image."""
    likelihoods = list(likelihoods)
    if not likelihoods:
        return torch.zeros((), dtype=torch.float64)
    bits = sum((-torch.log2(p)).sum() for p in likelihoods)
    return bits / (height * width)
