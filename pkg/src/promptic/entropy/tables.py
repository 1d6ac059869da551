"""Quantized CDF tables for the range coder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "PRECISION",
    "TAIL_THRESHOLD",
    "CdfTable",
    "quantize_pmf",
    "table_from_pmfs",
    "gaussian_table",
    "scale_table",
]

PRECISION = 16
# bins below half of the smallest representable probability fold into the escape
TAIL_THRESHOLD = 2.0 ** -PRECISION * 0.5


@dataclass
class CdfTable:
    """One CDF row per context.

    ``cdfs[c]`` is strictly increasing from 0 to 2^16 and has ``n + 1`` entries
    for ``n`` bins; the last bin is the escape symbol.  Bin ``i < n - 1`` codes
    the integer value ``offsets[c] + i``.
    """

    cdfs: List[List[int]]
    offsets: List[int]

    def __len__(self) -> int:
        return len(self.cdfs)

    @property
    def lengths(self) -> List[int]:
        return [len(c) - 1 for c in self.cdfs]

    def probabilities(self, context: int) -> np.ndarray:
        return np.diff(np.asarray(self.cdfs[context], dtype=np.float64)) / (1 << PRECISION)

    def symbol_bits(self, value: int, context: int) -> float:
        """Exact code length of ``value`` under this table, escape bits included."""
        cdf = self.cdfs[context]
        escape = len(cdf) - 2
        idx = value - self.offsets[context]
        if 0 <= idx < escape:
            return PRECISION - np.log2(cdf[idx + 1] - cdf[idx])
        distance = int(-idx if idx < 0 else idx - escape + 1)
        escape_bits = PRECISION - np.log2(cdf[escape + 1] - cdf[escape])
        # Elias-gamma bits plus one sign bit
        return escape_bits + 2 * distance.bit_length()


def quantize_pmf(pmf: Sequence[float], precision: int = PRECISION) -> List[int]:
    """Quantize probabilities to integer frequencies summing to 2^precision.

    Every bin receives at least one count; the rest of the budget is split
    proportionally with the largest-remainder method.  Returns the CDF
    (``len(pmf) + 1`` entries, first 0, last 2^precision).
    """
    p = np.asarray(pmf, dtype=np.float64)
    n = p.size
    total = 1 << precision
    if n == 0 or n > total:
        raise ValueError(f"cannot quantize {n} bins to {precision} bits")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("pmf must be finite, nonnegative and not all zero")
    p = p / p.sum()
    raw = p * (total - n)
    freq = np.floor(raw).astype(np.int64) + 1
    remaining = total - int(freq.sum())
    if remaining:
        order = np.argsort(-(raw - np.floor(raw)), kind="stable")
        freq[order[:remaining]] += 1
    cdf = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf.tolist()


def table_from_pmfs(pmfs: Sequence[np.ndarray], offsets: Sequence[int], tails: Sequence[float]) -> CdfTable:
    """Build a table from per-context in-support pmfs plus their escape (tail) mass."""
    cdfs = []
    for pmf, tail in zip(pmfs, tails):
        full = np.append(np.asarray(pmf, dtype=np.float64), max(float(tail), 0.0))
        cdfs.append(quantize_pmf(full))
    return CdfTable(cdfs, [int(o) for o in offsets])


def scale_table(sigma_min: float = 0.11, sigma_max: float = 256.0, levels: int = 64) -> np.ndarray:
    return np.exp(np.linspace(np.log(sigma_min), np.log(sigma_max), levels))


def gaussian_table(scales: Sequence[float]) -> CdfTable:
    """Zero-mean discretized Gaussian rows, one per scale, for mean-centered residuals."""
    pmfs, offsets, tails = [], [], []
    for s in np.asarray(scales, dtype=np.float64):
        # support radius: last k with pmf(k) >= threshold, pmf decreasing in |k|
        k = np.arange(0, int(np.ceil(s * 12)) + 2)
        pmf_half = ndtr((k + 0.5) / s) - ndtr((k - 0.5) / s)
        keep = np.nonzero(pmf_half >= TAIL_THRESHOLD)[0]
        radius = int(keep[-1]) if keep.size else 0
        values = np.arange(-radius, radius + 1)
        pmf = ndtr((values + 0.5) / s) - ndtr((values - 0.5) / s)
        tail = 2.0 * ndtr(-(radius + 0.5) / s)
        pmfs.append(pmf)
        offsets.append(-radius)
        tails.append(tail)
    return table_from_pmfs(pmfs, offsets, tails)
