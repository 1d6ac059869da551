"""Rate-parameter mapping, lambda maps and random ROI masks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

__all__ = [
    "LAMBDA_MIN",
    "LAMBDA_MAX",
    "RateMapping",
    "lambda_of",
    "make_lambda_maps",
    "MASK_KINDS",
    "MaskSpec",
    "generate_mask",
    "random_mask_spec",
    "load_mask",
    "binarize",
]

LAMBDA_MIN = 0.0018
LAMBDA_MAX = 0.0932


@dataclass(frozen=True)
class RateMapping:
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX

    def __post_init__(self):
        if not 0 < self.lambda_min < self.lambda_max:
            raise ValueError("need 0 < lambda_min < lambda_max")


def lambda_of(m, mapping: RateMapping = RateMapping()):
    """Lagrange multiplier for rate parameter ``m`` in [0, 1], log-linear between the bounds.

    Accepts a float or a tensor of per-sample values.
    """
    log_lo = math.log(mapping.lambda_min)
    span = math.log(mapping.lambda_max) - log_lo
    if isinstance(m, torch.Tensor):
        if torch.any((m < 0) | (m > 1)):
            raise ValueError("rate parameter must lie in [0, 1]")
        return torch.exp(span * m + log_lo)
    m = float(m)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"rate parameter {m} outside [0, 1]")
    return math.exp(span * m + log_lo)


def make_lambda_maps(
    m: float, height: int, width: int, dtype: torch.dtype = torch.float32
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Full-resolution lambda map (1, H, W) and its /16 version (1, H/16, W/16).

    Both are filled with ``m``; the downscaled map takes the nearest value,
    which is exact for a uniform map.
    """
    if height % 16 or width % 16:
        raise ValueError(f"lambda maps need sides divisible by 16, got {height}x{width}")
    full = torch.full((1, height, width), float(m), dtype=dtype)
    small = full[:, 8::16, 8::16].clone()
    return full, small


MASK_KINDS = ("uniform", "gradient", "rectangles", "blobs")


@dataclass
class MaskSpec:
    """A reproducible ROI mask description.

    ``params`` may pin any of the per-kind values that are otherwise drawn
    from the seeded generator:

    - uniform: ``value``
    - gradient: ``start``, ``end``, ``angle`` (radians)
    - rectangles: ``background``, ``rects`` as ``[y0, x0, y1, x1, value]`` (half-open)
    - blobs: ``low``, ``high``, ``sigma`` (y, x), ``threshold``, ``sharpness``
    """

    kind: str
    seed: int = 0
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}; expected one of {MASK_KINDS}")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "MaskSpec":
        data = json.loads(text)
        return cls(kind=data["kind"], seed=int(data.get("seed", 0)), params=dict(data.get("params", {})))


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _gradient(spec: MaskSpec, rng, H, W):
    p = spec.params
    start = p.get("start", rng.uniform())
    end = p.get("end", rng.uniform())
    angle = p.get("angle", rng.uniform(0.0, 2 * math.pi))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    t = math.cos(angle) * xx + math.sin(angle) * yy
    span = t.max() - t.min()
    t = (t - t.min()) / span if span > 0 else np.zeros_like(t)
    return start + (end - start) * t


def _rectangles(spec: MaskSpec, rng, H, W):
    p = spec.params
    background = p.get("background", rng.uniform())
    mask = np.full((H, W), background, dtype=np.float64)
    rects = p.get("rects")
    if rects is None:
        rects = []
        for _ in range(int(rng.integers(1, 4))):
            y0, y1 = sorted(rng.integers(0, H + 1, size=2))
            x0, x1 = sorted(rng.integers(0, W + 1, size=2))
            y1, x1 = max(y1, y0 + 1), max(x1, x0 + 1)
            rects.append([y0, x0, y1, x1, rng.uniform()])
    for y0, x0, y1, x1, value in rects:
        mask[int(y0):int(y1), int(x0):int(x1)] = value
    return mask


def _blobs(spec: MaskSpec, rng, H, W):
    p = spec.params
    low = p.get("low", rng.uniform(0.0, 0.5))
    high = p.get("high", rng.uniform(0.5, 1.0))
    sigma = p.get("sigma", (rng.uniform(0.05, 0.2) * H, rng.uniform(0.05, 0.2) * W))
    threshold = p.get("threshold", rng.uniform(-0.5, 0.5))
    sharpness = p.get("sharpness", 4.0)
    noise = gaussian_filter(rng.standard_normal((H, W)), sigma=sigma, mode="wrap")
    std = noise.std()
    noise = (noise - noise.mean()) / (std if std > 0 else 1.0)
    soft = 1.0 / (1.0 + np.exp(-sharpness * (noise - threshold)))
    return low + (high - low) * soft


def generate_mask(spec: MaskSpec, height: int, width: int) -> np.ndarray:
    """Render ``spec`` to a (1, H, W) float64 mask with values in [0, 1]."""
    rng = _rng(spec.seed)
    if spec.kind == "uniform":
        mask = np.full((height, width), spec.params.get("value", rng.uniform()), dtype=np.float64)
    elif spec.kind == "gradient":
        mask = _gradient(spec, rng, height, width)
    elif spec.kind == "rectangles":
        mask = _rectangles(spec, rng, height, width)
    else:
        mask = _blobs(spec, rng, height, width)
    return np.clip(mask, 0.0, 1.0)[None]


def random_mask_spec(rng: np.random.Generator) -> MaskSpec:
    """Draw a mask kind uniformly and a fresh seed for it."""
    kind = MASK_KINDS[int(rng.integers(len(MASK_KINDS)))]
    return MaskSpec(kind=kind, seed=int(rng.integers(2**63 - 1)))


def load_mask(source: Union[str, Path], height: int, width: int) -> np.ndarray:
    """Load a (1, H, W) mask from an 8-bit grayscale image or a JSON MaskSpec file."""
    path = Path(source)
    if path.suffix.lower() == ".json":
        return generate_mask(MaskSpec.from_json(path.read_text()), height, width)
    with Image.open(path) as im:
        mask = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if mask.shape != (height, width):
        raise ValueError(f"mask is {mask.shape[1]}x{mask.shape[0]}, image is {width}x{height}")
    return mask[None]


def binarize(mask, threshold: float = 0.5):
    """ROI membership used by the metrics: mask >= threshold."""
    return mask >= threshold
