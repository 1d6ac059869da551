"""ROI-masked rate-distortion loss and the three-stage training schedule."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .conditioning import RateMapping, generate_mask, lambda_of, random_mask_spec
from .entropy import estimate_rate
from .io import load_checkpoint, read_image, save_checkpoint
from .network import CodecConfig, PromptCodec

__all__ = [
    "D_SCALE",
    "LossBreakdown",
    "rd_loss",
    "per_sample_bpp",
    "StagePlan",
    "sample_rates",
    "balanced_total",
    "sample_masks",
    "trainable_parameters",
    "TrainingDiverged",
    "ImageFolderDataset",
    "TensorImageDataset",
    "train_stage",
    "TrainingConfig",
    "run_training",
]

logger = logging.getLogger(__name__)

D_SCALE = 255.0 ** 2
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class LossBreakdown:
    masked_mse: torch.Tensor
    bpp: torch.Tensor
    lam: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "masked_mse": float(self.masked_mse.mean()),
            "bpp": float(self.bpp.mean()),
            "lambda": float(self.lam.mean()),
            "total": float(self.total),
        }


def rd_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    roi_mask: torch.Tensor,
    m,
    bpp,
    mapping: RateMapping = RateMapping(),
    d_scale: float = D_SCALE,
) -> LossBreakdown:
    """Rate-distortion loss with the squared error of each pixel weighted by the ROI mask.

    ``x`` and ``x_hat`` are (C, H, W) or (B, C, H, W); the mask has one channel
    and is broadcast over color channels.  The masked MSE divides by the full
    element count of one image, so a unit mask gives the plain MSE.  ``m`` and
    ``bpp`` may be scalars or per-sample (B,) tensors; ``total`` is the batch
    mean of ``lambda * masked_mse * d_scale + bpp``.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if roi_mask.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"ROI mask {tuple(roi_mask.shape[-2:])} does not match image {tuple(x.shape[-2:])}")
    batched = x.dim() == 4
    xb = x if batched else x.unsqueeze(0)
    xh = x_hat if batched else x_hat.unsqueeze(0)
    B = xb.shape[0]
    mask = roi_mask.to(xb.dtype).reshape(-1, 1, *xb.shape[-2:])
    per_sample = (mask * (xb - xh) ** 2).flatten(1).sum(dim=1) / xb[0].numel()

    m = torch.as_tensor(m, dtype=xb.dtype, device=xb.device)
    lam = lambda_of(m.expand(B) if m.dim() == 0 else m, mapping)
    bpp = torch.as_tensor(bpp, dtype=xb.dtype, device=xb.device)
    bpp = bpp.expand(B) if bpp.dim() == 0 else bpp
    total = (lam * per_sample * d_scale + bpp).mean()
    if not batched:
        return LossBreakdown(per_sample[0], bpp[0], lam[0], total)
    return LossBreakdown(per_sample, bpp, lam, total)


def balanced_total(loss: LossBreakdown, d_scale: float = D_SCALE) -> torch.Tensor:
    """Batch mean of per-sample losses rescaled by ``lambda_of(0.5) / lambda``.

    Each sample's optimum is unchanged; only the relative weight of samples
    drawn at different rates in the shared gradient is evened out.
    """
    per_sample = loss.lam * loss.masked_mse * d_scale + loss.bpp
    return (per_sample * (lambda_of(0.5) / loss.lam)).mean()


def per_sample_bpp(likelihoods: Dict[str, torch.Tensor], height: int, width: int) -> torch.Tensor:
    """(B,) bits per pixel from the y and z likelihood tensors."""
    B = next(iter(likelihoods.values())).shape[0]
    return torch.stack(
        [estimate_rate([p[b] for p in likelihoods.values()], height, width) for b in range(B)]
    )


@dataclass
class StagePlan:
    """One training stage.

    Stage 1 trains the base codec (no prompt generators) at m = 1 with a unit
    mask; stage 2 trains everything with m ~ U[0, 1] and a unit mask; stage 3
    also draws a random ROI mask per sample.
    """

    stage: int
    steps: int
    learning_rate: float = 1e-4
    batch_size: int = 8
    crop: int = 256
    clip_norm: float = 1.0
    decay_at: Optional[int] = None
    decay_factor: float = 0.1
    checkpoint_every: int = 0
    log_every: int = 1
    balance_rates: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")

    @property
    def uses_prompts(self) -> bool:
        return self.stage > 1


def sample_rates(plan: StagePlan, batch: int, generator: torch.Generator) -> torch.Tensor:
    """Per-sample rate parameters for one step."""
    if plan.stage == 1:
        return torch.ones(batch, dtype=torch.float64)
    return torch.rand(batch, generator=generator, dtype=torch.float64)


def sample_masks(plan: StagePlan, batch: int, height: int, width: int, rng: np.random.Generator) -> torch.Tensor:
    """Per-sample (B, 1, H, W) ROI masks for one step."""
    if plan.stage < 3:
        return torch.ones(batch, 1, height, width)
    masks = [generate_mask(random_mask_spec(rng), height, width) for _ in range(batch)]
    return torch.from_numpy(np.stack(masks)).float()


def trainable_parameters(model: PromptCodec, plan: StagePlan) -> List[torch.nn.Parameter]:
    if plan.uses_prompts:
        return [p for p in model.parameters()]
    frozen = {id(p) for name in ("p_a", "p_s") for p in getattr(model, name).parameters()}
    return [p for p in model.parameters() if id(p) not in frozen]


class TrainingDiverged(RuntimeError):
    pass


class TensorImageDataset(Dataset):
    """Random crops from in-memory (3, H, W) images."""

    def __init__(self, images: Sequence[torch.Tensor], crop: int, seed: int = 0):
        self.images = list(images)
        self.crop = crop
        self.rng = random.Random(seed)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        return random_crop(self.images[index], self.crop, self.rng)


class ImageFolderDataset(TensorImageDataset):
    """Random crops from every image file under ``root``."""

    def __init__(self, root: Union[str, Path], crop: int, seed: int = 0):
        paths = sorted(p for p in Path(root).rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise FileNotFoundError(f"no images found under {root}")
        super().__init__([read_image(p) for p in paths], crop, seed)


def random_crop(img: torch.Tensor, crop: int, rng: random.Random) -> torch.Tensor:
    _, H, W = img.shape
    if H < crop or W < crop:
        scale = crop / min(H, W)
        img = F.interpolate(img[None], size=(max(crop, round(H * scale)), max(crop, round(W * scale))),
                            mode="bilinear", align_corners=False)[0]
        _, H, W = img.shape
    top = rng.randint(0, H - crop)
    left = rng.randint(0, W - crop)
    return img[:, top:top + crop, left:left + crop]


def _batches(dataset: Dataset, batch_size: int, seed: int) -> Iterator[torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    while True:
        loader = DataLoader(dataset, batch_size=batch_size, shuffle=True, drop_last=False, generator=gen)
        for batch in loader:
            yield batch


def train_stage(
    plan: StagePlan,
    model: PromptCodec,
    dataset: Dataset,
    seed: int = 0,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    callback: Optional[Callable[[Dict], None]] = None,
) -> List[Dict]:
    """Run one stage of optimization in place; returns the per-step metric records."""
    torch.manual_seed(seed)
    rate_gen = torch.Generator().manual_seed(seed)
    mask_rng = np.random.Generator(np.random.Philox(seed))
    params = trainable_parameters(model, plan)
    optimizer = torch.optim.Adam(params, lr=plan.learning_rate)
    batches = _batches(dataset, plan.batch_size, seed)
    log_file = open(log_path, "a") if log_path else None
    records = []
    model.train()
    try:
        for step in range(1, plan.steps + 1):
            if plan.decay_at and step == plan.decay_at:
                for group in optimizer.param_groups:
                    group["lr"] *= plan.decay_factor
            x = next(batches)
            B, _, H, W = x.shape
            m = sample_rates(plan, B, rate_gen).to(x.dtype)
            roi = sample_masks(plan, B, H, W, mask_rng).to(x.dtype)

            out = model(x, roi, m, mode="train", use_prompts=plan.uses_prompts)
            bpp = per_sample_bpp(out["likelihoods"], H, W)
            loss = rd_loss(x, out["x_hat"], roi, m, bpp)
            if not torch.isfinite(loss.total):
                raise TrainingDiverged(f"non-finite loss at stage {plan.stage} step {step}")
            objective = balanced_total(loss) if plan.balance_rates else loss.total

            optimizer.zero_grad(set_to_none=True)
            objective.backward()
            if plan.clip_norm:
                torch.nn.utils.clip_grad_norm_(params, plan.clip_norm)
            optimizer.step()

            record = {
                "step": step,
                "stage": plan.stage,
                "m_lambda": float(m.mean()),
                "bpp": float(bpp.detach().mean()),
                "masked_mse": float(loss.masked_mse.detach().mean()),
                "total": float(loss.total.detach()),
            }
            records.append(record)
            if log_file and step % plan.log_every == 0:
                log_file.write(json.dumps(record) + "\n")
            if callback:
                callback(record)
            if checkpoint_dir and plan.checkpoint_every and step % plan.checkpoint_every == 0:
                save_checkpoint(model, Path(checkpoint_dir) / f"stage{plan.stage}_step{step}.npz")
    finally:
        if log_file:
            log_file.close()
        model.eval()
    return records


@dataclass
class TrainingConfig:
    """JSON training configuration: codec, dataset, seed and the stage plans."""

    dataset: str
    stages: List[StagePlan]
    codec: CodecConfig = field(default_factory=CodecConfig)
    seed: int = 0
    output_dir: str = "runs"
    metrics_log: Optional[str] = None

    @classmethod
    def from_json(cls, text: str) -> "TrainingConfig":
        data = json.loads(text)
        return cls(
            dataset=data["dataset"],
            stages=[StagePlan(**s) for s in data["stages"]],
            codec=CodecConfig.from_dict(data.get("codec", {})),
            seed=int(data.get("seed", 0)),
            output_dir=data.get("output_dir", "runs"),
            metrics_log=data.get("metrics_log"),
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "dataset": self.dataset,
                "stages": [asdict(s) for s in self.stages],
                "codec": asdict(self.codec),
                "seed": self.seed,
                "output_dir": self.output_dir,
                "metrics_log": self.metrics_log,
            },
            indent=2,
        )


def run_training(config: TrainingConfig, model: Optional[PromptCodec] = None) -> Path:
    """Run the configured stages in order; returns the final checkpoint path.

    Each stage writes ``stage{n}.npz`` into ``output_dir`` and the next stage
    starts from that file.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    if model is None:
        model = PromptCodec(config.codec)
    log_path = config.metrics_log or str(out / "metrics.jsonl")
    ckpt = None
    for i, plan in enumerate(config.stages):
        if ckpt is not None:
            model = load_checkpoint(ckpt)
        dataset = ImageFolderDataset(config.dataset, plan.crop, seed=config.seed + i)
        records = train_stage(plan, model, dataset, seed=config.seed + i, log_path=log_path, checkpoint_dir=out)
        ckpt = out / f"stage{plan.stage}.npz"
        save_checkpoint(model, ckpt)
        logger.info("stage %d done: final loss %.4f", plan.stage, records[-1]["total"] if records else math.nan)
    return ckpt
