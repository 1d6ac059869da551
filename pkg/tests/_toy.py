"""Shared fixtures for the trained-toy checks: a small image corpus and a cached model.

The corpus is random crops of the scikit-image sample photographs.  Three
source photographs are held out entirely and only supply evaluation crops.
Training goes through ``run_training`` on a folder of PNG crops, exactly as
the CLI would run it, and the result is cached next to this file together
with the recipe that produced it.  A changed recipe triggers a retrain.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch

from promptic import TOY_CONFIG, CodecConfig, StagePlan, TrainingConfig, load_checkpoint, run_training
from promptic.io import write_image

CACHE_DIR = Path(__file__).parent / "data"
CHECKPOINT = CACHE_DIR / "toy_trained.npz"
RECIPE_FILE = CACHE_DIR / "toy_trained.json"

TRAIN_SOURCES = (
    "astronaut",
    "chelsea",
    "hubble_deep_field",
    "immunohistochemistry",
    "retina",
    "coins",
    "camera",
    "colorwheel",
    "logo",
    "page",
)
HELDOUT_SOURCES = ("coffee", "rocket", "cat")

RECIPE: Dict = {
    "corpus": {"count": 240, "size": 96, "seed": 7},
    "codec": TOY_CONFIG,
    "seed": 0,
    "stages": [
        {"stage": 1, "steps": 1000, "learning_rate": 5e-4, "batch_size": 8, "crop": 64},
        {"stage": 2, "steps": 20000, "learning_rate": 5e-4, "batch_size": 8, "crop": 64, "decay_at": 17000,
         "balance_rates": True, "checkpoint_every": 4000},
        {"stage": 3, "steps": 8000, "learning_rate": 2e-4, "batch_size": 8, "crop": 64, "decay_at": 6500,
         "balance_rates": True, "checkpoint_every": 4000},
    ],
}


def recipe_digest(recipe: Dict = RECIPE) -> str:
    return hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:16]


def _source_image(name: str) -> np.ndarray:
    from skimage import data

    img = getattr(data, name)()
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    return img[..., :3]


def crops(sources, count: int, size: int, seed: int) -> List[torch.Tensor]:
    """``count`` random size x size crops drawn round-robin from ``sources``."""
    rng = np.random.Generator(np.random.Philox(seed))
    images = [_source_image(n) for n in sources]
    out = []
    for i in range(count):
        img = images[i % len(images)]
        H, W = img.shape[:2]
        top = int(rng.integers(0, H - size + 1))
        left = int(rng.integers(0, W - size + 1))
        patch = img[top:top + size, left:left + size].astype(np.float32) / 255.0
        out.append(torch.from_numpy(patch).permute(2, 0, 1).contiguous())
    return out


def heldout_images(count: int = 20, size: int = 128, seed: int = 11) -> List[torch.Tensor]:
    return crops(HELDOUT_SOURCES, count, size, seed)


def write_corpus(root: Path, recipe: Dict = RECIPE) -> Path:
    c = recipe["corpus"]
    root.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(crops(TRAIN_SOURCES, c["count"], c["size"], c["seed"])):
        write_image(img, root / f"crop{i:04d}.png")
    return root


def train_toy(work_dir: Path, recipe: Dict = RECIPE) -> Path:
    """Run the abbreviated three-stage schedule and return the final checkpoint."""
    corpus = write_corpus(work_dir / "corpus", recipe)
    config = TrainingConfig(
        dataset=str(corpus),
        stages=[StagePlan(**s) for s in recipe["stages"]],
        codec=CodecConfig(**recipe["codec"]),
        seed=recipe["seed"],
        output_dir=str(work_dir / "run"),
    )
    return run_training(config)


def trained_toy_model(work_dir: Path):
    """Load the cached trained model, training it first if the cache is stale."""
    digest = recipe_digest()
    if CHECKPOINT.is_file() and RECIPE_FILE.is_file():
        if json.loads(RECIPE_FILE.read_text()).get("digest") == digest:
            return load_checkpoint(CHECKPOINT)
    ckpt = train_toy(work_dir)
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    CHECKPOINT.write_bytes(Path(ckpt).read_bytes())
    RECIPE_FILE.write_text(json.dumps({"digest": digest, "recipe": RECIPE}, indent=2))
    return load_checkpoint(CHECKPOINT)


if __name__ == "__main__":
    import sys
    import time

    work = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/toy_train")
    t0 = time.time()
    trained_toy_model(work)
    print(f"trained in {time.time() - t0:.0f} s -> {CHECKPOINT}")
