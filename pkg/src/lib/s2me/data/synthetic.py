"""
Synthetic scribble-annotated polyp-like corpus
Each image holds one or two smooth blobs with their own colour and texture
on a textured background. Dense masks are kept for evaluation and for
drawing scribbles; training only sees the scribbles.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import ndimage

from ..errors import ConfigError
from ..losses import UNLABELED
from ..utils import read_json, thread_budget, write_json
from .scribbles import generate_scribbles
from .tensorfile import tensor_file_read, tensor_file_write

logger = logging.getLogger(__name__)

MIN_SIZE = 32
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
FG_FRACTION_RANGE = (0.02, 0.40)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray      # 3 x H x W float32 in [0, 1]
    mask: np.ndarray       # H x W {0, 1}
    scribble: np.ndarray   # H x W {0, 1, 2}
    sample_id: str = ""

    def replace(self, **changes) -> "Sample":
        return dataclasses.replace(self, **changes)

    @property
    def labeled_fraction(self) -> float:
        return float(np.mean(self.scribble != UNLABELED))

    def to_tensors(self) -> Dict[str, np.ndarray]:
        return {"image": self.image, "mask": self.mask, "scribble": self.scribble}


@dataclass
class DatasetManifest:
    root: Path
    splits: Dict[str, List[str]]
    seed: int
    size: int
    corruption: Dict[str, List[str]] = field(default_factory=dict)
    flagged: List[str] = field(default_factory=list)

    def sample_path(self, sample_id: str) -> Path:
        return self.root / "samples" / f"{sample_id}.s2tf"

    def ids(self, split: str) -> List[str]:
        if split not in self.splits:
            raise ConfigError(f"Unknown split: {split} (manifest has {sorted(self.splits)})")
        return list(self.splits[split])

    def load_split(self, split: str) -> List[Sample]:
        return [load_sample(self.sample_path(i), i) for i in self.ids(split)]

    def to_json(self) -> dict:
        return {
            "splits": self.splits,
            "seed": self.seed,
            "size": self.size,
            "corruption": self.corruption,
            "flagged": self.flagged,
        }

    def save(self) -> None:
        write_json(self.root / MANIFEST_NAME, self.to_json())

    @classmethod
    def load(cls, root: Union[str, Path]) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"Dataset manifest not found: {path}")
        payload = read_json(path)
        manifest = cls(
            root=root,
            splits={k: list(v) for k, v in payload["splits"].items()},
            seed=int(payload["seed"]),
            size=int(payload["size"]),
            corruption=payload.get("corruption", {}),
            flagged=payload.get("flagged", []),
        )
        manifest.validate()
        return manifest

    def validate(self) -> None:
        seen: Dict[str, str] = {}
        for split, ids in self.splits.items():
            for sample_id in ids:
                if sample_id in seen:
                    raise ConfigError(f"Sample {sample_id} appears in both {seen[sample_id]} and {split}")
                seen[sample_id] = split


def load_sample(path: Union[str, Path], sample_id: str = "") -> Sample:
    entries = tensor_file_read(path)
    return Sample(
        image=entries["image"].astype(np.float32),
        mask=np.rint(entries["mask"]).astype(np.int64),
        scribble=np.rint(entries["scribble"]).astype(np.int64),
        sample_id=sample_id,
    )


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return noise / (np.abs(noise).max() + 1e-8)


def render_mask(rng: np.random.Generator, size: int, max_tries: int = 20) -> np.ndarray:
    """One or two smooth blobs covering 2%-40% of the image"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    low, high = FG_FRACTION_RANGE
    for _ in range(max_tries):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 3))):
            cy, cx = rng.uniform(0.25, 0.75, size=2) * size
            ry, rx = rng.uniform(0.10, 0.22, size=2) * size
            angle = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = (dy * np.cos(angle) + dx * np.sin(angle)) / ry
            v = (-dy * np.sin(angle) + dx * np.cos(angle)) / rx
            wobble = 0.25 * _smooth_noise(rng, (size, size), sigma=size / 8)
            mask |= (u * u + v * v + wobble) < 1.0
        mask = ndimage.binary_fill_holes(mask)
        if low <= mask.mean() <= high:
            return mask.astype(np.int64)
    # fall back to a centred ellipse, ~7% of the image
    radius = 0.15 * size
    return (((yy - size / 2) ** 2 + (xx - size / 2) ** 2) < radius * radius).astype(np.int64)


def render_image(rng: np.random.Generator, mask: np.ndarray) -> np.ndarray:
    size = mask.shape[0]
    base = np.array([0.62, 0.36, 0.30]) + rng.uniform(-0.05, 0.05, size=3)
    lesion = np.array([0.78, 0.48, 0.38]) + rng.uniform(-0.05, 0.05, size=3)

    background_texture = _smooth_noise(rng, (size, size), sigma=3.0)
    lesion_texture = _smooth_noise(rng, (size, size), sigma=1.2)
    shading = _smooth_noise(rng, (size, size), sigma=size / 4)
    soft_mask = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.0)

    image = np.empty((3, size, size))
    for c in range(3):
        bg = base[c] + 0.08 * background_texture + 0.10 * shading
        fg = lesion[c] + 0.06 * lesion_texture + 0.10 * shading
        image[c] = (1.0 - soft_mask) * bg + soft_mask * fg
    image += rng.normal(0.0, 0.03, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def render_sample(seed: int, index: int, size: int, sample_id: str, max_label_fraction: float = 0.05):
    """Deterministic in (seed, index) regardless of generation order"""
    rng = np.random.default_rng([seed, index])
    mask = render_mask(rng, size)
    image = render_image(rng, mask)
    scribble, flagged = generate_scribbles(mask, rng, max_label_fraction=max_label_fraction)
    return Sample(image=image, mask=mask, scribble=scribble.labels, sample_id=sample_id), flagged


def _write_sample(root: Path, seed: int, index: int, size: int, sample_id: str, max_label_fraction: float):
    sample, flagged = render_sample(seed, index, size, sample_id, max_label_fraction)
    tensor_file_write(root / "samples" / f"{sample_id}.s2tf", sample.to_tensors())
    return {
        "id": sample_id,
        "flagged": flagged,
        "fg_fraction": float(sample.mask.mean()),
        "labeled_fraction": sample.labeled_fraction,
    }


def generate_synthetic_dataset(
    out_dir: Union[str, Path],
    n_train: int = 200,
    n_val: int = 50,
    n_test: int = 50,
    size: int = 64,
    seed: int = 0,
    max_label_fraction: float = 0.05,
    n_jobs: Optional[int] = None,
) -> DatasetManifest:
    if size < MIN_SIZE:
        raise ConfigError(f"image size {size} is below the minimum of {MIN_SIZE}")
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if any(n < 0 for n in counts.values()):
        raise ConfigError(f"sample counts must be nonnegative, got {counts}")

    root = Path(out_dir)
    os.makedirs(root / "samples", exist_ok=True)

    jobs, splits, index = [], {}, 0
    for split in SPLITS:
        splits[split] = []
        for k in range(counts[split]):
            sample_id = f"{split}-{k:04d}"
            splits[split].append(sample_id)
            jobs.append((index, sample_id))
            index += 1

    logger.info(f"Generating {index} synthetic samples ({size}x{size}, seed {seed}) into {root}")
    stats = Parallel(n_jobs=n_jobs or thread_budget())(
        delayed(_write_sample)(root, seed, i, size, sample_id, max_label_fraction) for i, sample_id in jobs
    )

    manifest = DatasetManifest(
        root=root,
        splits=splits,
        seed=seed,
        size=size,
        corruption={sample_id: [] for _, sample_id in jobs},
        flagged=[s["id"] for s in stats if s["flagged"]],
    )
    manifest.save()

    if stats:
        fg = np.array([s["fg_fraction"] for s in stats])
        labeled = np.array([s["labeled_fraction"] for s in stats])
        logger.info(
            f"Corpus stats: fg fraction {fg.mean():.3f} (min {fg.min():.3f}, max {fg.max():.3f}), "
            f"labeled fraction {labeled.mean():.4f} (max {labeled.max():.4f})"
        )
    return manifest


def corpus_statistics(manifest: DatasetManifest) -> dict:
    stats = {}
    for split in SPLITS:
        samples = manifest.load_split(split) if split in manifest.splits else []
        if not samples:
            stats[split] = {"count": 0}
            continue
        stats[split] = {
            "count": len(samples),
            "fg_fraction_mean": float(np.mean([s.mask.mean() for s in samples])),
            "labeled_fraction_mean": float(np.mean([s.labeled_fraction for s in samples])),
            "labeled_fraction_max": float(np.max([s.labeled_fraction for s in samples])),
        }
    return stats
