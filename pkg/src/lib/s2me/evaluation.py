"""
Segmentation metrics and dataset-level aggregation across seeds.

Predictions are the argmax of a branch's softmax with no post-processing.
Empty-set conventions:
    pred and gt both empty -> dsc = iou = precision = 1, hd = 0
    exactly one empty      -> dsc = iou = precision = 0, hd = image diagonal
"""

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial.distance import cdist
from sklearn.metrics import confusion_matrix

from .data import DatasetManifest, Sample, corrupt, parse_corruption
from .errors import ConfigError, MissingCheckpointError, ShapeError
from .models import BranchModel, Module, load_branch
from .numerics import no_grad, softmax_channels
from .utils import write_json

logger = logging.getLogger(__name__)

METRICS = ("dsc", "iou", "precision", "hd")
BRANCH_FILES = {"spatial": "spatial.s2tf", "spectral": "spectral.s2tf"}
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class MetricsRecord:
    dsc: float
    iou: float
    precision: float
    hd: float
    sample_id: str = ""

    def validate(self) -> None:
        for name in ("dsc", "iou", "precision"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} = {value} lies outside [0, 1]")
        if self.hd < 0:
            raise ValueError(f"hd = {self.hd} is negative")


def _binary_pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction of shape {pred.shape} does not match ground truth of shape {gt.shape}")
    return pred, gt


def confusion_metrics(pred, gt) -> Tuple[float, float, float]:
    """(dsc, iou, precision) from the confusion counts of two binary maps"""
    pred, gt = _binary_pair(pred, gt)
    if not pred.any() and not gt.any():
        return 1.0, 1.0, 1.0
    if not pred.any() or not gt.any():
        return 0.0, 0.0, 0.0
    _, fp, fn, tp = confusion_matrix(gt.ravel().astype(np.uint8), pred.ravel().astype(np.uint8), labels=[0, 1]).ravel()
    dsc = 2 * tp / (2 * tp + fp + fn)
    iou = tp / (tp + fp + fn)
    precision = tp / (tp + fp)
    return float(dsc), float(iou), float(precision)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background; outside the image counts as background"""
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=0)


def hausdorff(pred, gt, percentile: float = 95.0) -> float:
    """Symmetric percentile Hausdorff distance between boundary sets, in pixels.

    Each directed distance takes the given percentile of nearest-boundary
    distances; the result is the larger of the two.
    """
    if not 0.0 < percentile <= 100.0:
        raise ConfigError(f"percentile must lie in (0, 100], got {percentile}")
    pred, gt = _binary_pair(pred, gt)
    if not pred.any() and not gt.any():
        return 0.0
    if not pred.any() or not gt.any():
        return float(np.hypot(*pred.shape))

    a = np.argwhere(boundary(pred))
    b = np.argwhere(boundary(gt))
    distances = cdist(a, b)
    forward = np.percentile(distances.min(axis=1), percentile)
    backward = np.percentile(distances.min(axis=0), percentile)
    return float(max(forward, backward))


def score(pred, gt, sample_id: str = "", percentile: float = 95.0) -> MetricsRecord:
    dsc, iou, prec = confusion_metrics(pred, gt)
    return MetricsRecord(dsc=dsc, iou=iou, precision=prec, hd=hausdorff(pred, gt, percentile), sample_id=sample_id)


def predict_probabilities(model: Module, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Softmax maps N x 2 x H x W in eval mode; the model's mode is restored afterwards"""
    was_training = model.training
    model.eval()
    try:
        outputs = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                logits = model(images[start:start + batch_size])
                outputs.append(softmax_channels(logits).numpy())
        return np.concatenate(outputs, axis=0) if outputs else np.zeros((0, 2) + images.shape[2:], np.float32)
    finally:
        model.train(was_training)


def predict(model: Module, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax labels N x H x W; ties go to background"""
    return predict_probabilities(model, images, batch_size).argmax(axis=1)


def stack_samples(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks


def evaluate_model(
    model: Module,
    samples: Sequence[Sample],
    batch_size: int = 8,
    percentile: float = 95.0,
) -> pd.DataFrame:
    """Per-sample metrics in sample order"""
    if not samples:
        return pd.DataFrame(columns=["sample_id", *METRICS])
    images, masks = stack_samples(samples)
    preds = predict(model, images, batch_size)
    records = [asdict(score(p, g, s.sample_id, percentile)) for p, g, s in zip(preds, masks, samples)]
    return pd.DataFrame.from_records(records, columns=["sample_id", *METRICS])


def mean_dsc(model: Module, samples: Sequence[Sample], batch_size: int = 8) -> float:
    images, masks = stack_samples(samples)
    preds = predict(model, images, batch_size)
    return float(np.mean([confusion_metrics(p, g)[0] for p, g in zip(preds, masks)]))


def corrupted_samples(samples: Sequence[Sample], kind: str, severity: int, seed: int) -> List[Sample]:
    return [
        corrupt(sample, kind, severity, np.random.default_rng([seed, index, severity]))
        for index, sample in enumerate(samples)
    ]


@dataclass
class MetricsTable:
    """Per-sample, per-seed and across-seed views of one evaluation"""
    per_sample: pd.DataFrame
    per_seed: pd.DataFrame
    aggregate: pd.DataFrame = field(default=None)

    def __post_init__(self):
        if self.aggregate is None:
            self.aggregate = aggregate_seeds(self.per_seed)

    def save(self, out_dir: Union[str, Path], stem: str = "metrics") -> None:
        os.makedirs(out_dir, exist_ok=True)
        self.per_seed.to_csv(Path(out_dir) / f"{stem}.csv", index=False)
        self.per_sample.to_csv(Path(out_dir) / f"{stem}_per_sample.csv", index=False)
        write_json(
            Path(out_dir) / f"{stem}.json",
            {
                "per_seed": self.per_seed.to_dict(orient="records"),
                "aggregate": self.aggregate.to_dict(orient="records"),
            },
        )


def aggregate_seeds(per_seed: pd.DataFrame) -> pd.DataFrame:
    """Mean and population stddev across seeds per (method, dataset)"""
    if per_seed.empty:
        return pd.DataFrame(columns=["method", "dataset", "seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
    grouped = per_seed.groupby(["method", "dataset"], sort=False)
    rows = []
    for (method, dataset), group in grouped:
        row = {"method": method, "dataset": dataset, "seeds": len(group)}
        for metric in METRICS:
            row[f"{metric}_mean"] = float(group[metric].mean())
            row[f"{metric}_std"] = float(group[metric].std(ddof=0))
        rows.append(row)
    return pd.DataFrame(rows)


def evaluate_seeds(
    models: Mapping[int, Module],
    samples: Sequence[Sample],
    method: str = "s2me",
    dataset: str = "test",
    batch_size: int = 8,
    percentile: float = 95.0,
) -> MetricsTable:
    per_sample, per_seed = [], []
    for seed, model in models.items():
        frame = evaluate_model(model, samples, batch_size, percentile)
        frame.insert(0, "seed", seed)
        frame.insert(0, "dataset", dataset)
        frame.insert(0, "method", method)
        per_sample.append(frame)
        row = {"method": method, "dataset": dataset, "seed": seed}
        row.update({m: float(frame[m].mean()) for m in METRICS})
        per_seed.append(row)
    return MetricsTable(
        per_sample=pd.concat(per_sample, ignore_index=True) if per_sample else pd.DataFrame(),
        per_seed=pd.DataFrame(per_seed, columns=["method", "dataset", "seed", *METRICS]),
    )


def seed_run_dir(run_dir: Union[str, Path], seed: int) -> Path:
    return Path(run_dir) / f"seed-{seed}"


def load_seed_model(run_dir: Union[str, Path], seed: int, branch: str = "spatial") -> BranchModel:
    if branch not in BRANCH_FILES:
        raise ValueError(f"Unknown branch: {branch} (expected one of {sorted(BRANCH_FILES)})")
    path = seed_run_dir(run_dir, seed) / BRANCH_FILES[branch]
    if not path.exists():
        raise MissingCheckpointError(f"No {branch} checkpoint for seed {seed}: {path}")
    return load_branch(path)


def evaluate_dataset(
    run_dir: Union[str, Path],
    manifest: DatasetManifest,
    split: str = "test",
    seeds: Sequence[int] = (0,),
    method: str = "s2me",
    branch: str = "spatial",
    corruptions: Sequence[str] = (),
    batch_size: int = 8,
    percentile: float = 95.0,
) -> MetricsTable:
    """Score each seed's checkpoint on a split, then on every requested corruption of it"""
    models = {seed: load_seed_model(run_dir, seed, branch) for seed in seeds}
    samples = manifest.load_split(split)
    logger.info(f"Evaluating {method} ({branch} branch) on {len(samples)} {split} samples for seeds {list(seeds)}")

    tables = [evaluate_seeds(models, samples, method, split, batch_size, percentile)]
    for tag in corruptions:
        kind, severity = parse_corruption(tag)
        shifted = corrupted_samples(samples, kind, severity, manifest.seed)
        tables.append(evaluate_seeds(models, shifted, method, f"{split}+{kind}{severity}", batch_size, percentile))

    table = MetricsTable(
        per_sample=pd.concat([t.per_sample for t in tables], ignore_index=True),
        per_seed=pd.concat([t.per_seed for t in tables], ignore_index=True),
    )
    for row in table.aggregate.itertuples():
        logger.info(
            f"{row.method} {row.dataset}: DSC={row.dsc_mean:.4f}±{row.dsc_std:.4f} "
            f"IoU={row.iou_mean:.4f}±{row.iou_std:.4f} HD={row.hd_mean:.2f}±{row.hd_std:.2f}"
        )
    return table
