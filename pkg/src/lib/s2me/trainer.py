"""
Dual-branch scribble training loop.

Each iteration: draw and augment a batch, run both branches, fuse their
probability maps into pseudo labels, compose the hybrid loss, backpropagate
and take one SGD step per branch under the poly schedule. The spatial branch
is validated every `eval_every` iterations.
"""

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .config import TrainConfig
from .data import DatasetManifest, Sample, augment, tensor_file_read, tensor_file_write
from .errors import CheckpointError, ConfigError, MissingCheckpointError, TrainingDiverged
from .evaluation import mean_dsc, seed_run_dir
from .losses import LossWeights, hybrid_loss
from .models import BranchModel, build_model, save_branch
from .numerics import Parameter, softmax_channels
from .utils import read_json, write_json

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.s2tf"
TRAIN_LOG = "train_log.jsonl"
SUMMARY = "summary.json"
BRANCHES = ("spa", "spe")


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - iteration / max_iter) ** power"""
    if max_iter <= 0:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return float(lr0 * (1.0 - iteration / max_iter) ** power)


@dataclass
class SgdResult:
    params: List[np.ndarray]
    buffers: List[np.ndarray]
    accepted: bool


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    buffers: Optional[Sequence[np.ndarray]] = None,
) -> SgdResult:
    """v <- momentum * v + (grad + weight_decay * theta); theta <- theta - lr * v

    A step with any non-finite gradient is rejected and leaves params and
    buffers untouched.
    """
    if buffers is None:
        buffers = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, buffers):
        if not (np.shape(p) == np.shape(g) == np.shape(v)):
            raise ValueError(f"sgd_step shape mismatch: param {np.shape(p)}, grad {np.shape(g)}, buffer {np.shape(v)}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        logger.warning("Rejected SGD step: non-finite gradient")
        return SgdResult(list(params), list(buffers), accepted=False)

    new_params, new_buffers = [], []
    for p, g, v in zip(params, grads, buffers):
        v = momentum * v + (g + weight_decay * p)
        new_buffers.append(v)
        new_params.append(p - lr * v)
    return SgdResult(new_params, new_buffers, accepted=True)


class SGD:
    """Momentum SGD over a model's named parameters"""

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 1e-4, grad_clip: Optional[float] = None):
        self.params: Dict[str, Parameter] = dict(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.buffers: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.rejected_steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _gradients(self) -> List[np.ndarray]:
        grads = [p.gradient.astype(np.float32) for p in self.params.values()]
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
            if np.isfinite(norm) and norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        return grads

    def step(self, lr: float) -> bool:
        names = list(self.params)
        result = sgd_step(
            [self.params[n].data for n in names],
            self._gradients(),
            lr,
            self.momentum,
            self.weight_decay,
            [self.buffers[n] for n in names],
        )
        if not result.accepted:
            self.rejected_steps += 1
            return False
        for name, value, buffer in zip(names, result.params, result.buffers):
            self.params[name].data = value.astype(np.float32)
            self.buffers[name] = buffer.astype(np.float32)
        return True

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: buffer.copy() for name, buffer in self.buffers.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.buffers) - set(state))
        if missing:
            raise CheckpointError(f"optimizer state is missing buffers: {missing[:5]}")
        for name in self.buffers:
            self.buffers[name] = np.array(state[name], dtype=np.float32)


@dataclass
class TrainingState:
    """Everything needed to continue a run exactly where it stopped"""
    models: Dict[str, Dict[str, np.ndarray]]
    optimizers: Dict[str, Dict[str, np.ndarray]]
    iteration: int
    best_val_dsc: float
    best_iteration: int
    config_hash: str
    config: dict
    rng_state: dict
    best_models: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)


def _flatten(prefix: str, state: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{name}": value for name, value in state.items()}


def _unflatten(prefix: str, entries: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    head = prefix + "/"
    return {name[len(head):]: value for name, value in entries.items() if name.startswith(head)}


def checkpoint_save(path: Union[str, Path], state: TrainingState) -> None:
    """S2TF with reserved entry prefixes plus a JSON sidecar for the rest.

    Entries: model/<branch>/<name>, optim/<branch>/<name>, best/<branch>/<name>.
    """
    if path is None or str(path) in ("", "."):
        raise CheckpointError("checkpoint path is empty")
    path = Path(path)
    entries: Dict[str, np.ndarray] = {}
    for branch in BRANCHES:
        entries.update(_flatten(f"model/{branch}", state.models[branch]))
        entries.update(_flatten(f"optim/{branch}", state.optimizers[branch]))
        if branch in state.best_models:
            entries.update(_flatten(f"best/{branch}", state.best_models[branch]))
    tensor_file_write(path, entries)
    write_json(
        path.with_suffix(".json"),
        {
            "iteration": state.iteration,
            "best_val_dsc": state.best_val_dsc,
            "best_iteration": state.best_iteration,
            "config_hash": state.config_hash,
            "config": state.config,
            "rng_state": state.rng_state,
        },
    )


def checkpoint_load(
    path: Union[str, Path],
    config: Optional[TrainConfig] = None,
    force: bool = False,
) -> TrainingState:
    """Read a checkpoint; with `config` the stored config hash must match unless `force`"""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.exists() or not sidecar.exists():
        raise MissingCheckpointError(f"No checkpoint at {path}")
    meta = read_json(sidecar)
    if config is not None and meta["config_hash"] != config.config_hash():
        stored = meta.get("config", {})
        differing = sorted(
            k for k, v in config.to_dict().items() if k in stored and stored[k] != v
        )
        message = f"checkpoint {path} was written with a different config (differing keys: {differing})"
        if not force:
            raise CheckpointError(message)
        logger.warning(f"{message}; resuming anyway because force is set")

    entries = tensor_file_read(path)
    best = {b: _unflatten(f"best/{b}", entries) for b in BRANCHES}
    return TrainingState(
        models={b: _unflatten(f"model/{b}", entries) for b in BRANCHES},
        optimizers={b: _unflatten(f"optim/{b}", entries) for b in BRANCHES},
        iteration=int(meta["iteration"]),
        best_val_dsc=float(meta["best_val_dsc"]),
        best_iteration=int(meta["best_iteration"]),
        config_hash=meta["config_hash"],
        config=meta.get("config", {}),
        rng_state=meta["rng_state"],
        best_models={b: state for b, state in best.items() if state},
    )


@dataclass
class TrainResult:
    out_dir: Path
    iterations: int
    best_val_dsc: float
    best_iteration: int
    selected_val_dsc: float
    log: List[dict]


class Trainer:
    """Owns both branches, their optimizers and the training rng"""

    def __init__(self, config: TrainConfig, manifest: DatasetManifest, out_dir: Union[str, Path]):
        self.config = config
        self.manifest = manifest
        self.out_dir = Path(out_dir)
        self.logger = logging.getLogger(__name__)
        os.makedirs(self.out_dir, exist_ok=True)

        self.train_samples: List[Sample] = manifest.load_split("train")
        self.val_samples: List[Sample] = manifest.load_split("val")
        if not self.train_samples or not self.val_samples:
            raise ConfigError("training needs nonempty train and val splits")
        factor = 2 ** config.depth
        if manifest.size % factor:
            raise ConfigError(f"image size {manifest.size} is not divisible by 2^depth = {factor}")

        options = {"norm": config.norm, "upsample": config.upsample, "local_ratio": config.local_ratio}
        self.models: Dict[str, BranchModel] = {
            "spa": build_model(config.model_spa, config.base_width, config.depth, seed=[config.seed, 1], **options),
            "spe": build_model(config.model_spe, config.base_width, config.depth, seed=[config.seed, 2], **options),
        }
        self.optimizers: Dict[str, SGD] = {
            branch: SGD(model.named_parameters(), config.momentum, config.weight_decay, config.grad_clip)
            for branch, model in self.models.items()
        }
        self.rng = np.random.default_rng([config.seed, 0])
        self.iteration = 0
        self.best_val_dsc = -1.0
        self.best_iteration = -1
        self.best_models: Dict[str, Dict[str, np.ndarray]] = {}
        self.log: List[dict] = []

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / CHECKPOINT_NAME

    def state(self) -> TrainingState:
        return TrainingState(
            models={b: m.state_dict() for b, m in self.models.items()},
            optimizers={b: o.state_dict() for b, o in self.optimizers.items()},
            iteration=self.iteration,
            best_val_dsc=self.best_val_dsc,
            best_iteration=self.best_iteration,
            config_hash=self.config.config_hash(),
            config=self.config.to_dict(),
            rng_state=self.rng.bit_generator.state,
            best_models=self.best_models,
        )

    def save_checkpoint(self) -> None:
        checkpoint_save(self.checkpoint_path, self.state())

    def restore(self, state: TrainingState) -> None:
        try:
            for branch in BRANCHES:
                self.models[branch].load_state_dict(state.models[branch])
                self.optimizers[branch].load_state_dict(state.optimizers[branch])
        except ValueError as e:
            raise CheckpointError(f"checkpoint does not fit the configured models: {e}")
        self.rng.bit_generator.state = state.rng_state
        self.iteration = state.iteration
        self.best_val_dsc = state.best_val_dsc
        self.best_iteration = state.best_iteration
        self.best_models = state.best_models

        log_path = self.out_dir / TRAIN_LOG
        if log_path.exists():
            with open(log_path) as f:
                self.log = [r for r in map(json.loads, f) if r["iter"] < self.iteration]
            self._rewrite_log()
        self.logger.info(f"Resumed from {self.checkpoint_path} at iteration {self.iteration}")

    def resume(self, force: bool = False) -> bool:
        if not self.checkpoint_path.exists():
            return False
        self.restore(checkpoint_load(self.checkpoint_path, self.config, force=force))
        return True

    def _rewrite_log(self) -> None:
        with open(self.out_dir / TRAIN_LOG, "w") as f:
            for record in self.log:
                f.write(json.dumps(record) + "\n")

    def _append_log(self, record: dict) -> None:
        self.log.append(record)
        with open(self.out_dir / TRAIN_LOG, "a") as f:
            f.write(json.dumps(record) + "\n")

    def draw_batch(self):
        config = self.config
        n = len(self.train_samples)
        indices = self.rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
        batch = [
            augment(self.train_samples[i], self.rng, crop_max=config.crop_max, out_size=self.manifest.size, flip_p=config.flip_p)
            for i in indices
        ]
        images = np.stack([s.image for s in batch]).astype(np.float32)
        if config.supervision == "dense":
            targets = np.stack([s.mask for s in batch])
        else:
            targets = np.stack([s.scribble for s in batch])
        return images, targets

    def train_step(self) -> dict:
        config, t = self.config, self.iteration
        images, targets = self.draw_batch()
        for model in self.models.values():
            model.train()

        l_spa = self.models["spa"](images)
        l_spe = self.models["spe"](images)
        weights = LossWeights.ramped(t, config.ramp_iters, config.lambda_max, config.el_max)
        loss = hybrid_loss(
            l_spa,
            l_spe,
            softmax_channels(l_spa),
            softmax_channels(l_spe),
            targets,
            weights,
            terms=config.loss_terms,
            fusion=config.fusion,
            rng=self.rng,
        )
        total = loss.total.item()
        if not np.isfinite(total):
            raise TrainingDiverged(f"non-finite loss {total} at iteration {t}")

        for optimizer in self.optimizers.values():
            optimizer.zero_grad()
        loss.total.backward()
        lr = poly_lr(t, config.iterations, config.lr0, config.poly_power)
        for branch, optimizer in self.optimizers.items():
            if not optimizer.step(lr):
                self.logger.warning(f"Skipped update of branch {branch} at iteration {t}")

        record = {"iter": t, "lr": lr, "lambda": loss.lambda_mt}
        record.update(loss.as_log())
        return record

    def validate(self) -> float:
        return mean_dsc(self.models["spa"], self.val_samples, self.config.batch_size)

    def run(self) -> TrainResult:
        config = self.config
        start = time.time()
        self.logger.info(
            f"Training {config.model_spa}/{config.model_spe} for {config.iterations} iterations "
            f"(fusion={config.fusion}, terms={'+'.join(config.loss_terms)}, supervision={config.supervision}, seed={config.seed})"
        )
        if self.iteration == 0:
            self.log = []
            self._rewrite_log()
            self.save_checkpoint()
        progress = tqdm(range(self.iteration, config.iterations), desc=f"seed {config.seed}", leave=False, disable=None)
        for _ in progress:
            try:
                record = self.train_step()
            except TrainingDiverged:
                self.logger.error(f"Training diverged at iteration {self.iteration}; last good checkpoint kept at {self.checkpoint_path}")
                raise
            self.iteration += 1

            if self.iteration % config.eval_every == 0 or self.iteration == config.iterations:
                val_dsc = self.validate()
                record["val_dsc"] = val_dsc
                if val_dsc > self.best_val_dsc:
                    self.best_val_dsc = val_dsc
                    self.best_iteration = self.iteration
                    self.best_models = {b: m.state_dict() for b, m in self.models.items()}
                self.logger.info(f"iter {self.iteration}: loss={record['loss_total']:.4f} val_dsc={val_dsc:.4f} (best {self.best_val_dsc:.4f})")
                self._append_log(record)
                self.save_checkpoint()
            else:
                self._append_log(record)
            progress.set_postfix(loss=f"{record['loss_total']:.4f}")

        return self.finish(time.time() - start)

    def finish(self, elapsed: float = 0.0) -> TrainResult:
        """Write the selected branch weights and the run summary"""
        if self.config.selection == "best" and self.best_models:
            for branch, model in self.models.items():
                model.load_state_dict(self.best_models[branch])
            selected = self.best_val_dsc
        else:
            selected = self.validate()
        save_branch(self.out_dir / "spatial.s2tf", self.models["spa"])
        save_branch(self.out_dir / "spectral.s2tf", self.models["spe"])

        scrib = [r["loss_scrib"] for r in self.log]
        tail = max(1, len(scrib) // 10)
        summary = {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "iterations": self.iteration,
            "best_val_dsc": self.best_val_dsc,
            "best_iteration": self.best_iteration,
            "selection": self.config.selection,
            "selected_val_dsc": selected,
            "loss_scrib_first": float(np.mean(scrib[:tail])) if scrib else None,
            "loss_scrib_last": float(np.mean(scrib[-tail:])) if scrib else None,
            "rejected_steps": {b: o.rejected_steps for b, o in self.optimizers.items()},
            "parameters": {b: m.parameter_count() for b, m in self.models.items()},
            "elapsed_seconds": round(elapsed, 2),
        }
        write_json(self.out_dir / SUMMARY, summary)
        self.logger.info(f"Finished: selected val DSC {selected:.4f} ({self.config.selection}), outputs in {self.out_dir}")
        return TrainResult(
            out_dir=self.out_dir,
            iterations=self.iteration,
            best_val_dsc=self.best_val_dsc,
            best_iteration=self.best_iteration,
            selected_val_dsc=selected,
            log=list(self.log),
        )


def train(
    config: TrainConfig,
    dataset: DatasetManifest,
    out_dir: Union[str, Path],
    resume: bool = False,
    force: bool = False,
) -> TrainResult:
    trainer = Trainer(config, dataset, out_dir)
    if resume:
        trainer.resume(force=force)
    return trainer.run()


def train_seeds(
    config: TrainConfig,
    dataset: DatasetManifest,
    out_dir: Union[str, Path],
    seeds: Sequence[int],
    resume: bool = False,
    force: bool = False,
) -> Dict[int, Union[TrainResult, dict]]:
    """Run seeds one after another under <out_dir>/seed-<s>; a failing seed is recorded, not raised"""
    results: Dict[int, Union[TrainResult, dict]] = {}
    for seed in seeds:
        try:
            results[seed] = train(config.with_seed(seed), dataset, seed_run_dir(out_dir, seed), resume, force)
        except Exception as e:
            logger.error(f"Seed {seed} failed: {e}")
            results[seed] = {"error": str(e)}
    return results
