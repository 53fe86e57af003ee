"""Training loop: PK batch sampling, the three optimizers, step-decay LR.

Batches hold P identities x K instances so the batch-hard triplet loss always
finds positives. An epoch is ceil(N / (P*K)) batches. Everything that touches
randomness derives from the config seed through named seed sequences, so a
(config, seed) pair reproduces the run bit for bit, including when batch
augmentation is prefetched on worker threads.

The CSV training log holds the deterministic columns (epoch, mean_loss, lr);
wall-clock timings go to a JSON sidecar so logs stay byte-comparable.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import AugConfig, augment
from .errors import ConfigError, NumericError
from .losses import LossConfig, total_loss
from .model import EpanModel

OPTIMIZER_KINDS = ("sgd_momentum", "adam", "rmsprop")


@dataclass
class OptimConfig:
    kind: str = "adam"
    learning_rate: float = 3.5e-4
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    rms_decay: float = 0.9
    eps: float = 1e-8
    step_size: int = 40
    gamma: float = 0.1
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_p: int = 4
    batch_k: int = 4
    seed: int = 0
    workers: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only
    # warp-regression parameters train best well below the trunk rate;
    # a hot localization head destabilizes sampling early in training
    grid_lr_scale: float = 0.1

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"optimizer kind must be one of {OPTIMIZER_KINDS}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must be in (0, 1]")
        if self.step_size < 1:
            raise ConfigError("step_size must be a positive epoch count")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_p < 2 or self.batch_k < 1:
            raise ConfigError("PK batch needs P >= 2 ids and K >= 1 instances")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.grid_lr_scale <= 0:
            raise ConfigError("grid_lr_scale must be > 0")


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    lr: float
    wall_seconds: float


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    """Step decay: learning_rate * gamma ** floor(epoch / step_size)."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return cfg.learning_rate * cfg.gamma ** (epoch // cfg.step_size)


class Optimizer:
    """SGD-with-momentum / Adam / RMSProp over named parameter tensors.

    Weight decay enters as an L2 term added to the gradient for all kinds.
    A non-finite gradient aborts the step and names the offending parameter.
    """

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.slots: dict[str, dict[str, np.ndarray]] = {}
        self.t = 0

    def _slot(self, name: str, like: np.ndarray, *keys: str) -> dict[str, np.ndarray]:
        entry = self.slots.setdefault(name, {})
        for key in keys:
            if key not in entry:
                entry[key] = np.zeros_like(like)
        return entry

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        cfg = self.cfg
        base_lr = lr
        self.t += 1
        for name, p in params.items():
            if p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            lr = base_lr * cfg.grid_lr_scale if name.startswith("grid.") else base_lr
            g = p.grad
            if cfg.weight_decay and name.endswith(".w"):
                # decay weights only: shrinking biases, norm affines, or the
                # identity-initialized warp head distorts them toward zero
                g = g + cfg.weight_decay * p.data
            if cfg.kind == "sgd_momentum":
                slot = self._slot(name, p.data, "buf")
                slot["buf"] = cfg.momentum * slot["buf"] + g
                p.data = p.data - lr * slot["buf"]
            elif cfg.kind == "adam":
                b1, b2 = cfg.betas
                slot = self._slot(name, p.data, "m", "v")
                slot["m"] = b1 * slot["m"] + (1 - b1) * g
                slot["v"] = b2 * slot["v"] + (1 - b2) * g * g
                mh = slot["m"] / (1 - b1 ** self.t)
                vh = slot["v"] / (1 - b2 ** self.t)
                p.data = p.data - lr * mh / (np.sqrt(vh) + cfg.eps)
            else:  # rmsprop
                slot = self._slot(name, p.data, "acc")
                slot["acc"] = cfg.rms_decay * slot["acc"] + (1 - cfg.rms_decay) * g * g
                p.data = p.data - lr * g / (np.sqrt(slot["acc"]) + cfg.eps)


def _image_of(sample) -> np.ndarray:
    if hasattr(sample, "image"):
        return sample.image
    return sample[0]


def _pid_of(sample) -> int:
    if hasattr(sample, "pid"):
        return sample.pid
    return sample[1]


def train(
    model: EpanModel,
    samples,
    loss_cfg: LossConfig,
    optim_cfg: OptimConfig,
    aug_cfg: AugConfig | None = None,
    checkpoint_dir=None,
) -> tuple[EpanModel, list[EpochLog]]:
    """Optimize ``model`` on ``samples`` (objects with .image/.pid or tuples).

    Returns the model and the per-epoch log. ``epochs == 0`` returns the
    initial state untouched.
    """
    samples = list(samples)
    p_ids, k_inst = optim_cfg.batch_p, optim_cfg.batch_k
    by_pid: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        by_pid.setdefault(int(_pid_of(s)), []).append(idx)
    pids = sorted(by_pid)
    if len(samples) < p_ids * k_inst or len(pids) < p_ids:
        raise ConfigError(
            f"dataset too small for PK sampling: {len(samples)} samples / "
            f"{len(pids)} ids vs P={p_ids}, K={k_inst}"
        )
    class_of = {pid: i for i, pid in enumerate(pids)}
    if model.config.num_classes != len(pids):
        raise ConfigError(
            f"model has {model.config.num_classes} classes but the dataset "
            f"has {len(pids)} identities"
        )

    if aug_cfg is not None and aug_cfg.enabled and aug_cfg.erase_fill is None:
        aug_cfg.erase_fill = _dataset_mean(samples)

    logs: list[EpochLog] = []
    if optim_cfg.epochs == 0:
        return model, logs

    optimizer = Optimizer(optim_cfg)
    dtype = model.config.dtype
    iters = -(-len(samples) // (p_ids * k_inst))
    batch_rng = np.random.default_rng(np.random.SeedSequence([optim_cfg.seed, 1]))

    def plan_batch():
        chosen = batch_rng.choice(pids, size=p_ids, replace=False)
        idxs = []
        for pid in chosen:
            pool = by_pid[pid]
            replace = len(pool) < k_inst
            idxs.extend(batch_rng.choice(pool, size=k_inst, replace=replace))
        return [int(i) for i in idxs]

    def build_batch(epoch, it, idxs):
        rng = np.random.default_rng(np.random.SeedSequence(
            [optim_cfg.seed, 2, epoch, it]))
        images = []
        for i in idxs:
            img = np.asarray(_image_of(samples[i]), dtype=np.float64)
            if aug_cfg is not None:
                img = augment(img, aug_cfg, rng)
            images.append(img)
        x = np.stack(images).astype(dtype)
        y = np.array([class_of[int(_pid_of(samples[i]))] for i in idxs])
        return x, y

    pool = ThreadPoolExecutor(optim_cfg.workers) if optim_cfg.workers > 1 else None
    try:
        for epoch in range(optim_cfg.epochs):
            started = time.perf_counter()
            lr = lr_at(epoch, optim_cfg)
            plans = [(epoch, it, plan_batch()) for it in range(iters)]
            if pool is not None:
                batches = pool.map(lambda args: build_batch(*args), plans)
            else:
                batches = (build_batch(*args) for args in plans)
            epoch_losses = []
            model.train()
            for x, y in batches:
                out = model.forward_train(Tensor(x))
                loss = total_loss(out.base_logits, out.align_logits,
                                  out.fused_embed, y, loss_cfg)
                model.zero_grads()
                loss.backward()
                optimizer.step(model.parameters(), lr)
                epoch_losses.append(loss.item())
            logs.append(EpochLog(
                epoch=epoch,
                mean_loss=float(np.mean(epoch_losses)),
                lr=lr,
                wall_seconds=time.perf_counter() - started,
            ))
            every = optim_cfg.checkpoint_every
            if checkpoint_dir is not None and every and (epoch + 1) % every == 0:
                model.save(Path(checkpoint_dir) / f"checkpoint_ep{epoch + 1}.eptn")
    finally:
        if pool is not None:
            pool.shutdown()
    return model, logs


def _dataset_mean(samples) -> tuple[float, float, float]:
    total = np.zeros(3)
    for s in samples:
        total += np.asarray(_image_of(s)).mean(axis=(1, 2))
    mean = total / len(samples)
    return (float(mean[0]), float(mean[1]), float(mean[2]))


def write_train_log(path, logs: list[EpochLog]) -> None:
    """Deterministic training-log CSV: epoch, mean_loss, lr."""
    lines = ["epoch,mean_loss,lr\n"]
    lines += [f"{entry.epoch},{entry.mean_loss!r},{entry.lr!r}\n" for entry in logs]
    Path(path).write_text("".join(lines))


def write_run_meta(path, logs: list[EpochLog], extra: dict | None = None) -> None:
    """Timing sidecar (not determinism-checked): per-epoch wall seconds."""
    meta = {
        "wall_seconds": [entry.wall_seconds for entry in logs],
        "total_wall_seconds": float(sum(entry.wall_seconds for entry in logs)),
    }
    if extra:
        meta.update(extra)
    Path(path).write_text(json.dumps(meta, indent=2) + "\n")
