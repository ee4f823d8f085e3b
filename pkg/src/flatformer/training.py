"""Training loop: MSE objective, Adam, early stopping, gradient checking."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .data import Windows
from .model import Flatformer
from .seeding import numpy_rng, seed_torch

# hyperparameter grids used across the reference experiments
LR_GRID = (1e-3, 5e-4, 1e-4)
BATCH_SIZE_GRID = (16, 32, 64, 128)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    lr_schedule: str = "none"  # "none" or "cosine" (decay to lr/100 over max_epochs)
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.lr_schedule not in ("none", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        if self.lr_schedule == "none" or self.max_epochs <= 1:
            return self.lr
        frac = (epoch - 1) / (self.max_epochs - 1)
        floor = 0.01 * self.lr
        return floor + 0.5 * (self.lr - floor) * (1 + math.cos(math.pi * frac))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time_s: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        return self.epochs[self.best_epoch].val_loss

    def to_jsonl_rows(self) -> list[dict]:
        return [
            {
                "epoch": e.epoch,
                "train_loss": e.train_loss,
                "val_loss": e.val_loss,
                "wall_time_s": e.wall_time_s,
            }
            for e in self.epochs
        ]


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference over every element of [B, N, S] (batch mean of
    the per-sample 1/(N*S) sum)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def _batches(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _to_tensor(a: np.ndarray, dtype: torch.dtype) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


@torch.no_grad()
def validation_loss(model: Flatformer, windows: Windows, batch_size: int) -> float:
    """Mean MSE over all validation windows, eval mode, parameters untouched."""
    was_training = model.training
    model.eval()
    dtype = model.config.torch_dtype
    total, count = 0.0, 0
    for idx in _batches(len(windows), batch_size, rng=None):
        xs, ys = windows.gather(idx)
        pred, _ = model(_to_tensor(xs, dtype))
        total += float(((pred - _to_tensor(ys, dtype)) ** 2).sum())
        count += ys.size
    if was_training:
        model.train()
    return total / count


def train(
    model: Flatformer,
    train_windows: Windows,
    val_windows: Windows,
    cfg: TrainConfig,
    log: bool = False,
) -> TrainHistory:
    """Adam on shuffled mini-batches with early stopping on validation MSE.

    The model is left holding the best-validation parameters. All randomness
    (shuffle order, dropout) derives from ``cfg.seed``.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("train and val window sets must be non-empty")
    dtype = model.config.torch_dtype
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.lr,
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    shuffle_rng = numpy_rng(cfg.seed, "shuffle") if cfg.shuffle else None
    seed_torch(cfg.seed, "dropout")

    history = TrainHistory()
    best_val = float("inf")
    best_state: dict | None = None
    since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        for group in optimizer.param_groups:
            group["lr"] = cfg.lr_at(epoch)
        epoch_total, epoch_count = 0.0, 0
        for b, idx in enumerate(_batches(len(train_windows), cfg.batch_size, shuffle_rng)):
            xs, ys = train_windows.gather(idx)
            pred, _ = model(_to_tensor(xs, dtype))
            loss = mse_loss(pred, _to_tensor(ys, dtype))
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {b}")
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            epoch_total += float(loss.detach()) * len(idx)
            epoch_count += len(idx)

        val = validation_loss(model, val_windows, cfg.batch_size)
        history.epochs.append(
            EpochStats(epoch, epoch_total / epoch_count, val, time.perf_counter() - t0)
        )
        if log:
            print(f"epoch {epoch:3d}  train {epoch_total / epoch_count:.6f}  val {val:.6f}")

        if val < best_val:
            best_val = val
            history.best_epoch = epoch - 1
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]


def grad_check(
    model: Flatformer,
    x: Tensor,
    y: Tensor,
    step: float = 1e-5,
) -> GradCheckResult:
    """Central finite differences vs autograd for every parameter element.

    Runs in train mode (batch statistics, the loss actually optimized) with
    dropout expected to be 0 so the loss is deterministic. Relative error is
    |analytic - fd| / max(|analytic| + |fd|, 1e-6), so exact zero gradients
    compare clean. Requires a float64 model.
    """
    if model.config.torch_dtype != torch.float64:
        raise ValueError("grad_check requires a float64 model")
    if model.config.dropout != 0.0:
        raise ValueError("grad_check requires dropout=0 for a deterministic loss")
    model.train()

    def loss_value() -> float:
        pred, _ = model(x)
        return float(mse_loss(pred, y))

    pred, _ = model(x)
    loss = mse_loss(pred, y)
    model.zero_grad()
    loss.backward()

    per_param: dict[str, float] = {}
    worst, worst_name = 0.0, ""
    with torch.no_grad():
        for name, param in model.named_parameters():
            analytic = (
                param.grad.detach().clone().reshape(-1)
                if param.grad is not None
                else torch.zeros(param.numel(), dtype=param.dtype)
            )
            flat = param.reshape(-1)
            worst_here = 0.0
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                up = loss_value()
                flat[i] = orig - step
                down = loss_value()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                a = float(analytic[i])
                rel = abs(a - fd) / max(abs(a) + abs(fd), 1e-6)
                worst_here = max(worst_here, rel)
            per_param[name] = worst_here
            if worst_here > worst:
                worst, worst_name = worst_here, name
    model.eval()
    return GradCheckResult(max_rel_error=worst, worst_param=worst_name, per_param=per_param)
