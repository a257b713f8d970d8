"""
Stage-1 training: Skeleton2Mesh on ground-truth (skeleton, mesh) pairs.

Adam, minibatch 32, lr = base · 0.5^floor(epoch / halve_every), seeded
shuffling, fixed 5% validation split. A non-finite loss aborts the run with
the epoch and batch that produced it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from numeric_core import AdamState, NonFiniteGradientError, adam_step
from run_config import TrainConfig
from skeleton2mesh import Skeleton2MeshModel, stage1_loss, stage1_loss_and_grads

train_logger = logging.getLogger("mlphand.train")
error_logger = logging.getLogger("mlphand.errors")

EVAL_CHUNK = 256


class TrainingAbortedError(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: Optional[int] = None):
        where = f"epoch {epoch}" + (f", batch {batch}" if batch is not None else "")
        super().__init__(f"Training aborted at {where}: {message}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainingCurve:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    batch_loss: List[float] = field(default_factory=list)

    def to_rows(self) -> List[Dict[str, float]]:
        return [
            {"epoch": epoch, "lr": lr, "train_loss": train, "val_loss": val}
            for epoch, (lr, train, val) in enumerate(zip(self.lr, self.train_loss, self.val_loss))
        ]


def stage1_lr(epoch: int, base: float = 1e-4, halve_every: int = 50) -> float:
    return base * 0.5 ** (epoch // halve_every)


def validation_split(count: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """(train indices, validation indices); at least one of each when count ≥ 2."""
    if count < 1:
        raise ValueError("dataset is empty")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A11])).permutation(count)
    n_val = int(round(count * fraction))
    if count >= 2:
        n_val = min(max(n_val, 1), count - 1)
    else:
        n_val = 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def moving_average(values, window: int = 10) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def evaluate_stage1(model: Skeleton2MeshModel, X: np.ndarray, V: np.ndarray) -> float:
    """Mean patch-vertex distance over a whole set, evaluated in chunks."""
    if len(X) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(X), EVAL_CHUNK):
        stop = min(start + EVAL_CHUNK, len(X))
        total += stage1_loss(model, X[start:stop], V[start:stop]) * (stop - start)
    return total / len(X)


def train_stage1(
    model: Skeleton2MeshModel,
    X: np.ndarray,
    V: np.ndarray,
    config: Optional[TrainConfig] = None,
    *,
    seed: int = 0,
    epochs: Optional[int] = None,
) -> Tuple[Skeleton2MeshModel, TrainingCurve]:
    """Train `model` in place on (B, 21, 3) skeletons and (B, V, 3) meshes."""
    config = config or TrainConfig()
    epochs = config.stage1_epochs if epochs is None else epochs
    X = np.asarray(X, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if len(X) == 0 or len(X) != len(V):
        raise ValueError("stage-1 training needs a nonempty set of matching skeleton/mesh pairs")

    train_idx, val_idx = validation_split(len(X), config.validation_fraction, seed)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    params = model.parameters()
    state = AdamState(lr=config.stage1_lr)
    curve = TrainingCurve()

    train_logger.info(
        f"Stage 1: {len(train_idx)} train / {len(val_idx)} val pairs, {epochs} epochs, "
        f"batch {config.batch_size}, depth {model.depth}, gsd={model.use_gsd}"
    )
    epoch_bar = tqdm(range(epochs), desc="stage1", unit="epoch", disable=not config.progress)
    for epoch in epoch_bar:
        state.lr = stage1_lr(epoch, config.stage1_lr, config.stage1_halve_every)
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        losses = []
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start:start + config.batch_size]
            loss, grads = stage1_loss_and_grads(model, X[batch], V[batch])
            if not np.isfinite(loss):
                error_logger.error(f"Stage 1 non-finite loss at epoch {epoch}, batch {batch_index}")
                raise TrainingAbortedError("non-finite loss", epoch, batch_index)
            try:
                adam_step(params, grads, state)
            except NonFiniteGradientError as exc:
                error_logger.error(f"Stage 1 {exc} at epoch {epoch}, batch {batch_index}")
                raise TrainingAbortedError(str(exc), epoch, batch_index) from exc
            losses.append(loss)
            curve.batch_loss.append(loss)

        train_loss = float(np.mean(losses))
        val_loss = evaluate_stage1(model, X[val_idx], V[val_idx])
        curve.train_loss.append(train_loss)
        curve.val_loss.append(val_loss)
        curve.lr.append(state.lr)
        epoch_bar.set_postfix(train=f"{train_loss:.3f}", val=f"{val_loss:.3f}")
        train_logger.info(f"Stage 1 epoch {epoch}: lr={state.lr:.3g} train={train_loss:.4f} val={val_loss:.4f}")
    return model, curve
