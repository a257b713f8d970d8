"""
Stage-2 training: the feature infuser on top of a locked stage-1 model.

Each synthetic frame is reduced once to what the infuser consumes (X̄, per-view
2D readouts, gathered bone features, ground-truth patches); full feature maps
are never kept in memory. Adam runs over infuser tensors only, with
lr = base before `decay_epoch` and base · decay_factor from then on. The
locked model is snapshotted up front and verified bit-identical at the end.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from camera_geometry import CameraRig, TriangulationDegenerateError
from hand_model import decompose_mesh, recover_mesh
from hand_synthesis import SyntheticSample
from mgfp_fusion import (
    LOSS_TERMS,
    MGFPModel,
    Stage2Prediction,
    Stage2Target,
    gather_bone_features,
    mfi_backward,
    mfi_forward_batch,
    stage2_loss,
    triangulate_views,
)
from numeric_core import AdamState, NonFiniteGradientError, adam_step
from run_config import LossWeights, SynthesisConfig, TrainConfig
from runtime_paths import get_thread_count
from s2m_training import TrainingAbortedError, validation_split
from skeleton2mesh import s2m_forward_batch

train_logger = logging.getLogger("mlphand.train")
error_logger = logging.getLogger("mlphand.errors")

EVAL_CHUNK = 64


class LockedWeightDriftError(RuntimeError):
    pass


@dataclass
class Stage2Example:
    index: int
    X_bar: np.ndarray
    keypoints_2d: np.ndarray
    bone_features: np.ndarray
    X_gt: np.ndarray
    V_gt: np.ndarray
    gt_patches: np.ndarray
    rig: CameraRig


@dataclass
class Stage2Curve:
    train_loss: List[float] = field(default_factory=list)
    val_mpvpe: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    terms: List[Dict[str, float]] = field(default_factory=list)
    frozen_val_mpvpe: float = float("nan")
    initial_val_mpvpe: float = float("nan")


def stage2_lr(epoch: int, base: float = 1e-4, decay_epoch: int = 70, decay_factor: float = 0.1) -> float:
    return base if epoch < decay_epoch else base * decay_factor


def prepare_example(
    sample: SyntheticSample,
    model: MGFPModel,
    synthesis: Optional[SynthesisConfig] = None,
) -> Stage2Example:
    synthesis = synthesis or SynthesisConfig()
    X_bar, keypoints = triangulate_views(
        sample.rig,
        sample.heatmaps,
        temperature=synthesis.soft_argmax_temperature,
        readout=synthesis.readout,
    )
    features = gather_bone_features(sample.feature_maps, X_bar, sample.rig, model.locked.tree)
    sample.drop_feature_cache()
    return Stage2Example(
        index=sample.index,
        X_bar=X_bar,
        keypoints_2d=keypoints,
        bone_features=features.bone,
        X_gt=sample.skeleton,
        V_gt=sample.mesh,
        gt_patches=decompose_mesh(model.locked.spec, sample.mesh),
        rig=sample.rig,
    )


def prepare_stage2_examples(
    samples: Sequence[SyntheticSample],
    model: MGFPModel,
    synthesis: Optional[SynthesisConfig] = None,
    *,
    threads: Optional[int] = None,
) -> List[Stage2Example]:
    """Triangulate and gather every rendered sample; degenerate frames are skipped."""
    threads = threads or get_thread_count()

    def build(sample: SyntheticSample) -> Optional[Stage2Example]:
        try:
            return prepare_example(sample, model, synthesis)
        except TriangulationDegenerateError as exc:
            error_logger.warning(f"Skipping sample {sample.index}: {exc}")
            return None

    if threads <= 1:
        prepared = [build(sample) for sample in samples]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            prepared = list(pool.map(build, samples))
    examples = [example for example in prepared if example is not None]
    train_logger.info(f"Prepared {len(examples)} of {len(samples)} samples for stage 2")
    return examples


def _stack(examples: Sequence[Stage2Example]) -> Tuple[np.ndarray, np.ndarray]:
    return (
        np.stack([example.X_bar for example in examples]),
        np.stack([example.bone_features for example in examples]),
    )


def _mean_vertex_distance(mesh: np.ndarray, V_gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(mesh - V_gt, axis=-1).mean(axis=-1)


def evaluate_mpvpe(model: MGFPModel, examples: Sequence[Stage2Example], *, frozen: bool = False) -> float:
    """
    Mean per-vertex error over `examples`.

    frozen=True evaluates the locked cascade (s2m on X̄) with the same chunking,
    so at zero init both paths run identical arithmetic.
    """
    if not examples:
        return float("nan")
    errors = []
    for start in range(0, len(examples), EVAL_CHUNK):
        chunk = examples[start:start + EVAL_CHUNK]
        X_bar, features = _stack(chunk)
        if frozen:
            patches, _ = s2m_forward_batch(model.locked, X_bar)
        else:
            patches, _ = mfi_forward_batch(model, X_bar, features)
        mesh = recover_mesh(model.locked.spec, patches)
        errors.append(_mean_vertex_distance(mesh, np.stack([example.V_gt for example in chunk])))
    return float(np.concatenate(errors).mean())


def stage2_batch_loss(
    model: MGFPModel,
    batch: Sequence[Stage2Example],
    weights: LossWeights,
) -> Tuple[float, Dict[str, float], Dict[str, np.ndarray]]:
    """Mean stage-2 loss over a batch, its term breakdown, and infuser gradients."""
    X_bar, features = _stack(batch)
    patches, cache = mfi_forward_batch(model, X_bar, features)
    d_patches = np.zeros_like(patches)
    total = 0.0
    terms = {name: 0.0 for name in LOSS_TERMS}
    for i, example in enumerate(batch):
        prediction = Stage2Prediction(patches=patches[i], skeleton=example.X_bar, keypoints_2d=example.keypoints_2d)
        target = Stage2Target(mesh=example.gt_patches, skeleton=example.X_gt)
        breakdown, d_sample = stage2_loss(prediction, target, example.rig, weights)
        total += breakdown.total / len(batch)
        for name, value in breakdown.terms.items():
            terms[name] += value / len(batch)
        d_patches[i] = d_sample / len(batch)
    return total, terms, mfi_backward(model, cache, d_patches)


def snapshot_locked(model: MGFPModel) -> Dict[str, np.ndarray]:
    return {name: array.copy() for name, array in model.locked.parameters().items()}


def verify_locked(model: MGFPModel, snapshot: Dict[str, np.ndarray]) -> None:
    current = model.locked.parameters()
    for name, original in snapshot.items():
        if not np.array_equal(current[name], original):
            error_logger.error(f"Locked tensor '{name}' changed during stage 2")
            raise LockedWeightDriftError(f"locked tensor '{name}' changed during stage-2 training")


def train_stage2(
    model: MGFPModel,
    examples: Sequence[Stage2Example],
    config: Optional[TrainConfig] = None,
    *,
    weights: Optional[LossWeights] = None,
    seed: int = 0,
    epochs: Optional[int] = None,
) -> Tuple[MGFPModel, Stage2Curve]:
    config = config or TrainConfig()
    weights = weights or LossWeights()
    epochs = config.stage2_epochs if epochs is None else epochs
    if not examples:
        raise ValueError("stage-2 training needs at least one prepared example")

    train_idx, val_idx = validation_split(len(examples), config.validation_fraction, seed)
    train_set = [examples[i] for i in train_idx]
    val_set = [examples[i] for i in val_idx]
    snapshot = snapshot_locked(model)
    params = model.parameters()
    state = AdamState(lr=config.stage2_lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))

    curve = Stage2Curve()
    curve.frozen_val_mpvpe = evaluate_mpvpe(model, val_set, frozen=True)
    curve.initial_val_mpvpe = evaluate_mpvpe(model, val_set)
    train_logger.info(
        f"Stage 2: {len(train_set)} train / {len(val_set)} val frames, {epochs} epochs, "
        f"frozen cascade val MPVPE {curve.frozen_val_mpvpe:.3f} mm"
    )

    epoch_bar = tqdm(range(epochs), desc="stage2", unit="epoch", disable=not config.progress)
    for epoch in epoch_bar:
        state.lr = stage2_lr(epoch, config.stage2_lr, config.stage2_decay_epoch, config.stage2_decay_factor)
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        epoch_terms = {name: 0.0 for name in LOSS_TERMS}
        batches = range(0, len(order), config.batch_size)
        for batch_index, start in enumerate(batches):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            loss, terms, grads = stage2_batch_loss(model, batch, weights)
            if not np.isfinite(loss):
                error_logger.error(f"Stage 2 non-finite loss at epoch {epoch}, batch {batch_index}")
                raise TrainingAbortedError("non-finite loss", epoch, batch_index)
            try:
                adam_step(params, grads, state)
            except NonFiniteGradientError as exc:
                error_logger.error(f"Stage 2 {exc} at epoch {epoch}, batch {batch_index}")
                raise TrainingAbortedError(str(exc), epoch, batch_index) from exc
            losses.append(loss)
            for name, value in terms.items():
                epoch_terms[name] += value / len(batches)

        val_mpvpe = evaluate_mpvpe(model, val_set)
        curve.train_loss.append(float(np.mean(losses)))
        curve.val_mpvpe.append(val_mpvpe)
        curve.lr.append(state.lr)
        curve.terms.append(epoch_terms)
        epoch_bar.set_postfix(loss=f"{curve.train_loss[-1]:.3f}", mpvpe=f"{val_mpvpe:.3f}")
        train_logger.info(
            f"Stage 2 epoch {epoch}: lr={state.lr:.3g} loss={curve.train_loss[-1]:.4f} val_mpvpe={val_mpvpe:.4f}"
        )

    verify_locked(model, snapshot)
    return model, curve
