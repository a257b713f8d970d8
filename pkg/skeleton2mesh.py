"""
Skeleton2Mesh: per-bone Tri-Axis MLP regression of hand mesh patches.

Provides:
- Sinusoidal positional encoding of bone endpoints and bone identifiers
- Order encoding (PE rows + Global Spatial Descriptor vector shared by all bones)
- Three coordinate-wise MLP stacks whose weights are shared by all 20 bones
- Patch assembly (trim 100 slots to each bone's vertex count, offset from the
  bone midpoint) and mesh recovery through the decomposition left inverse
- Stage-1 loss with exact analytic gradients
- Parameter and multiply-add accounting

Coordinates are root-centered and divided by `pre_scale` before encoding;
regressed offsets are multiplied back by `pre_scale`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from hand_model import (
    MLP_OUTPUT_WIDTH,
    N_BONES,
    N_JOINTS,
    DecompositionSpec,
    KinematicTree,
    bone_midpoints,
    bones_from_skeleton,
    decompose_mesh,
    default_tree,
    recover_mesh,
)
from numeric_core import (
    MLPCache,
    MLPStack,
    init_mlp_stack,
    mlp_backward,
    mlp_forward,
    stack_gradients,
    stack_parameters,
)

AXES = ("x", "y", "z")
HIDDEN_WIDTH = 256
GSD_WIDTH = 100
DEFAULT_DEPTH = 3
SUPPORTED_DEPTHS = (2, 3, 4, 5)
BONE_SCALARS = 6


@dataclass(frozen=True)
class PEConfig:
    L_bone: int = 5
    L_order: int = 2
    pre_scale: float = 100.0
    enabled: bool = True

    @property
    def bone_dim(self) -> int:
        return BONE_SCALARS * 2 * self.L_bone if self.enabled else BONE_SCALARS

    @property
    def order_dim(self) -> int:
        return N_BONES * 2 * self.L_order if self.enabled else N_BONES

    @property
    def encoded_dim(self) -> int:
        return self.bone_dim + self.order_dim


@dataclass
class TriAxisMLP:
    stacks: List[MLPStack]

    def __post_init__(self) -> None:
        if len(self.stacks) != 3:
            raise ValueError("Tri-Axis model needs exactly three stacks")
        shapes = [tuple(layer.weight.shape for layer in stack.layers) for stack in self.stacks]
        if len(set(shapes)) != 1:
            raise ValueError("axis stacks must have identical shapes")
        if self.stacks[0].out_dim != MLP_OUTPUT_WIDTH:
            raise ValueError(f"axis stacks must output {MLP_OUTPUT_WIDTH} values")

    @property
    def depth(self) -> int:
        return self.stacks[0].depth

    def copy(self) -> "TriAxisMLP":
        return TriAxisMLP([stack.copy() for stack in self.stacks])


@dataclass
class Skeleton2MeshModel:
    pe: PEConfig
    gsd: Optional[MLPStack]
    triaxis: TriAxisMLP
    spec: DecompositionSpec
    tree: KinematicTree = field(default_factory=default_tree)

    @property
    def use_gsd(self) -> bool:
        return self.gsd is not None

    @property
    def oe_dim(self) -> int:
        return self.pe.encoded_dim + (GSD_WIDTH if self.use_gsd else 0)

    @property
    def depth(self) -> int:
        return self.triaxis.depth

    @property
    def dtype(self):
        return self.triaxis.stacks[0].layers[0].weight.dtype

    def parameters(self) -> Dict[str, np.ndarray]:
        """Name → live array; names follow the weight-file convention."""
        named: Dict[str, np.ndarray] = {}
        if self.gsd is not None:
            named.update(stack_parameters(self.gsd, "gsd", compact=True))
        for axis, stack in zip(AXES, self.triaxis.stacks):
            named.update(stack_parameters(stack, f"axis_{axis}"))
        return named

    def metadata(self) -> Dict[str, object]:
        return {
            "kind": "s2m",
            "depth": self.depth,
            "hidden": int(self.triaxis.stacks[0].layers[0].out_dim),
            "pe": {
                "L_bone": self.pe.L_bone,
                "L_order": self.pe.L_order,
                "enabled": self.pe.enabled,
            },
            "pre_scale": self.pe.pre_scale,
            "use_gsd": self.use_gsd,
            "parents": list(self.tree.parents),
            "bone_order": [list(pair) for pair in self.tree.bone_order],
            "per_bone_counts": [int(c) for c in self.spec.per_bone_counts],
            "vertex_count": self.spec.vertex_count,
        }

    def copy(self) -> "Skeleton2MeshModel":
        return Skeleton2MeshModel(
            pe=self.pe,
            gsd=self.gsd.copy() if self.gsd is not None else None,
            triaxis=self.triaxis.copy(),
            spec=self.spec,
            tree=self.tree,
        )

    def astype(self, dtype) -> "Skeleton2MeshModel":
        return Skeleton2MeshModel(
            pe=self.pe,
            gsd=self.gsd.astype(dtype) if self.gsd is not None else None,
            triaxis=TriAxisMLP([stack.astype(dtype) for stack in self.triaxis.stacks]),
            spec=self.spec,
            tree=self.tree,
        )


@dataclass
class S2MCache:
    """Everything s2m_backward needs from one batched forward pass."""

    batch: int
    gsd_cache: Optional[MLPCache]
    axis_caches: List[MLPCache]
    oe: np.ndarray
    patches: np.ndarray


def init_s2m_model(
    spec: DecompositionSpec,
    tree: Optional[KinematicTree] = None,
    *,
    depth: int = DEFAULT_DEPTH,
    hidden: int = HIDDEN_WIDTH,
    pe: Optional[PEConfig] = None,
    use_gsd: bool = True,
    seed=0,
    dtype=np.float64,
) -> Skeleton2MeshModel:
    if depth not in SUPPORTED_DEPTHS:
        raise ValueError(f"depth must be one of {SUPPORTED_DEPTHS}, got {depth}")
    if int(spec.per_bone_counts.max()) > MLP_OUTPUT_WIDTH:
        raise ValueError("decomposition exceeds the per-bone output width")
    pe = pe or PEConfig()
    tree = tree or default_tree()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    gsd = None
    if use_gsd:
        gsd = init_mlp_stack(rng, [N_JOINTS * 3, hidden, GSD_WIDTH], learned_slope=True, dtype=dtype)
    oe_dim = pe.encoded_dim + (GSD_WIDTH if use_gsd else 0)
    dims = [oe_dim] + [hidden] * (depth - 1) + [MLP_OUTPUT_WIDTH]
    triaxis = TriAxisMLP([init_mlp_stack(rng, dims, dtype=dtype) for _ in AXES])
    return Skeleton2MeshModel(pe=pe, gsd=gsd, triaxis=triaxis, spec=spec, tree=tree)


def positional_encode(x: float, L: int) -> np.ndarray:
    """(sin(2^0 πx), cos(2^0 πx), ..., sin(2^(L-1) πx), cos(2^(L-1) πx))."""
    return encode_scalars(np.asarray([x], dtype=np.float64), L)


def encode_scalars(values: np.ndarray, L: int) -> np.ndarray:
    """Encode the last axis of `values` scalar by scalar: (..., n) → (..., n·2L)."""
    values = np.asarray(values)
    frequencies = (2.0 ** np.arange(L)) * np.pi
    angles = values[..., np.newaxis] * frequencies
    encoded = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
    return encoded.reshape(values.shape[:-1] + (values.shape[-1] * 2 * L,))


def normalized_joints(X: np.ndarray, pre_scale: float) -> np.ndarray:
    """Root-centered, pre-scaled joints; (..., 21, 3)."""
    X = np.asarray(X, dtype=np.float64)
    return (X - X[..., :1, :]) / pre_scale


def encode_bones(model: Skeleton2MeshModel, X: np.ndarray) -> np.ndarray:
    """The PE block of the order encoding, (B, 20, encoded_dim)."""
    scaled = normalized_joints(X, model.pe.pre_scale)
    bones = bones_from_skeleton(scaled, model.tree)
    one_hot = np.broadcast_to(np.eye(N_BONES), bones.shape[:-1] + (N_BONES,))
    if model.pe.enabled:
        bone_block = encode_scalars(bones, model.pe.L_bone)
        order_block = encode_scalars(one_hot, model.pe.L_order)
    else:
        bone_block, order_block = bones, one_hot
    return np.concatenate([bone_block, order_block], axis=-1)


def _as_skeleton_batch(X: np.ndarray) -> Tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    if X.shape == (N_JOINTS, 3):
        return X[np.newaxis], True
    if X.ndim == 3 and X.shape[1:] == (N_JOINTS, 3):
        return X, False
    raise ValueError(f"expected skeleton(s) of shape (21, 3) or (B, 21, 3), got {X.shape}")


def order_encode_batch(model: Skeleton2MeshModel, X: np.ndarray) -> Tuple[np.ndarray, Optional[MLPCache]]:
    """(B, 20, oe_dim) order encodings plus the GSD cache."""
    X, _ = _as_skeleton_batch(X)
    encoded = encode_bones(model, X).astype(model.dtype)
    if model.gsd is None:
        return encoded, None
    flat = normalized_joints(X, model.pe.pre_scale).reshape(X.shape[0], N_JOINTS * 3).astype(model.dtype)
    g, gsd_cache = mlp_forward(model.gsd, flat)
    shared = np.broadcast_to(g[:, np.newaxis, :], (X.shape[0], N_BONES, GSD_WIDTH))
    return np.concatenate([encoded, shared], axis=-1), gsd_cache


def order_encode(X: np.ndarray, model: Skeleton2MeshModel) -> np.ndarray:
    """OE(X) for one skeleton: (20, oe_dim), 240 at defaults."""
    oe, _ = order_encode_batch(model, X)
    return oe[0]


def regress_offsets(triaxis: TriAxisMLP, oe: np.ndarray) -> Tuple[np.ndarray, List[MLPCache]]:
    """Apply the shared axis stacks to every bone row: (B, 20, in) → (B, 20, 100, 3)."""
    batch, bones, width = oe.shape
    rows = oe.reshape(batch * bones, width)
    columns = []
    caches = []
    for stack in triaxis.stacks:
        y, cache = mlp_forward(stack, rows)
        columns.append(y.reshape(batch, bones, MLP_OUTPUT_WIDTH))
        caches.append(cache)
    return np.stack(columns, axis=-1), caches


def slot_index(spec: DecompositionSpec) -> np.ndarray:
    """Output slot of every patch row inside its bone's 100-wide block."""
    return np.arange(spec.patch_count) - spec.bone_offsets[spec.bone_of_row]


def assemble_patches(
    spec: DecompositionSpec,
    tree: KinematicTree,
    X: np.ndarray,
    offsets: np.ndarray,
    pre_scale: float,
) -> np.ndarray:
    """Trim (B, 20, 100, 3) offsets to each bone's count and anchor at bone midpoints."""
    midpoints = bone_midpoints(X, tree)
    slots = slot_index(spec)
    return midpoints[:, spec.bone_of_row, :] + pre_scale * offsets[:, spec.bone_of_row, slots, :]


def s2m_forward_batch(model: Skeleton2MeshModel, X: np.ndarray) -> Tuple[np.ndarray, S2MCache]:
    X, _ = _as_skeleton_batch(X)
    oe, gsd_cache = order_encode_batch(model, X)
    offsets, axis_caches = regress_offsets(model.triaxis, oe)
    patches = assemble_patches(model.spec, model.tree, X, offsets, model.pe.pre_scale)
    cache = S2MCache(batch=X.shape[0], gsd_cache=gsd_cache, axis_caches=axis_caches, oe=oe, patches=patches)
    return patches, cache


def s2m_forward(model: Skeleton2MeshModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(patches (P, 3), mesh (V, 3)) for one skeleton, or batched (B, P, 3), (B, V, 3)."""
    _, single = _as_skeleton_batch(X)
    patches, _ = s2m_forward_batch(model, X)
    mesh = recover_mesh(model.spec, patches)
    if single:
        return patches[0], mesh[0]
    return patches, mesh


def scatter_patch_gradient(spec: DecompositionSpec, d_patches: np.ndarray, pre_scale: float) -> np.ndarray:
    """dL/d(patches) → dL/d(raw 100-slot offsets); untrimmed slots get zero."""
    batch = d_patches.shape[0]
    d_offsets = np.zeros((batch, N_BONES, MLP_OUTPUT_WIDTH, 3), dtype=d_patches.dtype)
    d_offsets[:, spec.bone_of_row, slot_index(spec), :] = pre_scale * d_patches
    return d_offsets


def s2m_backward(model: Skeleton2MeshModel, cache: S2MCache, d_patches: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients for a batched forward; skeleton inputs are treated as data."""
    batch = cache.batch
    d_offsets = scatter_patch_gradient(model.spec, d_patches, model.pe.pre_scale)
    grads: Dict[str, np.ndarray] = {}
    d_oe = np.zeros((batch * N_BONES, model.oe_dim), dtype=d_offsets.dtype)
    for axis_index, (axis, stack) in enumerate(zip(AXES, model.triaxis.stacks)):
        upstream = d_offsets[..., axis_index].reshape(batch * N_BONES, MLP_OUTPUT_WIDTH)
        layer_grads, d_rows = mlp_backward(stack, cache.axis_caches[axis_index], upstream)
        grads.update(stack_gradients(layer_grads, f"axis_{axis}"))
        d_oe += d_rows

    if model.gsd is not None:
        d_g = d_oe.reshape(batch, N_BONES, model.oe_dim)[:, :, model.pe.encoded_dim:].sum(axis=1)
        gsd_grads, _ = mlp_backward(model.gsd, cache.gsd_cache, d_g)
        grads.update(stack_gradients(gsd_grads, "gsd", compact=True))
    return grads


def mean_distance(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean Euclidean row distance and its gradient wrt `pred` (zero at coincidence)."""
    diff = pred - target
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    count = dist.size
    safe = np.where(dist > 0, dist, 1.0)
    grad = np.where(dist[..., np.newaxis] > 0, diff / safe[..., np.newaxis], 0.0) / count
    return float(dist.mean()), grad


def stage1_loss_and_grads(
    model: Skeleton2MeshModel, X_gt: np.ndarray, V_gt: np.ndarray
) -> Tuple[float, Dict[str, np.ndarray]]:
    X_gt, _ = _as_skeleton_batch(X_gt)
    V_gt = np.asarray(V_gt, dtype=np.float64)
    if V_gt.ndim == 2:
        V_gt = V_gt[np.newaxis]
    patches, cache = s2m_forward_batch(model, X_gt)
    loss, d_patches = mean_distance(patches, decompose_mesh(model.spec, V_gt))
    return loss, s2m_backward(model, cache, d_patches)


def stage1_loss(model: Skeleton2MeshModel, X_gt: np.ndarray, V_gt: np.ndarray) -> float:
    """Mean per-vertex Euclidean distance (mm) over the trimmed patch vertices."""
    X_gt, _ = _as_skeleton_batch(X_gt)
    V_gt = np.asarray(V_gt, dtype=np.float64)
    if V_gt.ndim == 2:
        V_gt = V_gt[np.newaxis]
    patches, _ = s2m_forward_batch(model, X_gt)
    loss, _ = mean_distance(patches, decompose_mesh(model.spec, V_gt))
    return loss


def count_params(model: Skeleton2MeshModel) -> int:
    """GSD plus the three shared axis stacks."""
    total = sum(stack.parameter_count() for stack in model.triaxis.stacks)
    if model.gsd is not None:
        total += model.gsd.parameter_count()
    return int(total)


def count_macs(model: Skeleton2MeshModel) -> int:
    """Per skeleton: 20 bones × three axis stacks, plus one GSD pass."""
    total = N_BONES * sum(stack.mac_count() for stack in model.triaxis.stacks)
    if model.gsd is not None:
        total += model.gsd.mac_count()
    return int(total)
