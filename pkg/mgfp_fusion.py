"""
Multi-view geometry feature fusion over a locked Skeleton2Mesh model.

Provides:
- Keypoint and bone-level feature gathering from per-view feature maps
- The Zero-FC feature infuser: trainable copies of the axis stacks whose
  outputs enter the locked chain through zero-initialized FC layers
- Stage-2 loss (heatmap, 2D/3D skeleton, 2D/3D vertex terms)
- Image-to-mesh reconstruction (soft-argmax → DLT → gather → infuse)
- Parameter and multiply-add accounting

Per bone k and axis i the infuser evaluates
    z_0 = Z_0(G^B_k),  e_0 = OE(X̄)_k
    z_j = Z_j(f^C_j(z_{j-1})),  e_j = z_j + f^L_j(e_{j-1})   for j = 1..d
and returns e_d. With every Z at zero this is the locked chain exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from camera_geometry import (
    CameraRig,
    SOFT_ARGMAX_TEMPERATURE,
    camera_depths,
    dlt_triangulate,
    grid_sample_points,
    project_points,
    project_points_with_jacobian,
    read_keypoints,
)
from hand_model import (
    MLP_OUTPUT_WIDTH,
    N_BONES,
    KinematicTree,
    decompose_mesh,
    recover_mesh,
)
from numeric_core import (
    DenseLayer,
    MLPStack,
    init_dense_layer,
    layer_backward,
    layer_forward,
    stack_gradients,
    stack_parameters,
)
from run_config import LossWeights
from skeleton2mesh import (
    AXES,
    Skeleton2MeshModel,
    assemble_patches,
    count_macs,
    count_params,
    order_encode_batch,
    scatter_patch_gradient,
)

DEFAULT_CHANNELS = 128

LOSS_TERMS = ("heatmap", "skeleton_2d", "vertex_2d", "skeleton_3d", "vertex_3d")


@dataclass
class BoneFeatureSet:
    keypoint: np.ndarray
    bone: np.ndarray


@dataclass
class MFIParams:
    copies: List[MLPStack]
    zero: List[List[DenseLayer]]

    def parameters(self) -> Dict[str, np.ndarray]:
        named: Dict[str, np.ndarray] = {}
        for axis, stack in zip(AXES, self.copies):
            named.update(stack_parameters(stack, f"mfi.copy_{axis}"))
        for axis, layers in zip(AXES, self.zero):
            for index, layer in enumerate(layers):
                named[f"mfi.zero_{axis}.{index}.w"] = layer.weight
                named[f"mfi.zero_{axis}.{index}.b"] = layer.bias
        return named

    def parameter_count(self) -> int:
        total = sum(stack.parameter_count() for stack in self.copies)
        total += sum(layer.parameter_count() for layers in self.zero for layer in layers)
        return int(total)

    def mac_count(self) -> int:
        """Per bone, all three axes."""
        total = sum(stack.mac_count() for stack in self.copies)
        total += sum(layer.mac_count() for layers in self.zero for layer in layers)
        return int(total)


@dataclass
class MGFPModel:
    locked: Skeleton2MeshModel
    mfi: MFIParams
    n_views: int
    channels: int

    @property
    def feature_dim(self) -> int:
        return 2 * self.n_views * self.channels

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable tensors only; the locked model is never exposed to the optimizer."""
        return self.mfi.parameters()

    def metadata(self) -> Dict[str, object]:
        meta = dict(self.locked.metadata())
        meta.update({"kind": "mgfp", "n_views": self.n_views, "channels": self.channels})
        return meta


@dataclass
class MFICache:
    batch: int
    bone_features: np.ndarray
    z: List[List[np.ndarray]]
    copy_out: List[List[np.ndarray]]
    copy_pre: List[List[np.ndarray]]
    zero_pre: List[List[np.ndarray]]
    e: List[List[np.ndarray]]
    locked_pre: List[List[np.ndarray]]
    patches: np.ndarray


@dataclass
class Stage2Prediction:
    patches: np.ndarray
    skeleton: np.ndarray
    keypoints_2d: np.ndarray


@dataclass
class Stage2Target:
    mesh: np.ndarray
    skeleton: np.ndarray


@dataclass
class LossBreakdown:
    total: float
    terms: Dict[str, float] = field(default_factory=dict)


def init_mgfp(
    locked: Skeleton2MeshModel,
    n_views: int,
    channels: int = DEFAULT_CHANNELS,
) -> MGFPModel:
    """Copy the locked axis stacks and attach all-zero FC layers."""
    copies = [stack.copy() for stack in locked.triaxis.stacks]
    zero: List[List[DenseLayer]] = []
    dtype = locked.dtype
    for stack in copies:
        widths = [locked.oe_dim] + [layer.out_dim for layer in stack.layers]
        in_widths = [2 * n_views * channels] + [layer.out_dim for layer in stack.layers]
        zero.append(
            [
                init_dense_layer(None, fan_in, fan_out, activation="identity", zero=True, dtype=dtype)
                for fan_in, fan_out in zip(in_widths, widths)
            ]
        )
    return MGFPModel(locked=locked, mfi=MFIParams(copies=copies, zero=zero), n_views=n_views, channels=channels)


def gather_keypoint_features(
    feature_maps: np.ndarray,
    X_bar: np.ndarray,
    rig: CameraRig,
    downsample: Optional[float] = None,
) -> np.ndarray:
    """
    (21, N·C): per view, sample the C channels at each projected keypoint and
    concatenate across views in rig order. Keypoints behind a camera get zeros.
    """
    feature_maps = np.asarray(feature_maps)
    if rig.n_views < 2:
        raise ValueError("feature gathering needs at least two views")
    if feature_maps.shape[0] != rig.n_views:
        raise ValueError(f"{feature_maps.shape[0]} feature maps for {rig.n_views} views")
    channels = feature_maps.shape[1]
    blocks = []
    for view, fmap in zip(rig.views, feature_maps):
        scale = downsample or view.image_size[0] / fmap.shape[-1]
        depth = camera_depths(view, X_bar)
        uv = project_points(view, X_bar, allow_behind=True) / scale
        uv[depth <= 0] = np.nan
        block = grid_sample_points(fmap, uv)
        if block.shape[1] != channels:
            raise ValueError("feature maps disagree on channel count")
        blocks.append(block)
    return np.concatenate(blocks, axis=1)


def gather_bone_features(
    feature_maps: np.ndarray,
    X_bar: np.ndarray,
    rig: CameraRig,
    tree: KinematicTree,
    downsample: Optional[float] = None,
) -> BoneFeatureSet:
    keypoint = gather_keypoint_features(feature_maps, X_bar, rig, downsample)
    bone = np.concatenate([keypoint[tree.parent_joints], keypoint[tree.child_joints]], axis=1)
    return BoneFeatureSet(keypoint=keypoint, bone=bone)


def _feature_batch(model: MGFPModel, G) -> np.ndarray:
    bone = G.bone if isinstance(G, BoneFeatureSet) else np.asarray(G)
    if bone.ndim == 2:
        bone = bone[np.newaxis]
    if bone.shape[1:] != (N_BONES, model.feature_dim):
        raise ValueError(f"bone features {bone.shape[1:]} do not match (20, {model.feature_dim})")
    return bone


def mfi_forward_batch(model: MGFPModel, X_bar: np.ndarray, G) -> Tuple[np.ndarray, MFICache]:
    X_bar = np.asarray(X_bar, dtype=np.float64)
    if X_bar.ndim == 2:
        X_bar = X_bar[np.newaxis]
    bone = _feature_batch(model, G)
    batch = X_bar.shape[0]
    if bone.shape[0] != batch:
        raise ValueError("skeleton and feature batches differ in size")

    locked = model.locked
    oe, _ = order_encode_batch(locked, X_bar)
    rows_oe = oe.reshape(batch * N_BONES, locked.oe_dim)
    rows_g = bone.reshape(batch * N_BONES, model.feature_dim).astype(locked.dtype)

    cache = MFICache(batch, rows_g, [], [], [], [], [], [], None)
    columns = []
    for locked_stack, copy_stack, zero_layers in zip(locked.triaxis.stacks, model.mfi.copies, model.mfi.zero):
        z, _ = layer_forward(zero_layers[0], rows_g)
        e = rows_oe
        zs, copy_out, copy_pre, zero_pre, es, locked_pre = [z], [], [], [], [e], []
        for j, (locked_layer, copy_layer) in enumerate(zip(locked_stack.layers, copy_stack.layers), start=1):
            c, c_pre = layer_forward(copy_layer, z)
            z, z_pre = layer_forward(zero_layers[j], c)
            l, l_pre = layer_forward(locked_layer, e)
            e = z + l
            copy_out.append(c)
            copy_pre.append(c_pre)
            zero_pre.append(z_pre)
            locked_pre.append(l_pre)
            zs.append(z)
            es.append(e)
        cache.z.append(zs)
        cache.copy_out.append(copy_out)
        cache.copy_pre.append(copy_pre)
        cache.zero_pre.append(zero_pre)
        cache.e.append(es)
        cache.locked_pre.append(locked_pre)
        columns.append(e.reshape(batch, N_BONES, MLP_OUTPUT_WIDTH))

    offsets = np.stack(columns, axis=-1)
    patches = assemble_patches(locked.spec, locked.tree, X_bar, offsets, locked.pe.pre_scale)
    cache.patches = patches
    return patches, cache


def mfi_forward(model: MGFPModel, X_bar: np.ndarray, G) -> Tuple[np.ndarray, np.ndarray]:
    """(patches, mesh) for one skeleton or a batch."""
    single = np.asarray(X_bar).ndim == 2
    patches, _ = mfi_forward_batch(model, X_bar, G)
    mesh = recover_mesh(model.locked.spec, patches)
    if single:
        return patches[0], mesh[0]
    return patches, mesh


def mfi_backward(model: MGFPModel, cache: MFICache, d_patches: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients for copies and Z layers; locked layers only relay input gradients."""
    locked = model.locked
    batch = cache.batch
    d_offsets = scatter_patch_gradient(locked.spec, d_patches, locked.pe.pre_scale)
    grads: Dict[str, np.ndarray] = {}

    for a, (axis, locked_stack, copy_stack, zero_layers) in enumerate(
        zip(AXES, locked.triaxis.stacks, model.mfi.copies, model.mfi.zero)
    ):
        depth = len(locked_stack.layers)
        de = d_offsets[..., a].reshape(batch * N_BONES, MLP_OUTPUT_WIDTH)
        dz_copy = np.zeros_like(de)
        copy_grads: List[Dict[str, np.ndarray]] = [None] * depth  # type: ignore[list-item]
        for j in range(depth, 0, -1):
            dz = de + dz_copy
            zero_grads, dc = layer_backward(zero_layers[j], cache.copy_out[a][j - 1], cache.zero_pre[a][j - 1], dz)
            grads[f"mfi.zero_{axis}.{j}.w"] = zero_grads["weight"]
            grads[f"mfi.zero_{axis}.{j}.b"] = zero_grads["bias"]
            copy_grads[j - 1], dz_copy = layer_backward(
                copy_stack.layers[j - 1], cache.z[a][j - 1], cache.copy_pre[a][j - 1], dc
            )
            if j > 1:
                _, de = layer_backward(
                    locked_stack.layers[j - 1],
                    cache.e[a][j - 1],
                    cache.locked_pre[a][j - 1],
                    de,
                    need_param_grads=False,
                )
        grads.update(stack_gradients(copy_grads, f"mfi.copy_{axis}"))
        zero_grads, _ = layer_backward(zero_layers[0], cache.bone_features, cache.z[a][0], dz_copy)
        grads[f"mfi.zero_{axis}.0.w"] = zero_grads["weight"]
        grads[f"mfi.zero_{axis}.0.b"] = zero_grads["bias"]
    return grads


def _l1(pred: np.ndarray, target: np.ndarray, count: int) -> Tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.abs(diff).sum() / count), np.sign(diff) / count


def _mean_norm(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.linalg.norm(pred - target, axis=-1).mean())


def stage2_loss(
    prediction: Stage2Prediction,
    target: Stage2Target,
    rig: CameraRig,
    weights: Optional[LossWeights] = None,
    spec=None,
) -> Tuple[LossBreakdown, np.ndarray]:
    """
    Weighted stage-2 loss for one sample and its gradient wrt the predicted patches.

    Vertex terms compare patch rows (M·V_gt), L1 summed over coordinates and
    averaged over rows (and views for 2D). Skeleton terms are mean Euclidean
    distances; they depend only on the triangulated input and carry no
    gradient into the infuser. The heatmap term is 0 for the oracle source.

    With `spec` given, `target.mesh` is the full mesh and is decomposed here;
    without it, `target.mesh` must already be the (P, 3) patch rows.
    """
    weights = weights or LossWeights()
    patches = np.asarray(prediction.patches, dtype=np.float64)
    gt_patches = decompose_mesh(spec, target.mesh) if spec is not None else np.asarray(target.mesh)
    if gt_patches.shape != patches.shape:
        raise ValueError(f"ground-truth patches {gt_patches.shape} do not match predictions {patches.shape}")
    rows = patches.shape[0]

    vertex_3d, d_vertex_3d = _l1(patches, gt_patches, rows)

    vertex_2d = 0.0
    d_vertex_2d = np.zeros_like(patches)
    skeleton_2d = 0.0
    count_2d = rig.n_views * rows
    for view_index, view in enumerate(rig.views):
        uv, jac = project_points_with_jacobian(view, patches)
        uv_gt = project_points(view, gt_patches, allow_behind=True)
        visible = (camera_depths(view, patches) > 0) & (camera_depths(view, gt_patches) > 0)
        diff = np.where(visible[:, np.newaxis], uv - uv_gt, 0.0)
        vertex_2d += float(np.abs(diff).sum()) / count_2d
        d_uv = np.sign(diff) / count_2d
        d_vertex_2d += np.einsum("ni,nij->nj", d_uv, jac)

        joints_gt = project_points(view, target.skeleton, allow_behind=True)
        skeleton_2d += _mean_norm(prediction.keypoints_2d[view_index], joints_gt) / rig.n_views

    skeleton_3d = _mean_norm(prediction.skeleton, target.skeleton)
    terms = {
        "heatmap": 0.0,
        "skeleton_2d": skeleton_2d,
        "vertex_2d": vertex_2d,
        "skeleton_3d": skeleton_3d,
        "vertex_3d": vertex_3d,
    }
    total = sum(getattr(weights, name) * value for name, value in terms.items())
    d_patches = weights.vertex_3d * d_vertex_3d + weights.vertex_2d * d_vertex_2d
    return LossBreakdown(total=float(total), terms=terms), d_patches


def triangulate_views(
    rig: CameraRig,
    heatmaps: np.ndarray,
    *,
    temperature: float = SOFT_ARGMAX_TEMPERATURE,
    readout: str = "log",
) -> Tuple[np.ndarray, np.ndarray]:
    """(X̄ (21, 3), keypoints_2d (N, 21, 2)) from per-view heatmap stacks."""
    heatmaps = np.asarray(heatmaps)
    if heatmaps.shape[0] != rig.n_views:
        raise ValueError(f"{heatmaps.shape[0]} heatmap stacks for {rig.n_views} views")
    keypoints = np.stack(
        [
            read_keypoints(
                stack,
                temperature=temperature,
                readout=readout,
                downsample=view.image_size[0] / stack.shape[-1],
            )
            for view, stack in zip(rig.views, heatmaps)
        ]
    )
    return dlt_triangulate(keypoints, rig), keypoints


def reconstruct(
    model: MGFPModel,
    rig: CameraRig,
    heatmaps: np.ndarray,
    feature_maps: np.ndarray,
    *,
    temperature: float = SOFT_ARGMAX_TEMPERATURE,
    readout: str = "log",
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Multi-view heatmaps and feature maps → (X̄, mesh, per-view 2D keypoints)."""
    if rig.n_views != model.n_views:
        raise ValueError(f"model expects {model.n_views} views, rig has {rig.n_views}")
    X_bar, keypoints = triangulate_views(rig, heatmaps, temperature=temperature, readout=readout)
    features = gather_bone_features(feature_maps, X_bar, rig, model.locked.tree)
    _, mesh = mfi_forward(model, X_bar, features)
    return X_bar, mesh, keypoints


def count_params_mgfp(model: MGFPModel) -> int:
    """Locked GSD and stacks, trainable copies, and every Z layer."""
    return count_params(model.locked) + model.mfi.parameter_count()


def count_macs_mgfp(model: MGFPModel) -> int:
    """Locked chain, copy chain and Z applications per bone (×20), plus one GSD pass."""
    return count_macs(model.locked) + N_BONES * model.mfi.mac_count()
