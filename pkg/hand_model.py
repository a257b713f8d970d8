"""
Hand kinematics and mesh topology.

This module owns the 21-joint kinematic tree, the built-in generalized-cylinder
hand template, the per-bone convex decomposition (matrix M and its left
inverse), forward kinematics, linear blend skinning, diagnostic bone frames,
and skeleton noise injection. Units are millimeters throughout.

Transforms are applied in delta form (x + (G - I)(x - pivot) + shift) so the
identity pose reproduces the rest geometry bit-exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

N_JOINTS = 21
N_BONES = 20
MLP_OUTPUT_WIDTH = 100
DEFAULT_DUP_THRESHOLD = 0.3
RING_SIDES = 8

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

# Joint 0 is the wrist; each finger owns four joints proximal to distal.
DEFAULT_PARENTS = (-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19)

MANO_PER_BONE_COUNTS = (45, 61, 43, 45, 92, 34, 41, 62, 44, 44, 58, 42, 40, 60, 41, 35, 64, 28, 50, 62)
MANO_VERTEX_COUNT = 778

# (first joint position, finger direction, phalanx lengths) per finger, mm.
_REST_FINGERS = (
    ((-32.0, 38.0, 0.0), (-0.55, 0.83, 0.0), (36.0, 30.0, 26.0)),
    ((-24.0, 92.0, 0.0), (-0.10, 1.00, 0.0), (40.0, 24.0, 20.0)),
    ((-2.0, 96.0, 0.0), (0.00, 1.00, 0.0), (44.0, 27.0, 21.0)),
    ((18.0, 90.0, 0.0), (0.08, 1.00, 0.0), (41.0, 26.0, 20.0)),
    ((36.0, 78.0, 0.0), (0.18, 1.00, 0.0), (32.0, 20.0, 18.0)),
)
_FINGER_RADII = (10.0, 9.0, 9.0, 8.5, 7.5)
_RING_TAPER = 0.88


class InvalidTemplateError(ValueError):
    pass


class DecompositionCapacityError(ValueError):
    pass


class DegenerateFrameError(ValueError):
    pass


@dataclass(frozen=True)
class KinematicTree:
    parents: Tuple[int, ...] = DEFAULT_PARENTS
    bone_order: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if len(self.parents) != N_JOINTS:
            raise ValueError(f"kinematic tree needs {N_JOINTS} joints")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise ValueError("joint 0 must be the only root")
        if not self.bone_order:
            order = tuple((self.parents[child], child) for child in range(1, N_JOINTS))
            object.__setattr__(self, "bone_order", order)
        children = sorted(child for _, child in self.bone_order)
        if children != list(range(1, N_JOINTS)):
            raise ValueError("every non-root joint must be the child of exactly one bone")
        for parent, child in self.bone_order:
            if self.parents[child] != parent:
                raise ValueError(f"bone ({parent}, {child}) disagrees with the parent array")

    @property
    def parent_joints(self) -> np.ndarray:
        return np.array([p for p, _ in self.bone_order], dtype=np.int64)

    @property
    def child_joints(self) -> np.ndarray:
        return np.array([c for _, c in self.bone_order], dtype=np.int64)

    def one_hot(self, k: int) -> np.ndarray:
        code = np.zeros(N_BONES)
        code[k] = 1.0
        return code

    def parent_bone(self, k: int) -> Optional[int]:
        """Index of the bone ending at bone k's parent joint (None for palm bones)."""
        parent_joint = self.bone_order[k][0]
        for index, (_, child) in enumerate(self.bone_order):
            if child == parent_joint:
                return index
        return None

    def topological_bones(self) -> List[int]:
        """Bone indices ordered so every bone follows its parent bone."""
        done: List[int] = []
        pending = list(range(N_BONES))
        while pending:
            for k in list(pending):
                parent = self.parent_bone(k)
                if parent is None or parent in done:
                    done.append(k)
                    pending.remove(k)
        return done

    def order_names(self) -> List[str]:
        return [f"{p}-{c}" for p, c in self.bone_order]

    def finger_of(self, k: int) -> str:
        return FINGER_NAMES[(self.bone_order[k][1] - 1) // 4]


@dataclass
class HandTemplate:
    rest_skeleton: np.ndarray
    vertices: np.ndarray
    faces: np.ndarray
    skin_weights: np.ndarray
    name: str = "builtin"

    def __post_init__(self) -> None:
        self.rest_skeleton = np.asarray(self.rest_skeleton, dtype=np.float64)
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        if self.rest_skeleton.shape != (N_JOINTS, 3):
            raise InvalidTemplateError(f"rest skeleton shape {self.rest_skeleton.shape}")
        if self.skin_weights.shape != (self.vertices.shape[0], N_BONES):
            raise InvalidTemplateError(f"skin weight shape {self.skin_weights.shape}")
        if np.any(self.skin_weights < 0):
            raise InvalidTemplateError("skin weights must be nonnegative")
        if not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-6):
            raise InvalidTemplateError("skin weight rows must sum to 1")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.vertex_count):
            raise InvalidTemplateError("face indices out of range")

    @property
    def vertex_count(self) -> int:
        return int(self.vertices.shape[0])


@dataclass
class DecompositionSpec:
    """
    Per-bone patch layout.

    Row i of M selects template vertex `row_vertices[i]`; rows are grouped by
    bone in bone order, ascending template index inside each bone.
    """

    M: np.ndarray
    per_bone_counts: np.ndarray
    M_left_inverse: np.ndarray
    row_vertices: np.ndarray
    bone_of_row: np.ndarray = field(init=False)
    bone_offsets: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.bone_offsets = np.concatenate([[0], np.cumsum(self.per_bone_counts)]).astype(np.int64)
        self.bone_of_row = np.repeat(np.arange(N_BONES), self.per_bone_counts)

    @property
    def patch_count(self) -> int:
        return int(self.M.shape[0])

    @property
    def vertex_count(self) -> int:
        return int(self.M.shape[1])

    def bone_rows(self, k: int) -> slice:
        return slice(int(self.bone_offsets[k]), int(self.bone_offsets[k + 1]))


@dataclass
class PoseLimits:
    """Uniform sampling ranges in degrees."""

    finger_flexion: Tuple[float, float] = (0.0, 90.0)
    finger_abduction: Tuple[float, float] = (-20.0, 20.0)
    finger_twist: Tuple[float, float] = (0.0, 0.0)
    palm_flexion: Tuple[float, float] = (0.0, 10.0)
    palm_abduction: Tuple[float, float] = (-5.0, 5.0)
    global_rotation: bool = True

    @classmethod
    def zero(cls) -> "PoseLimits":
        return cls((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), False)


@dataclass
class Pose:
    """Global rotation vector plus per-bone (flexion, abduction, twist) radians."""

    global_rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bone_angles: np.ndarray = field(default_factory=lambda: np.zeros((N_BONES, 3)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()


def default_tree() -> KinematicTree:
    return KinematicTree()


def validate_skeleton(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (N_JOINTS, 3):
        raise ValueError(f"skeleton must be ({N_JOINTS}, 3), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("skeleton has non-finite coordinates")
    return X


def bones_from_skeleton(X: np.ndarray, tree: KinematicTree) -> np.ndarray:
    """(20, 6) rows of [parent endpoint, child endpoint] in bone order."""
    X = np.asarray(X, dtype=np.float64)
    return np.concatenate([X[..., tree.parent_joints, :], X[..., tree.child_joints, :]], axis=-1)


def bone_midpoints(X: np.ndarray, tree: KinematicTree) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return 0.5 * (X[..., tree.parent_joints, :] + X[..., tree.child_joints, :])


def default_rest_skeleton() -> np.ndarray:
    joints = np.zeros((N_JOINTS, 3))
    for finger, (start, direction, lengths) in enumerate(_REST_FINGERS):
        base = 1 + 4 * finger
        unit = np.asarray(direction) / np.linalg.norm(direction)
        joints[base] = start
        for step, length in enumerate(lengths):
            joints[base + step + 1] = joints[base + step] + length * unit
    return joints


def _ring_basis(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    along = direction / np.linalg.norm(direction)
    lateral = np.cross(along, np.array([0.0, 0.0, 1.0]))
    lateral /= np.linalg.norm(lateral)
    normal = np.cross(lateral, along)
    return lateral, normal


def _ring(center: np.ndarray, direction: np.ndarray, radius: float) -> np.ndarray:
    lateral, normal = _ring_basis(direction)
    angles = 2.0 * np.pi * np.arange(RING_SIDES) / RING_SIDES
    return center + radius * (np.cos(angles)[:, None] * lateral + np.sin(angles)[:, None] * normal)


def build_default_template() -> HandTemplate:
    """
    Five generalized cylinders (8-gon rings) welded at the finger joints.

    Per finger: a wrist ring, three interior rings per bone, a shared ring at
    every inner joint, a fingertip ring and a cap vertex. Joint rings split
    their weight evenly between the two bones they connect.
    """
    rest = default_rest_skeleton()
    vertices: List[np.ndarray] = []
    weights: List[np.ndarray] = []
    faces: List[Tuple[int, int, int]] = []

    def weight_row(pairs):
        row = np.zeros(N_BONES)
        for bone, value in pairs:
            row[bone] += value
        return row

    for finger in range(5):
        joints = [0] + [1 + 4 * finger + step for step in range(4)]
        bones = [4 * finger + step for step in range(4)]
        radius = _FINGER_RADII[finger]
        ring_starts: List[int] = []

        def add_ring(center, direction, r, row):
            ring_starts.append(len(vertices))
            for point in _ring(center, direction, r):
                vertices.append(point)
                weights.append(row)

        first_dir = rest[joints[1]] - rest[joints[0]]
        add_ring(rest[joints[0]], first_dir, radius * 1.15, weight_row([(bones[0], 1.0)]))
        for step, bone in enumerate(bones):
            start, end = rest[joints[step]], rest[joints[step + 1]]
            direction = end - start
            r = radius * _RING_TAPER ** step
            prev_bone = bones[step - 1] if step > 0 else None
            next_bone = bones[step + 1] if step < 3 else None
            for t in (0.25, 0.5, 0.75):
                if t == 0.25 and prev_bone is not None:
                    row = weight_row([(bone, 0.8), (prev_bone, 0.2)])
                elif t == 0.75 and next_bone is not None:
                    row = weight_row([(bone, 0.8), (next_bone, 0.2)])
                else:
                    row = weight_row([(bone, 1.0)])
                add_ring(start + t * direction, direction, r, row)
            if next_bone is not None:
                joint_dir = direction / np.linalg.norm(direction)
                following = rest[joints[step + 2]] - end
                joint_dir = joint_dir + following / np.linalg.norm(following)
                add_ring(end, joint_dir, r * 0.95, weight_row([(bone, 0.5), (next_bone, 0.5)]))
            else:
                add_ring(end, direction, r * 0.8, weight_row([(bone, 1.0)]))

        cap = len(vertices)
        tip_dir = rest[joints[4]] - rest[joints[3]]
        vertices.append(rest[joints[4]] + 0.4 * radius * tip_dir / np.linalg.norm(tip_dir))
        weights.append(weight_row([(bones[3], 1.0)]))

        for a, b in zip(ring_starts[:-1], ring_starts[1:]):
            for i in range(RING_SIDES):
                j = (i + 1) % RING_SIDES
                faces.append((a + i, a + j, b + i))
                faces.append((a + j, b + j, b + i))
        tip = ring_starts[-1]
        for i in range(RING_SIDES):
            faces.append((tip + i, tip + (i + 1) % RING_SIDES, cap))

    return HandTemplate(
        rest_skeleton=rest,
        vertices=np.asarray(vertices),
        faces=np.asarray(faces, dtype=np.int64),
        skin_weights=np.asarray(weights),
    )


def decomposition_from_assignment(
    bone_vertices: Sequence[Sequence[int]], vertex_count: int
) -> DecompositionSpec:
    """Build M and (M^T M)^-1 M^T from per-bone vertex lists."""
    if len(bone_vertices) != N_BONES:
        raise InvalidTemplateError(f"expected {N_BONES} bone patches, got {len(bone_vertices)}")
    counts = np.array([len(v) for v in bone_vertices], dtype=np.int64)
    for k, count in enumerate(counts):
        if count == 0:
            raise InvalidTemplateError(f"bone {k} received no vertices")
        if count > MLP_OUTPUT_WIDTH:
            raise DecompositionCapacityError(
                f"bone {k} has {count} vertices, more than the {MLP_OUTPUT_WIDTH} regression slots"
            )

    row_vertices = np.concatenate([np.sort(np.asarray(v, dtype=np.int64)) for v in bone_vertices])
    M = np.zeros((row_vertices.size, vertex_count))
    M[np.arange(row_vertices.size), row_vertices] = 1.0

    multiplicity = M.sum(axis=0)
    if np.any(multiplicity == 0):
        missing = int(np.argmax(multiplicity == 0))
        raise InvalidTemplateError(f"vertex {missing} is not covered by any bone patch")
    # M^T M is diagonal (the multiplicities), so the left inverse averages duplicates.
    M_left_inverse = M.T / multiplicity[:, None]
    return DecompositionSpec(M=M, per_bone_counts=counts, M_left_inverse=M_left_inverse, row_vertices=row_vertices)


def build_decomposition(template: HandTemplate, dup_threshold: float = DEFAULT_DUP_THRESHOLD) -> DecompositionSpec:
    """
    Assign each vertex to its max-weight bone; duplicate it into the
    second-heaviest bone when that weight reaches `dup_threshold`.
    """
    weights = template.skin_weights
    order = np.argsort(-weights, axis=1, kind="stable")
    primary = order[:, 0]
    secondary = order[:, 1]
    second_weight = weights[np.arange(weights.shape[0]), secondary]

    bone_vertices: List[List[int]] = [[] for _ in range(N_BONES)]
    for vertex, bone in enumerate(primary):
        bone_vertices[int(bone)].append(vertex)
        if second_weight[vertex] >= dup_threshold and second_weight[vertex] > 0:
            bone_vertices[int(secondary[vertex])].append(vertex)
    return decomposition_from_assignment(bone_vertices, template.vertex_count)


def _digest(values: np.ndarray, fmt: str) -> str:
    text = " ".join(format(value, fmt) for value in values.ravel().tolist())
    return hashlib.sha256(text.encode("ascii")).hexdigest()


def template_fingerprint(template: HandTemplate, spec: DecompositionSpec) -> Dict[str, object]:
    """
    Hashes and summary statistics of a template and its decomposition.

    Integer arrays hash as space-separated decimals, skin weights with two
    decimals, so the digests do not depend on dtype or byte order.
    """
    vertices = template.vertices
    centroid = vertices.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((vertices - centroid) ** 2, axis=1)))
    return {
        "vertex_count": int(template.vertex_count),
        "face_count": int(template.faces.shape[0]),
        "patch_count": int(spec.row_vertices.size),
        "per_bone_counts": [int(count) for count in spec.per_bone_counts],
        "faces_sha256": _digest(template.faces.astype(np.int64), "d"),
        "skin_weights_sha256": _digest(template.skin_weights, ".2f"),
        "row_vertices_sha256": _digest(spec.row_vertices.astype(np.int64), "d"),
        "vertex_centroid": centroid.tolist(),
        "vertex_min": vertices.min(axis=0).tolist(),
        "vertex_max": vertices.max(axis=0).tolist(),
        "vertex_rms": float(rms),
        "rest_skeleton": template.rest_skeleton.tolist(),
    }


def mano_decomposition_spec(
    counts: Sequence[int] = MANO_PER_BONE_COUNTS,
    vertex_count: int = MANO_VERTEX_COUNT,
) -> DecompositionSpec:
    """
    A MANO-shaped layout (778 vertices, 991 patch rows) for capacity and
    inverse checks when no MANO asset is supplied.

    Each bone owns a contiguous block of unique vertices sized by largest
    remainder; its duplicates are the boundary vertices of the preceding block
    (the first bone borrows from the second).
    """
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    share = counts * vertex_count / total
    unique = np.floor(share).astype(np.int64)
    shortfall = vertex_count - int(unique.sum())
    for index in np.argsort(-(share - unique), kind="stable")[:shortfall]:
        unique[index] += 1

    starts = np.concatenate([[0], np.cumsum(unique)[:-1]])
    bone_vertices: List[List[int]] = []
    for k in range(len(counts)):
        block = list(range(int(starts[k]), int(starts[k] + unique[k])))
        need = int(counts[k] - unique[k])
        if k == 0:
            borrowed = list(range(int(starts[1]), int(starts[1] + need)))
        else:
            end = int(starts[k - 1] + unique[k - 1])
            borrowed = list(range(end - need, end))
        bone_vertices.append(block + borrowed)
    return decomposition_from_assignment(bone_vertices, vertex_count)


def decompose_mesh(spec: DecompositionSpec, V: np.ndarray) -> np.ndarray:
    """M · V, computed as the equivalent row gather."""
    V = np.asarray(V, dtype=np.float64)
    if V.shape[-2] != spec.vertex_count:
        raise ValueError(f"mesh has {V.shape[-2]} vertices, spec expects {spec.vertex_count}")
    return V[..., spec.row_vertices, :]


def recover_mesh(spec: DecompositionSpec, patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches)
    if patches.shape[-2] != spec.patch_count:
        raise ValueError(f"patches have {patches.shape[-2]} rows, spec expects {spec.patch_count}")
    return spec.M_left_inverse @ patches


def _bone_rest_frame(rest: np.ndarray, tree: KinematicTree, k: int) -> np.ndarray:
    """Columns (lateral, along, palm normal) of bone k in the rest pose."""
    parent, child = tree.bone_order[k]
    lateral, normal = _ring_basis(rest[child] - rest[parent])
    along = np.cross(normal, lateral)
    return np.column_stack([lateral, along, normal])


def _delta_rotation(frame: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """(R - I) for flexion/abduction/twist expressed in a bone frame."""
    local = Rotation.from_euler("xzy", angles).as_matrix()
    return frame @ (local - np.eye(3)) @ frame.T


def _bone_rotations(tree: KinematicTree, rest: np.ndarray, pose: Pose) -> np.ndarray:
    """World rotation of every bone, (20, 3, 3)."""
    global_delta = Rotation.from_rotvec(pose.global_rotvec).as_matrix() - np.eye(3)
    rotations = np.zeros((N_BONES, 3, 3))
    for k in tree.topological_bones():
        local = np.eye(3) + _delta_rotation(_bone_rest_frame(rest, tree, k), pose.bone_angles[k])
        parent = tree.parent_bone(k)
        base = np.eye(3) + global_delta if parent is None else rotations[parent]
        rotations[k] = base @ local
    return rotations


def _posed_joints(tree: KinematicTree, rest: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    joints = rest.copy()
    shift = np.zeros((N_JOINTS, 3))
    for k in tree.topological_bones():
        parent, child = tree.bone_order[k]
        offset = rest[child] - rest[parent]
        shift[child] = shift[parent] + (rotations[k] - np.eye(3)) @ offset
        joints[child] = rest[child] + shift[child]
    return joints


def forward_kinematics(tree: KinematicTree, rest: np.ndarray, pose: Pose) -> np.ndarray:
    """Rigid chain transform from the wrist outward; bone lengths are preserved."""
    rest = validate_skeleton(rest)
    return _posed_joints(tree, rest, _bone_rotations(tree, rest, pose))


def sample_pose(rng_seed, limits: Optional[PoseLimits] = None) -> Pose:
    """Deterministic per seed; angles uniform inside `limits`."""
    limits = limits or PoseLimits()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    angles = np.zeros((N_BONES, 3))
    for k in range(N_BONES):
        palm = k % 4 == 0
        flex = limits.palm_flexion if palm else limits.finger_flexion
        abd = limits.palm_abduction if palm else limits.finger_abduction
        twist = (0.0, 0.0) if palm else limits.finger_twist
        angles[k] = [rng.uniform(*flex), rng.uniform(*abd), rng.uniform(*twist)]
    angles = np.deg2rad(angles)
    if limits.global_rotation:
        rotvec = Rotation.random(random_state=rng).as_rotvec()
    else:
        rotvec = np.zeros(3)
    return Pose(global_rotvec=rotvec, bone_angles=angles)


def lbs_mesh(template: HandTemplate, pose: Pose, tree: Optional[KinematicTree] = None) -> np.ndarray:
    """Linear blend skinning: v + sum_k w_k [(G_k - I)(v - p_k) + (X_pk - p_k)]."""
    tree = tree or default_tree()
    rest = template.rest_skeleton
    rotations = _bone_rotations(tree, rest, pose)
    joints = _posed_joints(tree, rest, rotations)
    pivots = rest[tree.parent_joints]
    shifts = joints[tree.parent_joints] - pivots

    relative = template.vertices[np.newaxis, :, :] - pivots[:, np.newaxis, :]
    deltas = np.einsum("kij,kvj->kvi", rotations - np.eye(3), relative) + shifts[:, np.newaxis, :]
    return template.vertices + np.einsum("vk,kvi->vi", template.skin_weights, deltas)


def posed_sample(template: HandTemplate, pose: Pose, tree: Optional[KinematicTree] = None):
    """(skeleton, mesh) for one pose."""
    tree = tree or default_tree()
    return forward_kinematics(tree, template.rest_skeleton, pose), lbs_mesh(template, pose, tree)


def bone_frame(X: np.ndarray, tree: KinematicTree, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Local frame of bone k from parent A, child B and wrist O.

    Origin at B, x along B→A, y the component of B→O orthogonal to x, z = x × y.
    """
    X = validate_skeleton(X)
    parent, child = tree.bone_order[k]
    A, B, O = X[parent], X[child], X[0]
    to_parent = A - B
    to_wrist = O - B
    scale = max(np.linalg.norm(to_parent), np.linalg.norm(to_wrist), 1e-300)
    if np.linalg.norm(np.cross(to_parent, to_wrist)) <= 1e-9 * scale * scale:
        raise DegenerateFrameError(f"bone {k}: parent, child and wrist are collinear")
    x_axis = to_parent / np.linalg.norm(to_parent)
    y_axis = to_wrist - (to_wrist @ x_axis) * x_axis
    y_axis /= np.linalg.norm(y_axis)
    z_axis = np.cross(x_axis, y_axis)
    return np.column_stack([x_axis, y_axis, z_axis]), B.copy()


def inject_noise(X: np.ndarray, sigma_sq: float, seed) -> np.ndarray:
    """Add i.i.d. N(0, sigma_sq) mm² noise to every coordinate."""
    if sigma_sq < 0:
        raise ValueError("sigma_sq must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = np.asarray(X, dtype=np.float64)
    return X + rng.normal(0.0, np.sqrt(sigma_sq), size=X.shape)
