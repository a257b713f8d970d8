"""
Calibrated pinhole geometry for the multi-view pipeline.

Single source of truth for:
- Projection (with per-point Jacobians for 2D losses)
- Gaussian heatmap rendering and soft-argmax readout
- Unweighted DLT triangulation
- Bilinear feature sampling with zero padding

Pixel (0, 0) is the center of the top-left pixel. Heatmap-grid coordinates are
image coordinates divided by the downsample factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from numeric_core import svd_smallest

HEATMAP_SIZE = 64
IMAGE_SIZE = 256
HEATMAP_SIGMA_PX = 2.0
SOFT_ARGMAX_TEMPERATURE = 1.0
LOGIT_FLOOR = 1e-12
DEGENERATE_SV_RATIO = 1e-10


class BehindCameraError(ValueError):
    pass


class TriangulationDegenerateError(RuntimeError):
    def __init__(self, keypoint_index: int, reason: str):
        super().__init__(f"Triangulation degenerate for keypoint {keypoint_index}: {reason}")
        self.keypoint_index = keypoint_index


@dataclass
class CameraView:
    K: np.ndarray
    T: np.ndarray
    image_size: Tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)

    def __post_init__(self) -> None:
        self.K = np.asarray(self.K, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        if self.K.shape != (3, 3) or self.T.shape != (4, 4):
            raise ValueError(f"bad camera shapes K{self.K.shape} T{self.T.shape}")
        if abs(self.K[1, 0]) + abs(self.K[2, 0]) + abs(self.K[2, 1]) > 0:
            raise ValueError("intrinsic matrix must be upper-triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        rotation = self.T[:3, :3]
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-9) or np.linalg.det(rotation) < 0:
            raise ValueError("extrinsic rotation must be special-orthogonal")

    @property
    def rotation(self) -> np.ndarray:
        return self.T[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.T[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def projection_matrix(self) -> np.ndarray:
        return self.K @ self.T[:3, :]


@dataclass
class CameraRig:
    views: List[CameraView] = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.views)


def camera_depths(view: CameraView, points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(points)
    return points @ view.rotation[2] + view.translation[2]


def project_points(view: CameraView, points: np.ndarray, *, allow_behind: bool = False) -> np.ndarray:
    """Project (n, 3) world points to (n, 2) pixels."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = points @ view.rotation.T + view.translation
    depth = cam[:, 2]
    if not allow_behind and np.any(depth <= 0):
        index = int(np.argmax(depth <= 0))
        raise BehindCameraError(f"point {index} has nonpositive depth {depth[index]:.6g}")
    pix = cam @ view.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return pix[:, :2] / pix[:, 2:3]


def project_point(view: CameraView, X: np.ndarray) -> Tuple[float, float]:
    uv = project_points(view, np.asarray(X, dtype=np.float64).reshape(1, 3))[0]
    return float(uv[0]), float(uv[1])


def project_points_with_jacobian(view: CameraView, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pixels (n, 2) and d(u, v)/dX as (n, 2, 3).

    Points behind the camera are not rejected here; callers mask them.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = points @ view.rotation.T + view.translation
    pix = cam @ view.K.T
    w = pix[:, 2:3]
    uv = pix[:, :2] / w
    # d(pix)/dX = K R ; d(uv)/d(pix) = [I/w, -uv/w]
    KR = view.K @ view.rotation
    jac = (KR[np.newaxis, :2, :] - uv[:, :, np.newaxis] * KR[np.newaxis, 2:3, :]) / w[:, :, np.newaxis]
    return uv, jac


def render_gaussian_heatmap(
    p: Tuple[float, float],
    size: Tuple[int, int] = (HEATMAP_SIZE, HEATMAP_SIZE),
    sigma_px: float = HEATMAP_SIGMA_PX,
) -> np.ndarray:
    """One (height, width) channel with exp(-|q - p|^2 / (2 sigma^2))."""
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    width, height = size
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    gx = np.exp(-((xs - p[0]) ** 2) / (2.0 * sigma_px * sigma_px))
    gy = np.exp(-((ys - p[1]) ** 2) / (2.0 * sigma_px * sigma_px))
    return np.outer(gy, gx)


def heatmap_logits(h: np.ndarray, floor: float = LOGIT_FLOOR) -> np.ndarray:
    """Treat a nonnegative heatmap as an unnormalized likelihood."""
    return np.log(np.maximum(h, floor))


def _spatial_softmax(values: np.ndarray, temperature: float) -> np.ndarray:
    scaled = temperature * values
    scaled = scaled - scaled.max()
    weights = np.exp(scaled)
    return weights / weights.sum()


def soft_argmax(h: np.ndarray, temperature: float = SOFT_ARGMAX_TEMPERATURE) -> Tuple[float, float]:
    """
    Expected pixel coordinates under softmax(temperature * h).

    Larger temperature sharpens toward the arg-max.
    """
    h = np.asarray(h, dtype=np.float64)
    weights = _spatial_softmax(h, temperature)
    height, width = h.shape
    u = float(weights.sum(axis=0) @ np.arange(width, dtype=np.float64))
    v = float(weights.sum(axis=1) @ np.arange(height, dtype=np.float64))
    return u, v


def soft_argmax_jacobian(h: np.ndarray, temperature: float = SOFT_ARGMAX_TEMPERATURE) -> np.ndarray:
    """d(u, v)/dh as a (2, height, width) array."""
    h = np.asarray(h, dtype=np.float64)
    weights = _spatial_softmax(h, temperature)
    height, width = h.shape
    u, v = soft_argmax(h, temperature)
    xs = np.arange(width, dtype=np.float64)[np.newaxis, :]
    ys = np.arange(height, dtype=np.float64)[:, np.newaxis]
    du = temperature * weights * (xs - u)
    dv = temperature * weights * (ys - v)
    return np.stack([du, dv])


def read_keypoints(
    heatmaps: np.ndarray,
    *,
    temperature: float = SOFT_ARGMAX_TEMPERATURE,
    readout: str = "log",
    downsample: float = IMAGE_SIZE / HEATMAP_SIZE,
) -> np.ndarray:
    """
    Soft-argmax every channel of a (21, Hh, Wh) heatmap stack.

    Returns (21, 2) image-pixel coordinates.
    """
    if readout not in {"log", "raw"}:
        raise ValueError(f"unknown heatmap readout '{readout}'")
    keypoints = np.empty((heatmaps.shape[0], 2))
    for index, channel in enumerate(heatmaps):
        values = heatmap_logits(channel) if readout == "log" else channel
        keypoints[index] = soft_argmax(values, temperature)
    return keypoints * downsample


def dlt_triangulate(keypoints_2d: np.ndarray, rig: CameraRig) -> np.ndarray:
    """
    Lift per-view (N, J, 2) pixels to (J, 3) world points.

    Each view contributes u*(p3.X) - p1.X = 0 and v*(p3.X) - p2.X = 0; rows are
    normalized to unit length before the SVD.
    """
    keypoints_2d = np.asarray(keypoints_2d, dtype=np.float64)
    if rig.n_views < 2:
        raise ValueError("DLT needs at least two views")
    if keypoints_2d.shape[0] != rig.n_views:
        raise ValueError(f"{keypoints_2d.shape[0]} keypoint sets for {rig.n_views} views")

    projections = [view.projection_matrix() for view in rig.views]
    n_joints = keypoints_2d.shape[1]
    points = np.empty((n_joints, 3))
    for j in range(n_joints):
        rows = []
        for view_index, P in enumerate(projections):
            u, v = keypoints_2d[view_index, j]
            rows.append(u * P[2] - P[0])
            rows.append(v * P[2] - P[1])
        A = np.asarray(rows)
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        singular_values = np.linalg.svd(A, compute_uv=False)
        if singular_values[-2] <= DEGENERATE_SV_RATIO * singular_values[0]:
            raise TriangulationDegenerateError(j, "rank-deficient system (rays coincide)")
        X = svd_smallest(A)
        if abs(X[3]) <= DEGENERATE_SV_RATIO * np.abs(X[:3]).max():
            raise TriangulationDegenerateError(j, "solution at infinity")
        points[j] = X[:3] / X[3]
    return points


def _bilinear_taps(feature_map: np.ndarray, points: np.ndarray):
    """Neighbor indices, weights and in-bounds masks for (K, 2) points."""
    _, height, width = feature_map.shape
    x0 = np.floor(points[:, 0]).astype(np.int64)
    y0 = np.floor(points[:, 1]).astype(np.int64)
    fx = points[:, 0] - x0
    fy = points[:, 1] - y0
    taps = []
    for dx, dy, weight in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        taps.append((np.clip(xi, 0, width - 1), np.clip(yi, 0, height - 1), weight, inside, dx, dy))
    return taps, fx, fy


def grid_sample_points(feature_map: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear samples of a (C, H, W) map at (K, 2) grid points → (K, C); zero padding."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.zeros((points.shape[0], feature_map.shape[0]), dtype=feature_map.dtype)
    finite = np.all(np.isfinite(points), axis=1)
    if not np.any(finite):
        return out
    taps, _, _ = _bilinear_taps(feature_map, np.where(finite[:, None], points, 0.0))
    for xi, yi, weight, inside, _, _ in taps:
        mask = inside & finite
        out += (weight * mask)[:, None] * feature_map[:, yi, xi].T
    return out


def grid_sample(feature_map: np.ndarray, p: Tuple[float, float]) -> np.ndarray:
    return grid_sample_points(feature_map, np.asarray([p], dtype=np.float64))[0]


def grid_sample_jacobian(feature_map: np.ndarray, p: Tuple[float, float]) -> np.ndarray:
    """d(sample)/d(u, v) as (C, 2), piecewise-linear within a cell."""
    point = np.asarray([p], dtype=np.float64)
    taps, fx, fy = _bilinear_taps(feature_map, point)
    jac = np.zeros((feature_map.shape[0], 2))
    for xi, yi, _, inside, dx, dy in taps:
        if not inside[0]:
            continue
        value = feature_map[:, yi[0], xi[0]]
        wx = fx[0] if dx else 1 - fx[0]
        wy = fy[0] if dy else 1 - fy[0]
        jac[:, 0] += value * (1 if dx else -1) * wy
        jac[:, 1] += value * wx * (1 if dy else -1)
    return jac
