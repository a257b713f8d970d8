"""
Human-readable artifacts: OBJ meshes, skeleton JSON and heatmap previews.

All writers go through a temp file and os.replace so readers never observe a
partial file. OBJ bytes are a pure function of the inputs.
"""

from __future__ import annotations

import json
import os
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

PREVIEW_SCALE = 4


class ObjExportError(ValueError):
    pass


def _write_text(path: str, text: str) -> str:
    temp_path = f"{path}.tmp"
    with open(temp_path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)
    os.replace(temp_path, path)
    return path


def export_obj(mesh: np.ndarray, faces: Optional[np.ndarray], path: str) -> str:
    """`v x y z` lines (mm, 6 decimals) followed by 1-indexed `f a b c` lines."""
    mesh = np.asarray(mesh, dtype=np.float64)
    if mesh.ndim != 2 or mesh.shape[1] != 3:
        raise ObjExportError(f"mesh must be (V, 3), got {mesh.shape}")
    if not np.all(np.isfinite(mesh)):
        raise ObjExportError("mesh contains non-finite coordinates")
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= mesh.shape[0]):
        bad = int(faces[(faces < 0) | (faces >= mesh.shape[0])][0])
        raise ObjExportError(f"face index {bad} out of range for {mesh.shape[0]} vertices")

    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces]
    return _write_text(path, "\n".join(lines) + "\n")


def read_obj(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """(vertices (V, 3), faces (F, 3) zero-indexed) from a triangle OBJ."""
    vertices, faces = [], []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(value) for value in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(token.split("/")[0]) - 1 for token in parts[1:4]])
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def export_skeleton_json(
    skeleton: np.ndarray,
    path: str,
    *,
    keypoints_2d: Optional[np.ndarray] = None,
    extra: Optional[Dict[str, object]] = None,
) -> str:
    payload: Dict[str, object] = {"units": "mm", "joints": np.round(np.asarray(skeleton), 6).tolist()}
    if keypoints_2d is not None:
        payload["keypoints_2d"] = np.round(np.asarray(keypoints_2d), 6).tolist()
    if extra:
        payload.update(extra)
    return _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def heatmap_preview(heatmaps: np.ndarray, scale: int = PREVIEW_SCALE) -> Image.Image:
    """Grayscale image of the per-pixel max over a (J, H, W) stack, normalized to 0-255."""
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    if heatmaps.ndim == 2:
        heatmaps = heatmaps[np.newaxis]
    combined = heatmaps.max(axis=0)
    peak = combined.max()
    scaled = combined / peak if peak > 0 else combined
    pixels = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    image = Image.fromarray(pixels)
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
    return image


def export_heatmap_png(heatmaps: np.ndarray, path: str, *, scale: int = PREVIEW_SCALE) -> str:
    """One view's heatmap stack (or a stack of views tiled left to right) as a PNG."""
    heatmaps = np.asarray(heatmaps)
    views: Sequence[np.ndarray] = list(heatmaps) if heatmaps.ndim == 4 else [heatmaps]
    tiles = [heatmap_preview(view, scale) for view in views]
    sheet = Image.new("L", (sum(tile.width for tile in tiles), max(tile.height for tile in tiles)))
    left = 0
    for tile in tiles:
        sheet.paste(tile, (left, 0))
        left += tile.width
    temp_path = f"{path}.tmp"
    sheet.save(temp_path, format="PNG")
    os.replace(temp_path, path)
    return path
