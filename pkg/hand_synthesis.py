"""
Synthetic multi-view hand frames.

Provides:
- Look-at camera rings (`make_rig`)
- Per-sample synthesis: pose → skeleton + LBS mesh → per-view heatmaps
  (optionally corrupted) and feature-map recipes
- Deterministic dataset generation, serial or threaded

Every sample derives its RNG from SeedSequence([seed, index]) and spawns
independent streams for pose, rig, heatmap corruption and features, so the
(X, V) pair of a sample does not depend on whether its images were rendered.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from camera_geometry import (
    CameraRig,
    CameraView,
    IMAGE_SIZE,
    project_points,
    render_gaussian_heatmap,
)
from hand_model import (
    N_JOINTS,
    HandTemplate,
    KinematicTree,
    PoseLimits,
    default_tree,
    posed_sample,
    sample_pose,
)
from run_config import RigConfig, SynthesisConfig
from runtime_paths import get_thread_count

logger = logging.getLogger("mlphand.app")

FEATURE_SIGMA_PX = 2.0
AMPLITUDE_RANGE = (0.5, 1.5)
_STREAMS = ("pose", "rig", "corruption", "features")


def make_rig(
    n_views: int,
    radius_mm: float,
    look_at: Sequence[float],
    focal_px: float,
    image_size: Tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE),
    seed=0,
    *,
    elevation_jitter_deg: float = 15.0,
    arc_deg: float = 360.0,
) -> CameraRig:
    """
    Cameras on a ring about the +y axis through `look_at`, all facing it.

    A full ring spaces azimuths evenly from a seeded phase; a partial arc
    spreads them across `arc_deg` centered on +z.
    """
    if n_views < 2:
        raise ValueError("a rig needs at least two views")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    look_at = np.asarray(look_at, dtype=np.float64)
    width, height = int(image_size[0]), int(image_size[1])

    if arc_deg >= 360.0:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        azimuths = phase + 2.0 * np.pi * np.arange(n_views) / n_views
    else:
        half = np.deg2rad(arc_deg) / 2.0
        azimuths = np.linspace(-half, half, n_views)
    elevations = np.deg2rad(rng.uniform(-elevation_jitter_deg, elevation_jitter_deg, size=n_views))

    K = np.array([[focal_px, 0.0, (width - 1) / 2.0], [0.0, focal_px, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    up = np.array([0.0, 1.0, 0.0])
    views: List[CameraView] = []
    for azimuth, elevation in zip(azimuths, elevations):
        offset = radius_mm * np.array(
            [np.cos(elevation) * np.sin(azimuth), np.sin(elevation), np.cos(elevation) * np.cos(azimuth)]
        )
        center = look_at + offset
        forward = -offset / np.linalg.norm(offset)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.vstack([right, down, forward])
        T = np.eye(4)
        T[:3, :3] = rotation
        T[:3, 3] = -rotation @ center
        views.append(CameraView(K=K.copy(), T=T, image_size=(width, height)))
    return CameraRig(views)


def rig_from_config(config: RigConfig, look_at, seed) -> CameraRig:
    return make_rig(
        config.n_views,
        config.radius_mm,
        look_at,
        config.focal_px,
        tuple(config.image_size),
        seed,
        elevation_jitter_deg=config.elevation_jitter_deg,
        arc_deg=config.arc_deg,
    )


def pose_limits_from_config(config: SynthesisConfig) -> PoseLimits:
    return PoseLimits(
        finger_flexion=(0.0, config.finger_flexion_max_deg),
        finger_abduction=(-config.finger_abduction_deg, config.finger_abduction_deg),
        global_rotation=config.global_rotation,
    )


def render_feature_maps(
    anchors: np.ndarray,
    amplitudes: np.ndarray,
    size: int,
    sigma_px: float = FEATURE_SIGMA_PX,
) -> np.ndarray:
    """(N, C, size, size) Gaussian bumps from (N, C, 2) grid anchors and (N, C) amplitudes."""
    grid = np.arange(size, dtype=np.float64)
    gx = np.exp(-((grid[np.newaxis, np.newaxis, :] - anchors[..., 0:1]) ** 2) / (2.0 * sigma_px * sigma_px))
    gy = np.exp(-((grid[np.newaxis, np.newaxis, :] - anchors[..., 1:2]) ** 2) / (2.0 * sigma_px * sigma_px))
    return amplitudes[..., np.newaxis, np.newaxis] * gy[..., :, np.newaxis] * gx[..., np.newaxis, :]


@dataclass
class SyntheticSample:
    index: int
    seed: int
    skeleton: np.ndarray
    mesh: np.ndarray
    rig: Optional[CameraRig] = None
    projections: Optional[np.ndarray] = None
    heatmaps: Optional[np.ndarray] = None
    feature_anchors: Optional[np.ndarray] = None
    feature_amplitudes: Optional[np.ndarray] = None
    heatmap_size: int = 64
    _feature_maps: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def rendered(self) -> bool:
        return self.heatmaps is not None

    @property
    def downsample(self) -> float:
        return self.rig.views[0].image_size[0] / self.heatmap_size

    @property
    def feature_maps(self) -> np.ndarray:
        """(N, C, Hh, Wh), rendered from the stored recipe on first access."""
        if self.feature_anchors is None:
            raise ValueError(f"sample {self.index} has no feature recipe")
        if self._feature_maps is None:
            self._feature_maps = render_feature_maps(self.feature_anchors, self.feature_amplitudes, self.heatmap_size)
        return self._feature_maps

    def drop_feature_cache(self) -> None:
        self._feature_maps = None


def _sample_streams(seed: int, index: int):
    children = np.random.SeedSequence([int(seed), int(index)]).spawn(len(_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(_STREAMS, children)}


def render_view_heatmaps(
    projections: np.ndarray,
    config: SynthesisConfig,
    downsample: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    (21, Hh, Wh) heatmaps for one view.

    Peaks are jittered by N(0, peak_jitter_px²) image pixels, then N(0,
    value_noise²) is added and the result clipped at zero.
    """
    size = config.heatmap_size
    peaks = projections.copy()
    if config.peak_jitter_px > 0:
        peaks = peaks + rng.normal(0.0, config.peak_jitter_px, size=peaks.shape)
    channels = np.stack(
        [render_gaussian_heatmap(tuple(p / downsample), (size, size), config.heatmap_sigma_px) for p in peaks]
    )
    if config.value_noise > 0:
        channels = np.maximum(channels + rng.normal(0.0, config.value_noise, size=channels.shape), 0.0)
    return channels


def synthesize_sample(
    template: HandTemplate,
    rig_config: RigConfig,
    synthesis_config: SynthesisConfig,
    seed: int,
    index: int = 0,
    *,
    tree: Optional[KinematicTree] = None,
    render: bool = True,
) -> SyntheticSample:
    """
    One ground-truth frame. With render=False only the (skeleton, mesh) pair
    is produced, which is all stage-1 training needs.
    """
    tree = tree or default_tree()
    streams = _sample_streams(seed, index)
    pose = sample_pose(streams["pose"], pose_limits_from_config(synthesis_config))
    skeleton, mesh = posed_sample(template, pose, tree)
    sample = SyntheticSample(
        index=index, seed=seed, skeleton=skeleton, mesh=mesh, heatmap_size=synthesis_config.heatmap_size
    )
    if not render:
        return sample

    rig = rig_from_config(rig_config, skeleton.mean(axis=0), streams["rig"])
    downsample = rig.views[0].image_size[0] / synthesis_config.heatmap_size
    projections = np.stack([project_points(view, skeleton) for view in rig.views])

    corruption = streams["corruption"]
    heatmaps = np.stack([render_view_heatmaps(p, synthesis_config, downsample, corruption) for p in projections])

    features = streams["features"]
    channels = synthesis_config.feature_channels
    keypoint_of_channel = np.arange(channels) % N_JOINTS
    amplitudes = features.uniform(*AMPLITUDE_RANGE, size=(rig.n_views, channels))
    angles = features.uniform(0.0, 2.0 * np.pi, size=(rig.n_views, channels))
    shift = synthesis_config.feature_offset_px * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    shift[:, 0::2, :] = 0.0
    anchors = projections[:, keypoint_of_channel, :] / downsample + shift

    sample.rig = rig
    sample.projections = projections
    sample.heatmaps = heatmaps
    sample.feature_anchors = anchors
    sample.feature_amplitudes = amplitudes
    return sample


def generate_dataset(
    template: HandTemplate,
    rig_config: RigConfig,
    synthesis_config: SynthesisConfig,
    seed: int,
    count: int,
    *,
    start: int = 0,
    render: bool = True,
    threads: Optional[int] = None,
    tree: Optional[KinematicTree] = None,
) -> List[SyntheticSample]:
    """Samples start..start+count-1 in index order; identical for any thread count."""
    threads = threads or get_thread_count()
    indices = range(start, start + count)

    def build(index: int) -> SyntheticSample:
        return synthesize_sample(template, rig_config, synthesis_config, seed, index, tree=tree, render=render)

    if threads <= 1 or count <= 1:
        samples = [build(index) for index in indices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(build, indices))
    logger.info(f"Synthesized {len(samples)} samples (seed={seed}, render={render}, threads={threads})")
    return samples


def training_pairs(samples: Sequence[SyntheticSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack (B, 21, 3) skeletons and (B, V, 3) meshes."""
    return np.stack([s.skeleton for s in samples]), np.stack([s.mesh for s in samples])
