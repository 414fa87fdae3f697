"""Render-and-compare pose estimation.

Gradient descent on the reconstruction loss over (azimuth, elevation,
in-plane rotation, distance), run from a grid of starting viewpoints.  Each
step re-derives correspondences at the current pose, takes the frozen-
correspondence analytic gradient, and accepts steps by backtracking line
search on the true (re-rendered) reconstruction loss, which makes the loss
non-increasing across accepted steps.  All starts are advanced together so
renders batch across them.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap
from .geometry import Camera, Pose, render_batch
from .losses import reconstruction_loss_pose_gradient
from .neuralmesh import Correspondence, NeuralMesh

_ELEVATION_LIMIT = math.radians(80.0)


class DegenerateMeshError(ValueError):
    """Mesh vertex features carry no information (all equal)."""


@dataclass(frozen=True)
class InferenceConfig:
    """Multi-start optimizer settings.

    The default start grid is azimuth_starts azimuths x elevation_starts_deg
    elevations at theta 0, at a distance estimated from the apparent
    foreground area; ``starts`` overrides the grid with explicit poses.
    """

    azimuth_starts: int = 12
    elevation_starts_deg: tuple = (0.0, 30.0)
    theta_start: float = 0.0
    starts: tuple = ()
    step_size: float = 0.05
    max_iterations: int = 30
    convergence_tolerance: float = 1e-4
    distance_search_range: tuple = (2.0, 6.0)
    max_backtracks: int = 6
    armijo_c: float = 1e-4
    optimize_distance: bool = True

    def __post_init__(self):
        if not self.starts and self.azimuth_starts < 1:
            raise ValueError("at least one starting pose is required")
        if self.step_size <= 0 or self.convergence_tolerance <= 0:
            raise ValueError("step_size and convergence_tolerance must be positive")
        lo, hi = self.distance_search_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad distance_search_range {self.distance_search_range}")


@dataclass
class PoseEstimate:
    pose: Pose
    final_loss: float
    confidence: float
    iterations_used: int
    init_index: int


@dataclass
class InferenceFailure:
    """Per-sample error record from batch_infer."""

    index: int
    error: str


@dataclass
class DistanceTable:
    """Monotone lookup from apparent foreground area to camera distance."""

    areas: np.ndarray  # decreasing with distance
    distances: np.ndarray

    def distance_for_area(self, area: float) -> float:
        if area <= 0:
            return float(np.sqrt(self.distances[0] * self.distances[-1]))
        # areas are decreasing in distance; interpolate on the reversed axis.
        return float(np.interp(area, self.areas[::-1], self.distances[::-1]))


def build_distance_table(mesh: NeuralMesh, camera: Camera, stride: int, config: InferenceConfig, n_steps: int = 12) -> DistanceTable:
    fcam = camera.for_stride(stride)
    lo, hi = config.distance_search_range
    dists = np.geomspace(lo, hi, n_steps)
    probe_views = [(0.4, 0.15), (1.3, 0.3), (2.4, 0.15), (4.0, 0.35)]
    areas = np.empty(n_steps)
    for k, d in enumerate(dists):
        poses = [Pose(az, el, 0.0, float(d)) for az, el in probe_views]
        batch = render_batch(mesh.geometry.vertices, mesh.geometry.faces, poses, fcam, mesh.geometry.face_candidates)
        areas[k] = batch.foreground_mask.reshape(len(poses), -1).sum(axis=1).mean()
    return DistanceTable(areas=areas, distances=dists)


def _estimate_foreground(feature_map: FeatureMap, mesh: NeuralMesh) -> np.ndarray:
    """Cells more similar to some vertex feature than to the background."""
    grid = feature_map.grid
    sim_vertex = np.einsum("hwc,rc->hwr", grid, mesh.vertex_features).max(axis=2)
    sim_bg = grid @ mesh.background_feature
    return sim_vertex > sim_bg


def _clamp_pose_array(m: np.ndarray, config: InferenceConfig) -> np.ndarray:
    out = m.copy()
    out[1] = min(max(out[1], -_ELEVATION_LIMIT), _ELEVATION_LIMIT)
    lo, hi = config.distance_search_range
    out[3] = min(max(out[3], lo), hi)
    return out


def _batch_losses(pose_arrays, mesh: NeuralMesh, feature_map: FeatureMap, camera: Camera):
    """True reconstruction loss + correspondences for many poses at once."""
    from .neuralmesh import project_correspondences  # local alias for clarity

    grid = feature_map.grid
    fcam = camera.for_stride(feature_map.stride)
    poses = [Pose.from_array(m) for m in pose_arrays]
    batch = render_batch(mesh.geometry.vertices, mesh.geometry.faces, poses, fcam, mesh.geometry.face_candidates)
    bg_cost_grid = 0.5 * np.sum((grid - mesh.background_feature) ** 2, axis=2)

    losses = np.empty(len(poses))
    corrs = []
    for i, pose in enumerate(poses):
        fg = batch.foreground_mask[i]
        cv = batch.pixel_vertex[i]
        fg_cost = 0.5 * np.sum((grid[fg] - mesh.vertex_features[cv[fg]]) ** 2)
        losses[i] = fg_cost + bg_cost_grid[~fg].sum()
        vis = np.nonzero(batch.vertex_visible[i])[0]
        if vis.size:
            cells = batch.vertex_pixel[i][vis]
            governed = cv[cells[:, 0], cells[:, 1]] == vis
            vis = vis[governed]
            cells = cells[governed]
        else:
            cells = np.zeros((0, 2), dtype=np.int32)
        corrs.append(
            Correspondence(
                vertex_ids=vis.astype(np.int64),
                vertex_cells=np.asarray(cells, dtype=np.int64).reshape(-1, 2),
                cell_vertex=cv,
                foreground_mask=fg,
            )
        )
    return losses, corrs


def _confidence(feature_map: FeatureMap, mesh: NeuralMesh, corr: Correspondence) -> float:
    fg = corr.foreground_mask
    if not fg.any():
        return 0.0
    sims = np.sum(feature_map.grid[fg] * mesh.vertex_features[corr.cell_vertex[fg]], axis=1)
    return float(np.mean((1.0 + sims) / 2.0))


def default_start_grid(config: InferenceConfig, distance: float):
    if config.starts:
        return [p if isinstance(p, Pose) else Pose.from_array(p) for p in config.starts]
    poses = []
    for el_deg in config.elevation_starts_deg:
        for k in range(config.azimuth_starts):
            az = 2.0 * math.pi * k / config.azimuth_starts
            poses.append(Pose(az, math.radians(el_deg), config.theta_start, distance))
    return poses


def infer_pose(
    feature_map: FeatureMap,
    mesh: NeuralMesh,
    camera: Camera,
    config: InferenceConfig,
    distance_table: DistanceTable | None = None,
) -> PoseEstimate:
    """Best pose over all starts; descent steps never increase the loss."""
    spread = np.ptp(mesh.vertex_features, axis=0).max()
    if spread < 1e-6:
        raise DegenerateMeshError(
            f"all {mesh.num_vertices} vertex features equal within 1e-6 (spread {spread:.2e}); mesh is untrained"
        )

    if distance_table is None:
        distance_table = build_distance_table(mesh, camera, feature_map.stride, config)
    area = float(_estimate_foreground(feature_map, mesh).sum())
    lo, hi = config.distance_search_range
    d0 = min(max(distance_table.distance_for_area(area), lo), hi)

    starts = default_start_grid(config, d0)
    n = len(starts)
    poses = np.stack([p.as_array() for p in starts])
    losses, corrs = _batch_losses(poses, mesh, feature_map, camera)
    init_losses = losses.copy()

    grads = np.zeros((n, 4))
    for i in range(n):
        grads[i] = reconstruction_loss_pose_gradient(
            feature_map, mesh, Pose.from_array(poses[i]), camera, corrs[i]
        )
        if not config.optimize_distance:
            grads[i, 3] = 0.0

    t = np.full(n, config.step_size)
    backtracks = np.full(n, config.max_backtracks)
    iters = np.zeros(n, dtype=int)
    active = np.linalg.norm(grads, axis=1) > 0

    while active.any():
        idx = np.nonzero(active)[0]
        trials = np.stack([_clamp_pose_array(poses[i] - t[i] * grads[i], config) for i in idx])
        trial_losses, trial_corrs = _batch_losses(trials, mesh, feature_map, camera)
        for k, i in enumerate(idx):
            predicted = config.armijo_c * t[i] * float(grads[i] @ grads[i])
            if trial_losses[k] <= losses[i] - predicted:
                step_norm = float(np.linalg.norm(trials[k] - poses[i]))
                poses[i] = trials[k]
                losses[i] = trial_losses[k]
                corrs[i] = trial_corrs[k]
                iters[i] += 1
                if step_norm < config.convergence_tolerance or iters[i] >= config.max_iterations:
                    active[i] = False
                    continue
                grads[i] = reconstruction_loss_pose_gradient(
                    feature_map, mesh, Pose.from_array(poses[i]), camera, corrs[i]
                )
                if not config.optimize_distance:
                    grads[i, 3] = 0.0
                if not np.linalg.norm(grads[i]) > 0:
                    active[i] = False
                    continue
                t[i] = config.step_size
                backtracks[i] = config.max_backtracks
            else:
                t[i] *= 0.5
                backtracks[i] -= 1
                if backtracks[i] <= 0:
                    active[i] = False

    win = int(np.argmin(losses))
    assert losses[win] <= init_losses[win] + 1e-12
    return PoseEstimate(
        pose=Pose.from_array(poses[win]).canonical(),
        final_loss=float(losses[win]),
        confidence=_confidence(feature_map, mesh, corrs[win]),
        iterations_used=int(iters[win]),
        init_index=win,
    )


def batch_infer(
    feature_maps,
    mesh: NeuralMesh,
    camera: Camera,
    config: InferenceConfig,
    parallelism: int = 1,
):
    """Per-sample inference; results are index-aligned and identical to the
    sequential run for any parallelism degree.  Per-sample errors become
    InferenceFailure records instead of aborting the batch.
    """
    feature_maps = list(feature_maps)
    if not feature_maps:
        return []
    table = build_distance_table(mesh, camera, feature_maps[0].stride, config) if feature_maps else None

    def run(i):
        try:
            return infer_pose(feature_maps[i], mesh, camera, config, distance_table=table)
        except Exception as exc:  # noqa: BLE001 - isolation contract
            return InferenceFailure(index=i, error=f"{type(exc).__name__}: {exc}")

    if parallelism <= 1:
        return [run(i) for i in range(len(feature_maps))]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(run, range(len(feature_maps))))
