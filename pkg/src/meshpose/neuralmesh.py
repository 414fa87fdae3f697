"""Neural mesh model: cuboid geometry + per-vertex feature vectors + a learned
background feature, with moving-average updates and feature-grid
correspondence bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from .features import FeatureMap, unit_normalize
from .geometry import Camera, CuboidMesh, Pose, build_cuboid, rasterize


@dataclass(frozen=True)
class NeuralMesh:
    """Cuboid mesh whose vertices carry learned unit-norm feature vectors."""

    geometry: CuboidMesh
    vertex_features: np.ndarray = field(repr=False)  # (R, c)
    background_feature: np.ndarray = field(repr=False)  # (c,)
    momentum: float = 0.1
    category: str = "object"

    @property
    def num_vertices(self) -> int:
        return self.geometry.num_vertices

    @property
    def channels(self) -> int:
        return self.vertex_features.shape[1]


def init_mesh(
    geometry: CuboidMesh,
    channels: int,
    category: str = "object",
    momentum: float = 0.1,
    seed: int = 0,
) -> NeuralMesh:
    """Random unit vertex features; the background feature starts random and
    is replaced by the first observed background batch during pretraining."""
    rng = np.random.default_rng(seed)
    feats = unit_normalize(rng.normal(size=(geometry.num_vertices, channels)))
    bg = unit_normalize(rng.normal(size=channels))
    return NeuralMesh(
        geometry=geometry,
        vertex_features=feats,
        background_feature=bg,
        momentum=momentum,
        category=category,
    )


@dataclass
class Correspondence:
    """Vertex <-> feature-cell assignment at one pose.

    ``vertex_ids[k]`` is paired with cell ``vertex_cells[k]`` (row, col).
    Pairs keep only vertices that govern their own nearest cell, so a feature
    map rendered from the mesh itself feeds every paired vertex its own
    feature (moving-average fixed point at zero noise).  ``cell_vertex`` holds
    the governing vertex of every covered cell; cells not covered by the mask
    form the background set.
    """

    vertex_ids: np.ndarray  # (K,) int
    vertex_cells: np.ndarray  # (K, 2) int, (row, col)
    cell_vertex: np.ndarray  # (Hf, Wf) int32, -1 on background
    foreground_mask: np.ndarray  # (Hf, Wf) bool

    @property
    def num_pairs(self) -> int:
        return len(self.vertex_ids)

    @property
    def grid_shape(self):
        return self.foreground_mask.shape

    def background_cells(self) -> np.ndarray:
        return np.argwhere(~self.foreground_mask)


def project_correspondences(mesh: NeuralMesh, pose: Pose, camera: Camera, feature_stride: int) -> Correspondence:
    """Rasterize at feature-grid resolution and pair visible vertices with
    their nearest cell (dropping vertices another vertex out-governs)."""
    fcam = camera.for_stride(feature_stride)
    rr = rasterize(mesh.geometry, pose, fcam)
    vis = np.nonzero(rr.vertex_visible)[0]
    if vis.size:
        cells = rr.vertex_pixel[vis]
        governed = rr.pixel_vertex[cells[:, 0], cells[:, 1]] == vis
        vis = vis[governed]
        cells = cells[governed]
    else:
        cells = np.zeros((0, 2), dtype=np.int32)
    return Correspondence(
        vertex_ids=vis.astype(np.int64),
        vertex_cells=cells.astype(np.int64).reshape(-1, 2),
        cell_vertex=rr.pixel_vertex,
        foreground_mask=rr.foreground_mask,
    )


def update_vertex_features(
    mesh: NeuralMesh,
    feature_map: FeatureMap,
    correspondence: Correspondence,
    momentum: float | None = None,
    momentum_b: float | None = None,
) -> NeuralMesh:
    """Moving-average update of observed vertex features and the background.

    C_r <- normalize((1-m) C_r + m f_i) for each pair; the background feature
    blends towards the mean of background cells.  Unobserved vertices are
    untouched; momentum 0 freezes, momentum 1 replaces exactly.
    """
    m = mesh.momentum if momentum is None else float(momentum)
    mb = m if momentum_b is None else float(momentum_b)
    grid = feature_map.grid
    if grid.shape[:2] != correspondence.grid_shape:
        raise ValueError(
            f"feature map grid {grid.shape[:2]} does not match correspondence grid {correspondence.grid_shape}"
        )

    feats = mesh.vertex_features.copy()
    if correspondence.num_pairs and m > 0:
        observed = grid[correspondence.vertex_cells[:, 0], correspondence.vertex_cells[:, 1]]
        if m == 1.0:
            feats[correspondence.vertex_ids] = observed
        else:
            blended = (1.0 - m) * feats[correspondence.vertex_ids] + m * observed
            feats[correspondence.vertex_ids] = unit_normalize(blended)

    bg = mesh.background_feature
    bg_mask = ~correspondence.foreground_mask
    if bg_mask.any() and mb > 0:
        bg_mean = grid[bg_mask].mean(axis=0)
        if mb == 1.0:
            bg = unit_normalize(bg_mean)
        else:
            bg = unit_normalize((1.0 - mb) * bg + mb * bg_mean)

    return replace(mesh, vertex_features=feats, background_feature=bg)


def save_mesh(path, mesh: NeuralMesh) -> None:
    arrays = {
        "vertices": mesh.geometry.vertices,
        "faces": mesh.geometry.faces.astype(np.int32),
        "face_candidates": mesh.geometry.face_candidates.astype(np.int32),
        "vertex_features": mesh.vertex_features,
        "background_feature": mesh.background_feature,
    }
    meta = {
        "category": mesh.category,
        "momentum": mesh.momentum,
        "dimensions": list(mesh.geometry.dimensions),
        "grid_density": mesh.geometry.grid_density,
    }
    checkpoint.save_arrays(path, "neural_mesh", arrays, meta)


def load_mesh(path) -> NeuralMesh:
    arrays, meta = checkpoint.load_arrays(path, expected_kind="neural_mesh")
    geometry = CuboidMesh(
        dimensions=tuple(meta["dimensions"]),
        grid_density=int(meta["grid_density"]),
        vertices=arrays["vertices"],
        faces=arrays["faces"],
        face_candidates=arrays["face_candidates"],
    )
    return NeuralMesh(
        geometry=geometry,
        vertex_features=arrays["vertex_features"],
        background_feature=arrays["background_feature"],
        momentum=float(meta["momentum"]),
        category=str(meta["category"]),
    )


def default_mesh_for(dimensions, channels: int, grid_density: int = 5, category: str = "object", momentum: float = 0.1, seed: int = 0) -> NeuralMesh:
    return init_mesh(build_cuboid(dimensions, grid_density), channels, category=category, momentum=momentum, seed=seed)
