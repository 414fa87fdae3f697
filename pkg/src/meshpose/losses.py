"""Training and inference objectives with analytic gradients.

Four terms: the spatial contrastive loss over feature cells, the feature
reconstruction loss against the neural mesh (unit variances, constants
dropped), the domain-contrastive loss aligning real features with vertex
features at pseudo-correspondences, and their weighted joint combination.

Pose gradients use frozen correspondences: the foreground/background
partition and the vertex pairing are fixed at the current pose, each paired
vertex's projection moves smoothly with the pose through the pinhole model,
and the loss reads the feature map through clamped bilinear interpolation at
the projected positions.  This is the standard render-and-compare treatment
of the rasterizer's non-differentiability; correspondences are re-derived
every optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap
from .geometry import Camera, Pose, project_points, project_points_with_jacobian
from .neuralmesh import Correspondence, NeuralMesh, project_correspondences

_Z_NEAR = 1e-6


@dataclass
class LossValue:
    total: float
    terms: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# Spatial contrastive loss
# --------------------------------------------------------------------------


def contrastive_loss(feature_map: FeatureMap, fg_cells: np.ndarray, bg_cells: np.ndarray):
    """Negative sum of squared pairwise distances, foreground-to-all.

    L = - sum_{i in FG} ( sum_{j in FG, j != i} ||f_i - f_j||^2
                          + sum_{j in BG} ||f_i - f_j||^2 )

    With unit-norm cells every pairwise term lies in [0, 4], so the loss is
    bounded.  Returns (LossValue, dL/dcell grid).
    """
    grid = feature_map.grid
    hf, wf, c = grid.shape
    fg_cells = np.asarray(fg_cells, dtype=np.int64).reshape(-1, 2)
    bg_cells = np.asarray(bg_cells, dtype=np.int64).reshape(-1, 2)
    if fg_cells.shape[0] == 0:
        raise ValueError("contrastive loss requires a nonempty foreground set")
    marks = np.zeros((hf, wf), dtype=np.int8)
    marks[fg_cells[:, 0], fg_cells[:, 1]] = 1
    if bg_cells.shape[0] and marks[bg_cells[:, 0], bg_cells[:, 1]].any():
        raise ValueError("foreground and background cell sets must be disjoint")

    a = grid[fg_cells[:, 0], fg_cells[:, 1]]  # (n, c)
    b = grid[bg_cells[:, 0], bg_cells[:, 1]]  # (m, c)
    n, m = a.shape[0], b.shape[0]
    sum_a = a.sum(axis=0)
    sum_b = b.sum(axis=0) if m else np.zeros(c)
    sq_a = float(np.sum(a * a))
    sq_b = float(np.sum(b * b)) if m else 0.0

    fg_fg = 2.0 * n * sq_a - 2.0 * float(sum_a @ sum_a)
    fg_bg = m * sq_a + n * sq_b - 2.0 * float(sum_a @ sum_b)
    total = -(fg_fg + fg_bg)

    grad = np.zeros_like(grid)
    da = -(4.0 * (n * a - sum_a) + 2.0 * (m * a - sum_b))
    np.add.at(grad, (fg_cells[:, 0], fg_cells[:, 1]), da)
    if m:
        db = -(2.0 * (n * b - sum_a))
        np.add.at(grad, (bg_cells[:, 0], bg_cells[:, 1]), db)

    value = LossValue(total=total, terms={"fg_fg": -fg_fg, "fg_bg": -fg_bg})
    return value, grad


# --------------------------------------------------------------------------
# Reconstruction loss
# --------------------------------------------------------------------------


def reconstruction_terms(feature_map: FeatureMap, mesh: NeuralMesh, correspondence: Correspondence, with_gradient: bool = False):
    """Reconstruction loss given precomputed correspondences.

    1/2 sum_{i in FG} ||f_i - C_{r(i)}||^2 + 1/2 sum_{i in BG} ||f_i - b||^2
    with r(i) the governing vertex of cell i.  Optionally also returns
    dL/dcell.
    """
    grid = feature_map.grid
    if grid.shape[:2] != correspondence.grid_shape:
        raise ValueError(
            f"feature map grid {grid.shape[:2]} does not match correspondence grid {correspondence.grid_shape}"
        )
    fg = correspondence.foreground_mask
    resid_fg = grid[fg] - mesh.vertex_features[correspondence.cell_vertex[fg]]
    resid_bg = grid[~fg] - mesh.background_feature
    fg_term = 0.5 * float(np.sum(resid_fg**2))
    bg_term = 0.5 * float(np.sum(resid_bg**2))
    value = LossValue(total=fg_term + bg_term, terms={"foreground": fg_term, "background": bg_term})
    if not with_gradient:
        return value, None
    grad = np.empty_like(grid)
    grad[fg] = resid_fg
    grad[~fg] = resid_bg
    return value, grad


def reconstruction_loss(feature_map: FeatureMap, mesh: NeuralMesh, pose: Pose, camera: Camera) -> LossValue:
    """Reconstruction loss at a pose (correspondences derived internally).

    An empty render is the background-only loss by definition.
    """
    corr = project_correspondences(mesh, pose, camera, feature_map.stride)
    value, _ = reconstruction_terms(feature_map, mesh, corr)
    return value


# --------------------------------------------------------------------------
# Frozen-correspondence pose objective and gradient
# --------------------------------------------------------------------------


def _bilinear(grid: np.ndarray, uv: np.ndarray, with_derivative: bool = False):
    """Clamped bilinear samples of (H, W, c) at continuous (u=col, v=row).

    Derivatives are zero in a clamped direction outside the grid.
    """
    h, w, _ = grid.shape
    u = uv[:, 0]
    v = uv[:, 1]
    inside_u = (u >= 0) & (u <= w - 1)
    inside_v = (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    u0 = np.clip(np.floor(uc).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(vc).astype(np.int64), 0, max(h - 2, 0))
    du = (uc - u0)[:, None]
    dv = (vc - v0)[:, None]
    g00 = grid[v0, u0]
    g01 = grid[v0, np.minimum(u0 + 1, w - 1)]
    g10 = grid[np.minimum(v0 + 1, h - 1), u0]
    g11 = grid[np.minimum(v0 + 1, h - 1), np.minimum(u0 + 1, w - 1)]
    top = g00 * (1 - du) + g01 * du
    bot = g10 * (1 - du) + g11 * du
    val = top * (1 - dv) + bot * dv
    if not with_derivative:
        return val, None, None
    dval_du = ((g01 - g00) * (1 - dv) + (g11 - g10) * dv) * inside_u[:, None]
    dval_dv = (bot - top) * inside_v[:, None]
    return val, dval_du, dval_dv


def frozen_pose_objective(
    feature_map: FeatureMap, mesh: NeuralMesh, correspondence: Correspondence, pose: Pose, camera: Camera
) -> float:
    """Smooth surrogate of the reconstruction loss with frozen correspondences.

    The paired vertices are projected under ``pose`` and the feature map is
    read by bilinear interpolation; the background term is frozen at the
    anchor partition and therefore constant in the pose.
    """
    grid = feature_map.grid
    fcam = camera.for_stride(feature_map.stride)
    bg = ~correspondence.foreground_mask
    bg_term = 0.5 * float(np.sum((grid[bg] - mesh.background_feature) ** 2))
    if correspondence.num_pairs == 0:
        return bg_term
    pts = mesh.geometry.vertices[correspondence.vertex_ids]
    uv, z = project_points(pts, pose, fcam)
    valid = z > _Z_NEAR
    sampled, _, _ = _bilinear(grid, uv)
    resid = sampled - mesh.vertex_features[correspondence.vertex_ids]
    fg_term = 0.5 * float(np.sum((resid[valid]) ** 2))
    return fg_term + bg_term


def reconstruction_loss_pose_gradient(
    feature_map: FeatureMap,
    mesh: NeuralMesh,
    pose: Pose,
    camera: Camera,
    correspondence: Correspondence | None = None,
) -> np.ndarray:
    """Analytic gradient of :func:`frozen_pose_objective` at ``pose`` over
    (azimuth, elevation, theta, distance).

    Correspondences default to those projected at ``pose`` itself (re-derived
    each optimizer step by the caller).
    """
    if correspondence is None:
        correspondence = project_correspondences(mesh, pose, camera, feature_map.stride)
    if correspondence.num_pairs == 0:
        return np.zeros(4)
    grid = feature_map.grid
    fcam = camera.for_stride(feature_map.stride)
    pts = mesh.geometry.vertices[correspondence.vertex_ids]
    uv, z, jac = project_points_with_jacobian(pts, pose, fcam)
    valid = z > _Z_NEAR
    sampled, d_du, d_dv = _bilinear(grid, uv, with_derivative=True)
    resid = (sampled - mesh.vertex_features[correspondence.vertex_ids]) * valid[:, None]
    # dL/d(uv): chain residual through the bilinear read, then the projection.
    g_u = np.sum(resid * d_du, axis=1)
    g_v = np.sum(resid * d_dv, axis=1)
    return np.einsum("k,km->m", g_u, jac[:, 0, :]) + np.einsum("k,km->m", g_v, jac[:, 1, :])


# --------------------------------------------------------------------------
# Domain-contrastive loss
# --------------------------------------------------------------------------


def domain_contrastive_loss(mesh: NeuralMesh, real_feature_maps, pseudo_correspondences):
    """Squared alignment between real features and vertex features.

    L = sum_r sum_n ||f_{n,r} - C_r||^2 over vertices r made visible by the
    pseudo-labeled projection of sample n.  Returns (LossValue, dL/dC (R, c),
    list of per-map dL/dcell grids).  Empty correspondences give zero loss.
    """
    if len(real_feature_maps) != len(pseudo_correspondences):
        raise ValueError("one correspondence per feature map required")
    d_vertex = np.zeros_like(mesh.vertex_features)
    cell_grads = []
    total = 0.0
    n_pairs = 0
    for fm, corr in zip(real_feature_maps, pseudo_correspondences):
        grid = fm.grid
        grad = np.zeros_like(grid)
        if corr.num_pairs:
            if grid.shape[:2] != corr.grid_shape:
                raise ValueError("correspondence grid does not match feature map grid")
            cells = corr.vertex_cells
            f = grid[cells[:, 0], cells[:, 1]]
            cvert = mesh.vertex_features[corr.vertex_ids]
            resid = f - cvert
            total += float(np.sum(resid**2))
            n_pairs += corr.num_pairs
            np.add.at(grad, (cells[:, 0], cells[:, 1]), 2.0 * resid)
            np.add.at(d_vertex, corr.vertex_ids, -2.0 * resid)
        cell_grads.append(grad)
    value = LossValue(total=total, terms={"domain": total, "pairs": float(n_pairs)})
    return value, d_vertex, cell_grads


# --------------------------------------------------------------------------
# Joint objective
# --------------------------------------------------------------------------


def _scalar(x) -> float:
    return float(x.total) if isinstance(x, LossValue) else float(x)


def joint_loss(terms, alpha: float) -> LossValue:
    """L = L_contrastive + L_reconstruction + alpha * L_domain.

    ``terms`` maps "contrastive"/"reconstruction"/"domain" to floats or
    LossValues; a missing "domain" counts as zero.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    con = _scalar(terms.get("contrastive", 0.0))
    rec = _scalar(terms.get("reconstruction", 0.0))
    dom = _scalar(terms.get("domain", 0.0))
    total = con + rec + alpha * dom
    return LossValue(
        total=total,
        terms={
            "contrastive": con,
            "reconstruction": rec,
            "domain": dom,
            "domain_weighted": alpha * dom,
            "alpha": float(alpha),
        },
    )
