"""Rotation/pose math, pinhole camera, cuboid meshes, and a z-buffered rasterizer.

Coordinate conventions used throughout the package:

World frame (right-handed):
  - Object centered at the origin.
  - +Y is up.

Camera frame (right-handed, standard computer vision):
  - +X right, +Y down, +Z forward along the optical axis into the scene.

Viewpoint parameterization (azimuth ``a``, elevation ``e``, in-plane ``theta``,
distance ``d``): the camera orbits the origin at distance ``d``, positioned at

    C = d * (cos(e)*sin(a), sin(e), cos(e)*cos(a))

and looks at the origin.  The world-to-camera rotation is the fixed composition

    R(a, e, theta) = Rz(theta) @ V0 @ Rx(e) @ Ry(-a),   V0 = diag(1, -1, -1)

so that a point transforms as  p_cam = R @ p_world + (0, 0, d).  The anchor
case (0, 0, 0, d) puts the camera on the +Z world axis looking at the origin
with image up equal to world up.

Pixel grid: pixel (row r, col c) samples the continuous image point
(u, v) = (c, r), i.e. pixel centers sit on integer coordinates, with
u = cx + f*x/z and v = cy + f*y/z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_Z_NEAR = 1e-6
_DEGENERATE_AREA = 1e-12

# Relative depth tolerance for vertex visibility: scale with camera distance so
# grazing-angle vertices are not falsely occluded by their own face.
DEPTH_TOLERANCE_SCALE = 1e-4


@dataclass(frozen=True)
class Pose:
    """Camera viewpoint: azimuth/elevation/in-plane rotation (radians) + distance."""

    azimuth: float
    elevation: float
    theta: float
    distance: float

    def __post_init__(self):
        vals = (self.azimuth, self.elevation, self.theta, self.distance)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"pose fields must be finite, got {vals}")
        if self.distance <= 0:
            raise ValueError(f"pose distance must be > 0, got {self.distance}")

    def canonical(self) -> "Pose":
        """Return a copy with azimuth in [0, 2pi), theta in (-pi, pi].

        Elevation is expected to lie in [-pi/2, pi/2] already (optimizers keep
        it box-constrained); it is clipped defensively.
        """
        az = self.azimuth % (2.0 * math.pi)
        th = math.remainder(self.theta, 2.0 * math.pi)
        if th <= -math.pi:
            th += 2.0 * math.pi
        el = min(max(self.elevation, -math.pi / 2.0), math.pi / 2.0)
        return Pose(az, el, th, self.distance)

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.theta, self.distance])

    @staticmethod
    def from_array(arr) -> "Pose":
        a, e, t, d = (float(x) for x in arr)
        return Pose(a, e, t, d)


@dataclass(frozen=True)
class Camera:
    """Perspective pinhole camera with square pixels."""

    focal_length: float
    principal_point: tuple[float, float]  # (cx, cy) in pixels
    image_size: tuple[int, int]  # (H, W) in pixels

    def __post_init__(self):
        h, w = self.image_size
        cx, cy = self.principal_point
        if self.focal_length <= 0:
            raise ValueError(f"focal_length must be > 0, got {self.focal_length}")
        if not (0 <= cx < w and 0 <= cy < h):
            raise ValueError(
                f"principal point {self.principal_point} outside image {self.image_size}"
            )

    @staticmethod
    def centered(focal_length: float, image_size: tuple[int, int]) -> "Camera":
        h, w = image_size
        return Camera(focal_length, ((w - 1) / 2.0, (h - 1) / 2.0), (h, w))

    def for_stride(self, stride: int) -> "Camera":
        """Camera of the feature grid: everything divided by the stride.

        Feature cell (i, j) of a stride-s extractor is centered on image pixel
        (s*i, s*j), so the grid camera is the image camera scaled by 1/s.
        """
        h, w = self.image_size
        cx, cy = self.principal_point
        return Camera(
            self.focal_length / stride,
            (cx / stride, cy / stride),
            (-(-h // stride), -(-w // stride)),
        )


@dataclass(frozen=True)
class CuboidMesh:
    """Triangulated cuboid with vertices sampled on a regular surface grid.

    ``faces`` are the 12 hull triangles (two per side, corner indices only);
    the grid vertices of each side are coplanar with them, so the hull is
    sufficient for z-buffering.  ``face_candidates`` lists, per face, the grid
    vertices lying on that side (padded with -1); the rasterizer assigns each
    covered pixel the nearest of these, which for a regular grid equals the
    nearest mesh vertex of the front-most face.
    """

    dimensions: tuple[float, float, float]
    grid_density: int
    vertices: np.ndarray = field(repr=False)  # (R, 3)
    faces: np.ndarray = field(repr=False)  # (F, 3) int, CCW seen from outside
    face_candidates: np.ndarray = field(repr=False)  # (F, K) int, -1 padded

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]


@dataclass
class RenderResult:
    """Output of rasterization at a given pose.

    ``vertex_pixel[r]`` is the (row, col) of vertex r where ``vertex_visible[r]``,
    undefined (-1, -1) otherwise.  ``pixel_vertex`` holds the governing vertex of
    every foreground pixel (-1 on background).  ``depth`` is camera-space z,
    +inf on background.
    """

    foreground_mask: np.ndarray  # (H, W) bool
    vertex_visible: np.ndarray  # (R,) bool
    vertex_pixel: np.ndarray  # (R, 2) int32, (row, col)
    pixel_vertex: np.ndarray  # (H, W) int32
    depth: np.ndarray  # (H, W) float64
    pixel_face: np.ndarray  # (H, W) int32, winning triangle per pixel


def rotation_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about an arbitrary axis."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("rotation axis must be non-zero")
    x, y, z = axis / n
    c, s = math.cos(angle), math.sin(angle)
    cc = 1.0 - c
    return np.array(
        [
            [x * x * cc + c, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, y * y * cc + c, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, z * z * cc + c],
        ]
    )


_V0 = np.diag([1.0, -1.0, -1.0])


def pose_to_rotation(pose: Pose) -> np.ndarray:
    """World-to-camera rotation for a viewpoint (see module docstring)."""
    return rotation_z(pose.theta) @ _V0 @ rotation_x(pose.elevation) @ rotation_y(-pose.azimuth)


def is_rotation_matrix(r: np.ndarray, tol: float = 1e-6) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        return False
    return abs(np.linalg.det(r) - 1.0) <= tol


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle in [0, pi] of the relative rotation r1^T r2.

    Computed as arccos(clamp((trace(r1^T r2) - 1) / 2, -1, 1)), which equals
    the Frobenius-norm log-map distance.
    """
    for r in (r1, r2):
        if not is_rotation_matrix(r):
            raise ValueError("geodesic_distance requires valid rotation matrices")
    rel = np.asarray(r1).T @ np.asarray(r2)
    cos_theta = (np.trace(rel) - 1.0) * 0.5
    return math.acos(min(1.0, max(-1.0, cos_theta)))


def build_cuboid(dimensions, grid_density: int) -> CuboidMesh:
    """Cuboid mesh with an n-per-edge regular vertex grid on every face.

    Vertices are the surface points of the n^3 lattice over the box (shared
    edge/corner points appear once).  Faces are the 12 hull triangles, two per
    side, with outward CCW winding; each carries the side's full vertex grid
    as governing-vertex candidates.
    """
    lx, ly, lz = (float(d) for d in dimensions)
    if min(lx, ly, lz) <= 0:
        raise ValueError(f"cuboid dimensions must be positive, got {dimensions}")
    n = int(grid_density)
    if n < 2:
        raise ValueError(f"grid_density must be >= 2, got {grid_density}")

    axes = [np.linspace(-lx / 2, lx / 2, n), np.linspace(-ly / 2, ly / 2, n), np.linspace(-lz / 2, lz / 2, n)]
    index = {}
    verts = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                on_surface = i in (0, n - 1) or j in (0, n - 1) or k in (0, n - 1)
                if on_surface:
                    index[(i, j, k)] = len(verts)
                    verts.append((axes[0][i], axes[1][j], axes[2][k]))

    # (fixed axis, grid position, u axis, v axis) chosen so that u x v points
    # outward, giving CCW triangles seen from outside the box.
    sides = [
        (0, n - 1, 1, 2),  # +x: u=y, v=z
        (0, 0, 2, 1),  # -x: u=z, v=y
        (1, n - 1, 2, 0),  # +y: u=z, v=x
        (1, 0, 0, 2),  # -y: u=x, v=z
        (2, n - 1, 0, 1),  # +z: u=x, v=y
        (2, 0, 1, 0),  # -z: u=y, v=x
    ]
    faces = []
    candidates = []
    for axis, pos, ua, va in sides:
        def vid(u, v):
            ijk = [0, 0, 0]
            ijk[axis] = pos
            ijk[ua] = u
            ijk[va] = v
            return index[tuple(ijk)]

        side_grid = [vid(u, v) for u in range(n) for v in range(n)]
        p00, p10 = vid(0, 0), vid(n - 1, 0)
        p11, p01 = vid(n - 1, n - 1), vid(0, n - 1)
        faces.append((p00, p10, p11))
        faces.append((p00, p11, p01))
        candidates.append(side_grid)
        candidates.append(side_grid)

    return CuboidMesh(
        dimensions=(lx, ly, lz),
        grid_density=n,
        vertices=np.array(verts, dtype=float),
        faces=np.array(faces, dtype=np.int32),
        face_candidates=np.array(candidates, dtype=np.int32),
    )


def transform_to_camera(points: np.ndarray, pose: Pose) -> np.ndarray:
    """World points (N, 3) -> camera-frame points (N, 3)."""
    r = pose_to_rotation(pose)
    out = np.asarray(points, dtype=float) @ r.T
    out[:, 2] += pose.distance
    return out


def project_points(points: np.ndarray, pose: Pose, camera: Camera):
    """Project world points; returns ((N, 2) pixel coords (u, v), (N,) camera z)."""
    cam = transform_to_camera(points, pose)
    z = cam[:, 2]
    zs = np.where(np.abs(z) < _Z_NEAR, _Z_NEAR, z)
    cx, cy = camera.principal_point
    u = cx + camera.focal_length * cam[:, 0] / zs
    v = cy + camera.focal_length * cam[:, 1] / zs
    return np.stack([u, v], axis=1), z


def _rotation_derivatives(pose: Pose):
    """dR/d(azimuth), dR/d(elevation), dR/d(theta) for the fixed composition."""
    a, e, t = pose.azimuth, pose.elevation, pose.theta
    rx, ry, rz = rotation_x(e), rotation_y(-a), rotation_z(t)
    ca, sa = math.cos(-a), math.sin(-a)
    # d/da Ry(-a) = Ry'(-a) * (-1)
    dry = -np.array([[-sa, 0.0, ca], [0.0, 0.0, 0.0], [-ca, 0.0, -sa]])
    ce, se = math.cos(e), math.sin(e)
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -se, -ce], [0.0, ce, -se]])
    ct, st = math.cos(t), math.sin(t)
    drz = np.array([[-st, -ct, 0.0], [ct, -st, 0.0], [0.0, 0.0, 0.0]])
    da = rz @ _V0 @ rx @ dry
    de = rz @ _V0 @ drx @ ry
    dt = drz @ _V0 @ rx @ ry
    return da, de, dt


def project_points_with_jacobian(points: np.ndarray, pose: Pose, camera: Camera):
    """Projection plus the (N, 2, 4) Jacobian of (u, v) w.r.t. (a, e, theta, d).

    Smooth in the pose; used by the frozen-correspondence pose gradient.
    """
    pts = np.asarray(points, dtype=float)
    r = pose_to_rotation(pose)
    cam = pts @ r.T
    cam[:, 2] += pose.distance
    z = cam[:, 2]
    zs = np.where(np.abs(z) < _Z_NEAR, _Z_NEAR, z)
    cx, cy = camera.principal_point
    f = camera.focal_length
    u = cx + f * cam[:, 0] / zs
    v = cy + f * cam[:, 1] / zs

    da, de, dt = _rotation_derivatives(pose)
    # d(p_cam)/d(param): (N, 3) each; distance moves only z.
    dcam = np.empty((pts.shape[0], 3, 4))
    dcam[:, :, 0] = pts @ da.T
    dcam[:, :, 1] = pts @ de.T
    dcam[:, :, 2] = pts @ dt.T
    dcam[:, :, 3] = np.array([0.0, 0.0, 1.0])

    jac = np.empty((pts.shape[0], 2, 4))
    inv_z = 1.0 / zs
    # du/dm = f (x_m z - x z_m) / z^2, likewise for v.
    jac[:, 0, :] = f * (dcam[:, 0, :] * inv_z[:, None] - cam[:, 0, None] * dcam[:, 2, :] * (inv_z**2)[:, None])
    jac[:, 1, :] = f * (dcam[:, 1, :] * inv_z[:, None] - cam[:, 1, None] * dcam[:, 2, :] * (inv_z**2)[:, None])
    return np.stack([u, v], axis=1), z, jac


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------

# Image area at or below which the dense (all triangles x all pixels) path is
# used; above it the per-triangle bounding-box path wins.
_DENSE_PIXEL_LIMIT = 4096


def rasterize(mesh, pose: Pose, camera: Camera) -> RenderResult:
    """Z-buffered triangle rasterization of ``mesh`` (needs .vertices/.faces).

    Every covered pixel is assigned the nearest (in 3D) candidate vertex of
    its front-most triangle (the triangle's corners unless the mesh carries a
    ``face_candidates`` table, see :class:`CuboidMesh`).  A vertex is visible
    iff its rounded projection lands on a covered pixel whose depth is within
    DEPTH_TOLERANCE_SCALE * distance of the vertex depth.  Triangles with any
    vertex behind the near plane and degenerate (zero-area) projections are
    skipped.
    """
    candidates = getattr(mesh, "face_candidates", None)
    h, w = camera.image_size
    if h * w <= _DENSE_PIXEL_LIMIT:
        batch = render_batch(mesh.vertices, mesh.faces, [pose], camera, candidates)
        return RenderResult(
            foreground_mask=batch.foreground_mask[0],
            vertex_visible=batch.vertex_visible[0],
            vertex_pixel=batch.vertex_pixel[0],
            pixel_vertex=batch.pixel_vertex[0],
            depth=batch.depth[0],
            pixel_face=batch.pixel_face[0],
        )
    return _rasterize_bbox(mesh.vertices, mesh.faces, pose, camera, candidates)


def _nearest_candidate(cam_pts, cand, px):
    """Nearest candidate vertex per pixel.

    cam_pts: (R, 3) camera-space vertices; cand: (K, C) candidate ids with -1
    padding; px: (K, 3) backprojected pixel points.  Returns (K,) vertex ids.
    """
    safe = np.maximum(cand, 0)
    d2 = np.sum((cam_pts[safe] - px[:, None, :]) ** 2, axis=2)
    d2[cand < 0] = np.inf
    pick = np.argmin(d2, axis=1)
    return cand[np.arange(cand.shape[0]), pick]


def _surface_depth_at(tri_uv, tri_z, usable, pts):
    """Front-most interpolated surface depth at continuous image points.

    tri_uv (..., F, 3, 2), tri_z (..., F, 3), usable (..., F), pts (..., N, 2).
    Leading batch axes must match.  Returns (..., N) depth, +inf where no
    usable triangle contains the point.
    """
    e1 = tri_uv[..., 1, :] - tri_uv[..., 0, :]
    e2 = tri_uv[..., 2, :] - tri_uv[..., 0, :]
    den = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    inv_den = np.where(usable, 1.0 / np.where(usable, den, 1.0), 0.0)

    qx = pts[..., None, :, 0] - tri_uv[..., 0, 0][..., None]  # (..., F, N)
    qy = pts[..., None, :, 1] - tri_uv[..., 0, 1][..., None]
    l1 = (qx * e2[..., 1][..., None] - qy * e2[..., 0][..., None]) * inv_den[..., None]
    l2 = (e1[..., 0][..., None] * qy - e1[..., 1][..., None] * qx) * inv_den[..., None]
    l0 = 1.0 - l1 - l2
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0) & usable[..., None]
    inv_z = l0 / tri_z[..., 0][..., None] + l1 / tri_z[..., 1][..., None] + l2 / tri_z[..., 2][..., None]
    inv_z = np.where(inside, inv_z, -np.inf)
    best = np.max(inv_z, axis=-2)
    return np.where(best > 0, 1.0 / np.where(best > 0, best, 1.0), np.inf)


def _finalize_visibility(uv, z, mask, surface_z, pose, camera):
    """Vertex visibility: rounded pixel is foreground and the vertex depth is
    within tolerance of the front-most surface depth at its exact projection
    (exact for the vertex's own face plane, so slanted faces do not
    self-occlude their vertices)."""
    h, w = camera.image_size
    cols = np.rint(uv[:, 0]).astype(np.int64)
    rows = np.rint(uv[:, 1]).astype(np.int64)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w) & (z > _Z_NEAR)
    rows_c = np.clip(rows, 0, h - 1)
    cols_c = np.clip(cols, 0, w - 1)
    eps = DEPTH_TOLERANCE_SCALE * pose.distance
    visible = inside & mask[rows_c, cols_c] & (z <= surface_z + eps)
    vertex_pixel = np.full((uv.shape[0], 2), -1, dtype=np.int32)
    vertex_pixel[visible, 0] = rows[visible]
    vertex_pixel[visible, 1] = cols[visible]
    return visible, vertex_pixel


def _rasterize_bbox(vertices, faces, pose: Pose, camera: Camera, candidates=None) -> RenderResult:
    h, w = camera.image_size
    faces = np.asarray(faces, dtype=np.int64)
    if candidates is None:
        candidates = faces
    candidates = np.asarray(candidates, dtype=np.int64)
    uv, z = project_points(vertices, pose, camera)
    cam = transform_to_camera(vertices, pose)

    depth = np.full((h, w), np.inf)
    pixel_vertex = np.full((h, w), -1, dtype=np.int32)
    pixel_face = np.full((h, w), -1, dtype=np.int32)

    tri_uv = uv[faces]  # (F, 3, 2)
    tri_z = z[faces]  # (F, 3)
    front = np.all(tri_z > _Z_NEAR, axis=1)
    e1 = tri_uv[:, 1] - tri_uv[:, 0]
    e2 = tri_uv[:, 2] - tri_uv[:, 0]
    den = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    usable = front & (np.abs(den) > _DEGENERATE_AREA)

    for fi in np.nonzero(usable)[0]:
        p = tri_uv[fi]
        c0 = max(0, int(math.ceil(p[:, 0].min())))
        c1 = min(w - 1, int(math.floor(p[:, 0].max())))
        r0 = max(0, int(math.ceil(p[:, 1].min())))
        r1 = min(h - 1, int(math.floor(p[:, 1].max())))
        if c0 > c1 or r0 > r1:
            continue
        cs, rs = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        qx = cs - p[0, 0]
        qy = rs - p[0, 1]
        inv_den = 1.0 / den[fi]
        l1 = (qx * e2[fi, 1] - qy * e2[fi, 0]) * inv_den
        l2 = (e1[fi, 0] * qy - e1[fi, 1] * qx) * inv_den
        l0 = 1.0 - l1 - l2
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        iz = l0 / tri_z[fi, 0] + l1 / tri_z[fi, 1] + l2 / tri_z[fi, 2]
        zq = 1.0 / iz
        closer = inside & (zq < depth[r0 : r1 + 1, c0 : c1 + 1])
        if not closer.any():
            continue
        sub = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        depth[sub] = np.where(closer, zq, depth[sub])
        pixel_face[sub] = np.where(closer, fi, pixel_face[sub])

    mask = pixel_face >= 0
    if mask.any():
        rows, cols = np.nonzero(mask)
        zs = depth[rows, cols]
        cx, cy = camera.principal_point
        f = camera.focal_length
        px = np.stack([(cols - cx) * zs / f, (rows - cy) * zs / f, zs], axis=1)
        cand = candidates[pixel_face[rows, cols]]  # (K, C)
        pixel_vertex[rows, cols] = _nearest_candidate(cam, cand, px).astype(np.int32)

    tri_front = np.all(tri_z > _Z_NEAR, axis=1)
    tri_usable = tri_front & (np.abs(den) > _DEGENERATE_AREA)
    surface_z = _surface_depth_at(tri_uv, tri_z, tri_usable, uv)
    visible, vertex_pixel = _finalize_visibility(uv, z, mask, surface_z, pose, camera)
    return RenderResult(
        foreground_mask=mask,
        vertex_visible=visible,
        vertex_pixel=vertex_pixel,
        pixel_vertex=pixel_vertex,
        depth=depth,
        pixel_face=pixel_face,
    )


@dataclass
class RenderBatch:
    """Per-pose stacked render results (dense path, small grids)."""

    foreground_mask: np.ndarray  # (P, H, W) bool
    vertex_visible: np.ndarray  # (P, R) bool
    vertex_pixel: np.ndarray  # (P, R, 2) int32
    pixel_vertex: np.ndarray  # (P, H, W) int32
    depth: np.ndarray  # (P, H, W) float64
    pixel_face: np.ndarray  # (P, H, W) int32
    vertex_uv: np.ndarray  # (P, R, 2) float64, continuous projections
    vertex_z: np.ndarray  # (P, R) float64


def render_batch(vertices, faces, poses, camera: Camera, candidates=None) -> RenderBatch:
    """Rasterize one mesh under many poses at once (all-pairs, small images).

    Identical semantics to :func:`rasterize`; vectorized over poses for the
    render-and-compare inner loop.
    """
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    if candidates is None:
        candidates = faces
    candidates = np.asarray(candidates, dtype=np.int64)
    n_poses = len(poses)
    h, w = camera.image_size
    n_verts = vertices.shape[0]

    rots = np.stack([pose_to_rotation(p) for p in poses])  # (P, 3, 3)
    dists = np.array([p.distance for p in poses])
    cam = np.einsum("pij,rj->pri", rots, vertices)
    cam[:, :, 2] += dists[:, None]
    z = cam[:, :, 2]  # (P, R)
    zs = np.where(np.abs(z) < _Z_NEAR, _Z_NEAR, z)
    cx, cy = camera.principal_point
    f = camera.focal_length
    uv = np.empty((n_poses, n_verts, 2))
    uv[:, :, 0] = cx + f * cam[:, :, 0] / zs
    uv[:, :, 1] = cy + f * cam[:, :, 1] / zs

    tri_uv = uv[:, faces]  # (P, F, 3, 2)
    tri_z = z[:, faces]  # (P, F, 3)
    front = np.all(tri_z > _Z_NEAR, axis=2)
    e1 = tri_uv[:, :, 1] - tri_uv[:, :, 0]
    e2 = tri_uv[:, :, 2] - tri_uv[:, :, 0]
    den = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]  # (P, F)
    usable = front & (np.abs(den) > _DEGENERATE_AREA)
    inv_den = np.where(usable, 1.0 / np.where(usable, den, 1.0), 0.0)

    grid_c, grid_r = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    qc = grid_c.ravel()
    qr = grid_r.ravel()

    qx = qc[None, None, :] - tri_uv[:, :, 0, 0][..., None]  # (P, F, Q)
    qy = qr[None, None, :] - tri_uv[:, :, 0, 1][..., None]
    l1 = (qx * e2[..., 1][..., None] - qy * e2[..., 0][..., None]) * inv_den[..., None]
    l2 = (e1[..., 0][..., None] * qy - e1[..., 1][..., None] * qx) * inv_den[..., None]
    l0 = 1.0 - l1 - l2
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0) & usable[..., None]

    inv_z = l0 / tri_z[:, :, 0][..., None] + l1 / tri_z[:, :, 1][..., None] + l2 / tri_z[:, :, 2][..., None]
    inv_z = np.where(inside, inv_z, -np.inf)
    best_face = np.argmax(inv_z, axis=1)  # (P, Q): nearest (max 1/z) face
    best_iz = np.take_along_axis(inv_z, best_face[:, None, :], axis=1)[:, 0, :]
    covered = best_iz > 0

    depth_flat = np.where(covered, 1.0 / np.where(covered, best_iz, 1.0), np.inf)

    # Governing vertex per covered pixel: nearest candidate of the front face.
    pose_idx, cell_idx = np.nonzero(covered)
    pixel_vertex_flat = np.full((n_poses, h * w), -1, dtype=np.int32)
    pixel_face_flat = np.full((n_poses, h * w), -1, dtype=np.int32)
    if pose_idx.size:
        zq = depth_flat[pose_idx, cell_idx]
        px = np.stack(
            [(qc[cell_idx] - cx) * zq / f, (qr[cell_idx] - cy) * zq / f, zq], axis=1
        )  # (K, 3)
        win = best_face[pose_idx, cell_idx]
        cand = candidates[win]  # (K, C)
        safe = np.maximum(cand, 0)
        d2 = np.sum((cam[pose_idx[:, None], safe] - px[:, None, :]) ** 2, axis=2)
        d2[cand < 0] = np.inf
        pick = np.argmin(d2, axis=1)
        pixel_vertex_flat[pose_idx, cell_idx] = cand[np.arange(cand.shape[0]), pick].astype(np.int32)
        pixel_face_flat[pose_idx, cell_idx] = win.astype(np.int32)

    mask = covered.reshape(n_poses, h, w)
    depth = depth_flat.reshape(n_poses, h, w)
    pixel_vertex = pixel_vertex_flat.reshape(n_poses, h, w)
    pixel_face = pixel_face_flat.reshape(n_poses, h, w)

    # Vertex visibility: rounded pixel covered and vertex depth within
    # tolerance of the front-most surface depth at its exact projection.
    cols = np.rint(uv[..., 0]).astype(np.int64)  # (P, R)
    rows = np.rint(uv[..., 1]).astype(np.int64)
    in_img = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w) & (z > _Z_NEAR)
    rows_c = np.clip(rows, 0, h - 1)
    cols_c = np.clip(cols, 0, w - 1)
    flat = rows_c * w + cols_c
    mask_at = np.take_along_axis(covered, flat, axis=1)
    surface_z = _surface_depth_at(tri_uv, tri_z, usable, uv)  # (P, R)
    eps = (DEPTH_TOLERANCE_SCALE * dists)[:, None]
    vertex_visible = in_img & mask_at & (z <= surface_z + eps)
    vertex_pixel = np.full((n_poses, n_verts, 2), -1, dtype=np.int32)
    vertex_pixel[..., 0] = np.where(vertex_visible, rows, -1)
    vertex_pixel[..., 1] = np.where(vertex_visible, cols, -1)

    return RenderBatch(
        foreground_mask=mask,
        vertex_visible=vertex_visible,
        vertex_pixel=vertex_pixel,
        pixel_vertex=pixel_vertex,
        depth=depth,
        pixel_face=pixel_face,
        vertex_uv=uv,
        vertex_z=z,
    )
