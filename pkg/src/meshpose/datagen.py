"""Procedural synthetic scene generation.

Renders box-composite objects with seeded value-noise textures over
procedural backgrounds under sampled viewpoints, composites them through the
rasterizer's foreground mask, and supports OOD-aware (category-independent)
versus spuriously category-correlated background selection.  Also provides
the domain-shift transform used to build the shifted-domain pools, a Canny
edge-map operator, and the declared style-transfer extension point.

Every sample is a pure function of (master_seed, category, index): poses are
rounded to six decimals before rendering so that a sample can be re-rendered
exactly from its stored metadata.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .geometry import Camera, Pose, _rasterize_bbox, build_cuboid

_TWO_PI = 2.0 * math.pi

# Composite shapes: (dimensions, center offset) per box part, in scene units.
# x = length, y = up, z = width.  Small z-offsets keep every silhouette
# mirror-asymmetric, so left/right views stay distinguishable.
_CATEGORY_PARTS = {
    "car": (
        ((1.6, 0.5, 0.78), (0.0, -0.12, 0.0)),
        ((0.85, 0.42, 0.66), (-0.12, 0.3, 0.06)),
        ((0.35, 0.2, 0.3), (0.75, -0.05, -0.2)),
    ),
    "plane": (
        ((1.75, 0.3, 0.34), (0.0, 0.0, 0.0)),
        ((0.62, 0.09, 1.9), (0.12, 0.05, 0.12)),
        ((0.42, 0.5, 0.1), (-0.72, 0.25, -0.08)),
    ),
    "truck": (
        ((1.15, 0.6, 0.8), (0.3, 0.0, 0.0)),
        ((0.5, 0.85, 0.72), (-0.6, 0.12, 0.08)),
    ),
}


def category_names():
    return sorted(_CATEGORY_PARTS)


def category_bounding_box(category: str):
    """Axis-aligned bounding box (lx, ly, lz) of the composite, centered at origin."""
    parts = _category_parts(category)
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for dims, off in parts:
        dims = np.asarray(dims)
        off = np.asarray(off)
        lo = np.minimum(lo, off - dims / 2)
        hi = np.maximum(hi, off + dims / 2)
    size = hi - lo
    return tuple(float(s) for s in size)


def _category_parts(category: str):
    try:
        return _CATEGORY_PARTS[category]
    except KeyError:
        raise ValueError(f"unknown category {category!r}; known: {category_names()}") from None


@dataclass(frozen=True)
class _CompositeMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_candidates: np.ndarray
    face_normals: np.ndarray  # (F, 3) outward unit normals, object space
    vertex_part: np.ndarray  # (R,) part index


@lru_cache(maxsize=32)
def _composite_mesh(category: str, grid_density: int = 4) -> _CompositeMesh:
    verts, faces, cands, normals, parts = [], [], [], [], []
    offset = 0
    for part_idx, (dims, center) in enumerate(_category_parts(category)):
        box = build_cuboid(dims, grid_density)
        verts.append(box.vertices + np.asarray(center))
        faces.append(box.faces + offset)
        cands.append(box.face_candidates + offset)
        v = box.vertices
        f = box.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        normals.append(n / np.linalg.norm(n, axis=1, keepdims=True))
        parts.append(np.full(box.num_vertices, part_idx))
        offset += box.num_vertices
    return _CompositeMesh(
        vertices=np.concatenate(verts),
        faces=np.concatenate(faces),
        face_candidates=np.concatenate(cands),
        face_normals=np.concatenate(normals),
        vertex_part=np.concatenate(parts),
    )


# --------------------------------------------------------------------------
# Seeded procedural textures
# --------------------------------------------------------------------------


def derive_seed(master_seed: int, category: str, index: int) -> int:
    """Stable 64-bit per-sample seed from (master seed, category, index)."""
    digest = hashlib.sha256(f"{master_seed}:{category}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _lattice_noise_3d(points: np.ndarray, seed: int, scale: float, lattice: int = 7) -> np.ndarray:
    """Trilinear value noise in [0, 1] over a wrapped random lattice."""
    rng = np.random.default_rng(seed)
    table = rng.uniform(size=(lattice, lattice, lattice))
    q = points * scale
    base = np.floor(q).astype(np.int64)
    frac = q - base
    out = np.zeros(len(points))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = (base + [dx, dy, dz]) % lattice
                wgt = (
                    (frac[:, 0] if dx else 1 - frac[:, 0])
                    * (frac[:, 1] if dy else 1 - frac[:, 1])
                    * (frac[:, 2] if dz else 1 - frac[:, 2])
                )
                out += wgt * table[idx[:, 0], idx[:, 1], idx[:, 2]]
    return out


def _lattice_noise_2d(shape, seed: int, scale: float, lattice: int = 9) -> np.ndarray:
    rng = np.random.default_rng(seed)
    table = rng.uniform(size=(lattice, lattice))
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    q = np.stack([rows, cols], axis=-1) * scale
    base = np.floor(q).astype(np.int64)
    frac = q - base
    out = np.zeros(shape)
    for dr in (0, 1):
        for dc in (0, 1):
            idx = (base + [dr, dc]) % lattice
            wgt = (frac[..., 0] if dr else 1 - frac[..., 0]) * (frac[..., 1] if dc else 1 - frac[..., 1])
            out += wgt * table[idx[..., 0], idx[..., 1]]
    return out


def _palette(seed: int, spread: float = 0.8):
    rng = np.random.default_rng(seed)
    c0 = rng.uniform(0.08, 0.92, size=3)
    c1 = np.clip(c0 + rng.uniform(-spread, spread, size=3), 0.02, 0.98)
    return c0, c1


_TEXTURE_TAG = 0x5445
_BACKGROUND_TAG = 0x4247
_LIGHT_TAG = 0x4C54
_SHIFT_TAG = 0x5348


def object_texture(points: np.ndarray, texture_id: int) -> np.ndarray:
    """Two-octave 3D value noise mapped through a per-texture palette."""
    seed = _TEXTURE_TAG * 1_000_003 + texture_id
    n = 0.65 * _lattice_noise_3d(points, seed, scale=2.3) + 0.35 * _lattice_noise_3d(points, seed + 1, scale=6.1)
    c0, c1 = _palette(seed + 2)
    return c0 + np.clip(n, 0, 1)[:, None] * (c1 - c0)


def background_image(background_id: int, image_size) -> np.ndarray:
    """Procedural full-frame background for a pool id."""
    seed = _BACKGROUND_TAG * 1_000_003 + background_id
    n1 = _lattice_noise_2d(image_size, seed, scale=0.045)
    n2 = _lattice_noise_2d(image_size, seed + 1, scale=0.16)
    n = np.clip(0.6 * n1 + 0.4 * n2, 0, 1)
    c0, c1 = _palette(seed + 2, spread=0.9)
    return (c0 + n[..., None] * (c1 - c0)).astype(float)


# --------------------------------------------------------------------------
# Scene samples
# --------------------------------------------------------------------------


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    pose: Pose
    camera: Camera
    category: str
    texture_id: int
    background_id: int
    domain_tag: str  # "synthetic" | "shifted"
    seed: int
    sample_id: str = ""


@dataclass(frozen=True)
class GeneratorConfig:
    samples_per_category: int
    azimuth_range: tuple = (0.0, _TWO_PI)
    elevation_range: tuple = (math.radians(-10.0), math.radians(60.0))
    inplane_range: tuple = (math.radians(-5.0), math.radians(5.0))
    distance_range: tuple = (2.8, 5.0)
    texture_pool_size: int = 12
    background_pool_size: int = 20
    background_policy: str = "randomized"
    master_seed: int = 0
    image_size: tuple = (96, 96)
    focal_length: float = 140.0

    def __post_init__(self):
        if self.samples_per_category < 0:
            raise ValueError("samples_per_category must be >= 0")
        for name in ("azimuth_range", "elevation_range", "inplane_range", "distance_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.texture_pool_size < 1 or self.background_pool_size < 1:
            raise ValueError("texture/background pools must be nonempty")
        if self.background_policy not in ("randomized", "category_correlated"):
            raise ValueError(f"unknown background_policy {self.background_policy!r}")

    def camera(self) -> Camera:
        return Camera.centered(self.focal_length, tuple(self.image_size))


def _round_pose(az, el, th, d) -> Pose:
    # Poses are rounded before rendering so stored metadata re-renders the
    # exact same image.
    return Pose(round(az % _TWO_PI, 6), round(el, 6), round(th, 6), round(d, 6))


def render_object(category: str, pose: Pose, camera: Camera, texture_id: int, light_dir: np.ndarray):
    """Shaded object layer plus its foreground mask."""
    comp = _composite_mesh(category)
    rr = _rasterize_bbox(comp.vertices, comp.faces, pose, camera, comp.face_candidates)
    h, w = camera.image_size
    img = np.zeros((h, w, 3))
    fg = rr.foreground_mask
    if fg.any():
        rows, cols = np.nonzero(fg)
        zs = rr.depth[rows, cols]
        cx, cy = camera.principal_point
        f = camera.focal_length
        from .geometry import pose_to_rotation

        p_cam = np.stack([(cols - cx) * zs / f, (rows - cy) * zs / f, zs], axis=1)
        r = pose_to_rotation(pose)
        p_obj = (p_cam - np.array([0.0, 0.0, pose.distance])) @ r
        base = object_texture(p_obj, texture_id)
        normals = comp.face_normals[rr.pixel_face[rows, cols]]
        lambert = np.clip(normals @ light_dir, 0.0, 1.0)
        img[rows, cols] = np.clip(base * (0.45 + 0.55 * lambert)[:, None], 0.0, 1.0)
    return img, fg


def _background_subset(policy: str, categories, category: str, pool: int):
    if policy == "randomized":
        return 0, pool
    k = list(categories).index(category)
    n = len(categories)
    width = max(1, pool // n)
    start = k * width
    if k == n - 1:
        width = pool - start
    return start, width


def draw_sample_params(config: GeneratorConfig, categories, category: str, index: int):
    """Metadata of one sample without rendering it (pose, ids, light, seed).

    Fixed draw order: pose, texture, background, light.
    """
    _category_parts(category)
    seed = derive_seed(config.master_seed, category, index)
    rng = np.random.default_rng(seed)
    az = rng.uniform(*config.azimuth_range)
    el = rng.uniform(*config.elevation_range)
    th = rng.uniform(*config.inplane_range)
    d = rng.uniform(*config.distance_range)
    pose = _round_pose(az, el, th, d)
    texture_id = int(rng.integers(config.texture_pool_size))
    bg_start, bg_width = _background_subset(config.background_policy, categories, category, config.background_pool_size)
    background_id = bg_start + int(rng.integers(bg_width))
    light = rng.normal(size=3)
    view_dir = np.array(
        [math.cos(pose.elevation) * math.sin(pose.azimuth), math.sin(pose.elevation), math.cos(pose.elevation) * math.cos(pose.azimuth)]
    )
    light_dir = view_dir + 0.7 * light / np.linalg.norm(light)
    light_dir /= np.linalg.norm(light_dir)
    return {
        "seed": seed,
        "pose": pose,
        "texture_id": texture_id,
        "background_id": background_id,
        "light_dir": light_dir,
    }


def make_sample(config: GeneratorConfig, categories, category: str, index: int) -> SceneSample:
    """Render one deterministic sample (independent of any other sample)."""
    params = draw_sample_params(config, categories, category, index)
    pose = params["pose"]
    texture_id = params["texture_id"]
    background_id = params["background_id"]
    camera = config.camera()

    obj, mask = render_object(category, pose, camera, texture_id, params["light_dir"])
    bg = background_image(background_id, tuple(config.image_size))
    image = np.where(mask[..., None], obj, bg)
    return SceneSample(
        image=image.astype(np.float32),
        pose=pose,
        camera=camera,
        category=category,
        texture_id=texture_id,
        background_id=background_id,
        domain_tag="synthetic",
        seed=params["seed"],
        sample_id=f"{category}/{index:05d}",
    )


def generate_dataset(config: GeneratorConfig, categories):
    """Deterministic stream of samples, category-major then index order."""
    categories = tuple(categories)
    for category in categories:
        _category_parts(category)
    for category in categories:
        for index in range(config.samples_per_category):
            yield make_sample(config, categories, category, index)


def object_mask(sample: SceneSample) -> np.ndarray:
    """Recompute the compositing-time foreground mask from stored metadata."""
    comp = _composite_mesh(sample.category)
    rr = _rasterize_bbox(comp.vertices, comp.faces, sample.pose, sample.camera, comp.face_candidates)
    return rr.foreground_mask


# --------------------------------------------------------------------------
# Domain shift
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ShiftConfig:
    """Synthetic-to-shifted domain transform parameters (all seeded)."""

    recolor: float = 0.35
    brightness: float = 0.22
    contrast: float = 0.3
    noise_sigma: float = 0.02
    swap_background: bool = True
    background_offset: int = 1000
    background_pool_size: int = 12

    @staticmethod
    def none() -> "ShiftConfig":
        return ShiftConfig(recolor=0.0, brightness=0.0, contrast=0.0, noise_sigma=0.0, swap_background=False)


def domain_shift(sample: SceneSample, shift_config: ShiftConfig) -> SceneSample:
    """Shifted-domain copy: recolor, brightness/contrast jitter, background
    swap from a held-out pool, additive noise.  Pose and camera unchanged."""
    if sample.domain_tag != "synthetic":
        raise ValueError(f"domain_shift expects a synthetic sample, got {sample.domain_tag!r}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=sample.seed, spawn_key=(_SHIFT_TAG,)))
    img = np.asarray(sample.image, dtype=float).copy()
    background_id = sample.background_id

    mask = None
    if shift_config.swap_background:
        mask = object_mask(sample)
        background_id = shift_config.background_offset + int(rng.integers(shift_config.background_pool_size))
        bg = background_image(background_id, sample.camera.image_size)
        img = np.where(mask[..., None], img, bg)

    if shift_config.recolor > 0:
        if mask is None:
            mask = object_mask(sample)
        s = shift_config.recolor
        mix = (1 - s) * np.eye(3) + s * rng.dirichlet(np.ones(3) * 2.0, size=3)
        gain = 1.0 + s * rng.uniform(-0.5, 0.5, size=3)
        img[mask] = np.clip(img[mask] @ mix.T * gain, 0.0, 1.0)

    if shift_config.brightness > 0:
        img = img + rng.uniform(-shift_config.brightness, shift_config.brightness)
    if shift_config.contrast > 0:
        img = (img - 0.5) * math.exp(rng.uniform(-shift_config.contrast, shift_config.contrast)) + 0.5
    if shift_config.noise_sigma > 0:
        img = img + rng.normal(scale=shift_config.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    return replace(
        sample,
        image=img.astype(np.float32),
        background_id=background_id,
        domain_tag="shifted",
    )


# --------------------------------------------------------------------------
# Edge maps and the style-transfer extension point
# --------------------------------------------------------------------------


@dataclass
class EdgeMap:
    edges: np.ndarray  # (H, W) bool, one pixel wide after NMS


def canny_edges(image: np.ndarray, low_threshold: float, high_threshold: float, blur_sigma: float = 1.0) -> EdgeMap:
    """Canny pipeline: grayscale, Gaussian blur, Sobel gradients, non-maximum
    suppression along the quantized gradient direction, double-threshold
    hysteresis (weak edges survive only when 8-connected to a strong edge)."""
    if not (0 <= low_threshold < high_threshold):
        raise ValueError(f"need 0 <= low < high, got low={low_threshold} high={high_threshold}")
    img = np.asarray(image, dtype=float)
    gray = img @ np.array([0.299, 0.587, 0.114]) if img.ndim == 3 else img
    smooth = ndimage.gaussian_filter(gray, blur_sigma)

    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    gx = ndimage.convolve(smooth, kx)
    gy = ndimage.convolve(smooth, kx.T)
    mag = np.hypot(gx, gy)
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0

    # Non-maximum suppression against the two neighbors along the gradient.
    h, w = mag.shape
    padded = np.pad(mag, 1)
    shifted = {
        (dr, dc): padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        for dr in (-1, 0, 1)
        for dc in (-1, 0, 1)
    }
    sector = np.zeros_like(mag)
    sector = np.where((angle >= 22.5) & (angle < 67.5), 1, sector)
    sector = np.where((angle >= 67.5) & (angle < 112.5), 2, sector)
    sector = np.where((angle >= 112.5) & (angle < 157.5), 3, sector)
    neighbor_pairs = {0: ((0, 1), (0, -1)), 1: ((-1, 1), (1, -1)), 2: ((-1, 0), (1, 0)), 3: ((-1, -1), (1, 1))}
    keep = np.zeros_like(mag, dtype=bool)
    # Strict comparison on one side breaks plateau ties so ridges stay one
    # pixel wide.
    for s, (n1, n2) in neighbor_pairs.items():
        sel = sector == s
        keep |= sel & (mag > shifted[n1]) & (mag >= shifted[n2])
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high_threshold
    weak = (nms >= low_threshold) & ~strong
    labels, _ = ndimage.label(strong | weak, structure=np.ones((3, 3)))
    keep_labels = np.unique(labels[strong])
    edges = np.isin(labels, keep_labels[keep_labels > 0]) & (strong | weak)
    return EdgeMap(edges=edges)


def style_transfer_stub(edge_map: EdgeMap, prompt: str) -> np.ndarray:
    """Declared extension point standing in for a generative style-transfer
    model.  The default maps the prompt to a hue and returns a deterministic
    colorization of the edge map so the pipeline runs end to end; plugging in
    a real generative model is out of scope by design."""
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    hue = digest[0] / 255.0

    def hsv_to_rgb(hsv_h, s, v):
        i = int(hsv_h * 6.0) % 6
        f = hsv_h * 6.0 - int(hsv_h * 6.0)
        p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
        return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]

    fill = np.array(hsv_to_rgb(hue, 0.45, 0.82))
    stroke = np.array(hsv_to_rgb(hue, 0.85, 0.28))
    h, w = edge_map.edges.shape
    out = np.tile(fill, (h, w, 1))
    out[edge_map.edges] = stroke
    return out
