"""Feature-level render-and-compare 3D pose estimation with neural mesh models."""

__version__ = "0.1.0"

from .geometry import (
    Camera,
    CuboidMesh,
    Pose,
    RenderResult,
    build_cuboid,
    geodesic_distance,
    pose_to_rotation,
    rasterize,
    rotation_about_axis,
)

__all__ = [
    "Camera",
    "CuboidMesh",
    "Pose",
    "RenderResult",
    "build_cuboid",
    "geodesic_distance",
    "pose_to_rotation",
    "rasterize",
    "rotation_about_axis",
    "__version__",
]
