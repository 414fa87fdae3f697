"""Scikit-learn style facade over the functional training/inference API.

``MeshPoseEstimator`` is a fit/predict estimator: ``fit(images, poses)``
pretrains the feature extractor and neural mesh from annotated images,
``adapt(images)`` runs unsupervised domain adaptation on unlabeled images,
``predict(images)`` returns viewpoint parameters, and ``score`` is the
accuracy at a pi/6 geodesic threshold.  Hyperparameters follow the sklearn
constructor contract, so ``get_params`` / ``set_params`` / ``clone`` work.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .adaptation import TrainConfig, adapt_unsupervised, pretrain_synthetic
from .datagen import SceneSample, category_bounding_box, category_names
from .evaluation import PI_6, pose_accuracy
from .features import extract
from .geometry import Camera, Pose
from .inference import InferenceConfig, infer_pose
from .neuralmesh import NeuralMesh  # noqa: F401 - re-exported for typing convenience


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate an (N, H, W, 3) image stack with values in [0, 1]."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {X.shape}")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[1:3]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < -1e-6 or X.max() > 1 + 1e-6:
        raise ValueError("images must be scaled to [0, 1]")
    return X


def check_poses(y, n: int | None = None) -> np.ndarray:
    """Validate an (N, 4) pose array: azimuth, elevation, theta, distance."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[None]
    if y.ndim != 2 or y.shape[1] != 4:
        raise ValueError(f"expected poses of shape (N, 4), got {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} poses for {n} images")
    if not np.isfinite(y).all():
        raise ValueError("poses contain non-finite values")
    if (y[:, 3] <= 0).any():
        raise ValueError("pose distances must be positive")
    return y


class MeshPoseEstimator(BaseEstimator):
    """Render-and-compare pose estimator for a single object category."""

    def __init__(
        self,
        category: str = "car",
        mesh_dimensions=None,
        focal_length: float = 140.0,
        channels: int = 32,
        stride: int = 8,
        grid_density: int = 5,
        epochs: int = 8,
        batch_size: int = 8,
        learning_rate: float = 2e-3,
        contrastive_weight: float = 1.0,
        momentum: float = 0.1,
        alpha: float = 1.0,
        tau: float = 0.9,
        adaptation_rounds: int = 3,
        adaptation_epochs: int = 2,
        azimuth_starts: int = 12,
        elevation_starts_deg: tuple = (0.0, 30.0),
        max_iterations: int = 30,
        distance_range: tuple = (2.8, 5.0),
        seed: int = 0,
        n_jobs: int = 1,
    ):
        self.category = category
        self.mesh_dimensions = mesh_dimensions
        self.focal_length = focal_length
        self.channels = channels
        self.stride = stride
        self.grid_density = grid_density
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.contrastive_weight = contrastive_weight
        self.momentum = momentum
        self.alpha = alpha
        self.tau = tau
        self.adaptation_rounds = adaptation_rounds
        self.adaptation_epochs = adaptation_epochs
        self.azimuth_starts = azimuth_starts
        self.elevation_starts_deg = elevation_starts_deg
        self.max_iterations = max_iterations
        self.distance_range = distance_range
        self.seed = seed
        self.n_jobs = n_jobs

    # -- internals ----------------------------------------------------------
    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            contrastive_weight=self.contrastive_weight,
            momentum=self.momentum,
            momentum_bg=self.momentum,
            alpha=self.alpha,
            tau=self.tau,
            adapt_rounds=self.adaptation_rounds,
            adapt_epochs=self.adaptation_epochs,
            seed=self.seed,
            channels=self.channels,
            stride=self.stride,
            grid_density=self.grid_density,
        )

    def _inference_config(self) -> InferenceConfig:
        return InferenceConfig(
            azimuth_starts=self.azimuth_starts,
            elevation_starts_deg=tuple(self.elevation_starts_deg),
            max_iterations=self.max_iterations,
            distance_search_range=tuple(self.distance_range),
        )

    def _samples(self, X: np.ndarray, poses, tag: str) -> list:
        camera = Camera.centered(self.focal_length, X.shape[1:3])
        out = []
        for i, img in enumerate(X):
            pose = Pose.from_array(poses[i]) if poses is not None else Pose(0.0, 0.0, 0.0, 1.0)
            out.append(
                SceneSample(
                    image=img.astype(np.float32),
                    pose=pose,
                    camera=camera,
                    category=self.category,
                    texture_id=-1,
                    background_id=-1,
                    domain_tag=tag,
                    seed=i,
                    sample_id=f"{tag}/{i:06d}",
                )
            )
        return out

    # -- estimator API -------------------------------------------------------
    def fit(self, X, y) -> "MeshPoseEstimator":
        """Pretrain from images X (N, H, W, 3) and viewpoint labels y (N, 4)."""
        X = check_images(X)
        y = check_poses(y, n=X.shape[0])
        if self.mesh_dimensions is None and self.category not in category_names():
            raise ValueError(
                f"category {self.category!r} has no built-in shape; pass mesh_dimensions=(lx, ly, lz)"
            )
        cfg = self._train_config()
        if self.mesh_dimensions is not None:
            dims = tuple(self.mesh_dimensions)
        else:
            dims = category_bounding_box(self.category)
        samples = self._samples(X, y, "fit")
        from .adaptation import PoseModel
        from .features import init_extractor
        from .geometry import build_cuboid
        from .neuralmesh import init_mesh

        model = PoseModel(
            extractor=init_extractor(channels=self.channels, stride=self.stride, seed=self.seed),
            meshes={
                self.category: init_mesh(
                    build_cuboid(dims, self.grid_density),
                    self.channels,
                    category=self.category,
                    momentum=self.momentum,
                    seed=self.seed + 1000,
                )
            },
        )
        self.model_ = pretrain_synthetic(samples, cfg, model=model)
        self.camera_ = samples[0].camera
        return self

    def adapt(self, X) -> "MeshPoseEstimator":
        """Unsupervised domain adaptation on unlabeled images."""
        self._check_fitted()
        X = check_images(X)
        samples = self._samples(X, None, "adapt")
        self.model_ = adapt_unsupervised(
            self.model_, samples, self._train_config(), self._inference_config(), parallelism=self.n_jobs
        )
        return self

    def predict(self, X) -> np.ndarray:
        """Viewpoints (N, 4): azimuth, elevation, theta, distance."""
        self._check_fitted()
        X = check_images(X)
        icfg = self._inference_config()
        camera = Camera.centered(self.focal_length, X.shape[1:3])
        mesh = self.model_.meshes[self.category]
        out = np.empty((X.shape[0], 4))
        for i, img in enumerate(X):
            fm = extract(self.model_.extractor, img)
            est = infer_pose(fm, mesh, camera, icfg)
            out[i] = est.pose.as_array()
        return out

    def score(self, X, y) -> float:
        """Accuracy at the pi/6 geodesic rotation threshold."""
        y = check_poses(y)
        preds = self.predict(X)
        return pose_accuracy(
            [Pose.from_array(p) for p in preds], [Pose.from_array(g) for g in y], PI_6
        )

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise AttributeError("this MeshPoseEstimator instance is not fitted yet; call fit first")
