"""Feature extraction: unit-norm feature maps from images.

Two extractors share the FeatureMap contract:

* a small trainable convolutional extractor (three 3x3 stages with tanh
  between them, spatial downsampling to the configured stride, per-cell L2
  normalization) with exact reverse-mode gradients, and
* an oracle extractor that renders a neural mesh's own vertex features into a
  feature map (plus noise), so the true pose is a known global optimum in
  verification tests.

The trainable architecture is fixed: four 5x5 convolutions (3 -> 16 -> 32 ->
48 -> channels) with tanh between them, per-stage strides multiplying to the
configured overall stride.  The 61-pixel receptive field lets a cell see most
of a desk-scale object, which feature-to-vertex matching needs.  Feature cell
(i, j) is centered on image pixel (stride*i, stride*j).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .geometry import Camera, Pose, rasterize

_HIDDEN = (16, 32, 48)
_KERNEL = 5
_NORM_EPS = 1e-12


@dataclass
class FeatureMap:
    """H_f x W_f grid of c-dimensional unit-norm feature vectors."""

    grid: np.ndarray  # (Hf, Wf, c)
    stride: int
    foreground_mask: np.ndarray | None = None  # (Hf, Wf) bool, training only

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class ExtractorParams:
    """Weights/biases of the trainable extractor (also reused as a gradient
    container of identical shapes)."""

    weights: list = field(default_factory=list)  # (3, 3, cin, cout) each
    biases: list = field(default_factory=list)  # (cout,) each
    strides: tuple = (2, 2, 2)

    @property
    def channels(self) -> int:
        return self.weights[-1].shape[-1]

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    def zeros_like(self) -> "ExtractorParams":
        return ExtractorParams(
            weights=[np.zeros_like(w) for w in self.weights],
            biases=[np.zeros_like(b) for b in self.biases],
            strides=self.strides,
        )

    def copy(self) -> "ExtractorParams":
        return ExtractorParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            strides=self.strides,
        )

    def flat_arrays(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"w{i}", w
            yield f"b{i}", b


def _stage_strides(stride: int) -> tuple:
    table = {1: (1, 1, 1, 1), 2: (2, 1, 1, 1), 4: (2, 2, 1, 1), 8: (2, 2, 2, 1)}
    if stride not in table:
        raise ValueError(f"stride must be one of {sorted(table)}, got {stride}")
    return table[stride]


def init_extractor(channels: int = 32, stride: int = 8, seed: int = 0) -> ExtractorParams:
    """Seeded Glorot-style initialization of the fixed architecture."""
    rng = np.random.default_rng(seed)
    dims = (3,) + _HIDDEN + (channels,)
    weights, biases = [], []
    for cin, cout in zip(dims[:-1], dims[1:]):
        scale = math.sqrt(2.0 / (_KERNEL * _KERNEL * cin + cout))
        weights.append(rng.normal(scale=scale, size=(_KERNEL, _KERNEL, cin, cout)))
        biases.append(np.zeros(cout))
    return ExtractorParams(weights=weights, biases=biases, strides=_stage_strides(stride))


def _conv_forward(x, w, b, stride):
    """kxk same-padding strided convolution as per-offset matmuls.

    ``x`` is (B, H, W, Cin); the batch axis rides along the flattened GEMM.
    """
    nb, h, wd, cin = x.shape
    k = w.shape[0]
    pad = k // 2
    cout = w.shape[-1]
    ho = -(-h // stride)
    wo = -(-wd // stride)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    y = np.tile(b, (nb * ho * wo, 1))
    for i in range(k):
        for j in range(k):
            sl = xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]
            y += sl.reshape(nb * ho * wo, cin) @ w[i, j]
    return y.reshape(nb, ho, wo, cout), (xp, (h, wd, cin), (ho, wo), stride)


def _conv_backward(dy, w, cache):
    xp, (h, wd, cin), (ho, wo), stride = cache
    k = w.shape[0]
    pad = k // 2
    nb = dy.shape[0]
    cout = dy.shape[-1]
    dy_flat = dy.reshape(nb * ho * wo, cout)
    dw = np.empty_like(w)
    db = dy_flat.sum(axis=0)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            sl = xp[:, rows, cols, :].reshape(nb * ho * wo, cin)
            dw[i, j] = sl.T @ dy_flat
            dxp[:, rows, cols, :] += (dy_flat @ w[i, j].T).reshape(nb, ho, wo, cin)
    return dw, db, dxp[:, pad:-pad, pad:-pad, :]


def unit_normalize(grid: np.ndarray) -> np.ndarray:
    """L2-normalize the last axis (safe at zero)."""
    norms = np.linalg.norm(grid, axis=-1, keepdims=True)
    return grid / np.maximum(norms, _NORM_EPS)


def _forward(params: ExtractorParams, image: np.ndarray):
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ValueError(f"image {image.shape[:2]} too small for stride {params.stride}")
    caches = []
    x = image
    n_stages = len(params.weights)
    for k, (w, b, s) in enumerate(zip(params.weights, params.biases, params.strides)):
        y, cache = _conv_forward(x, w, b, s)
        if k < n_stages - 1:
            act = np.tanh(y)
        else:
            act = y
        caches.append((cache, act))
        x = act
    pre = x
    norms = np.maximum(np.linalg.norm(pre, axis=-1, keepdims=True), _NORM_EPS)
    grid = pre / norms
    return grid, (caches, pre, norms)


def extract(params: ExtractorParams, image: np.ndarray) -> FeatureMap:
    """Deterministic forward pass; every output cell is unit-norm."""
    grid, _ = _forward(params, image)
    return FeatureMap(grid=grid, stride=params.stride)


def extract_gradients(params: ExtractorParams, image: np.ndarray, upstream_grad: np.ndarray) -> ExtractorParams:
    """Exact reverse-mode parameter gradients through normalization and convs.

    ``upstream_grad`` is dLoss/dFeatureMap of shape (Hf, Wf, c).
    """
    grid, (caches, pre, norms) = _forward(params, image)
    upstream = np.asarray(upstream_grad, dtype=float)
    if upstream.shape != grid.shape:
        raise ValueError(f"upstream gradient shape {upstream.shape} != output shape {grid.shape}")

    # d/dv of v/||v||: (g - f <f, g>) / ||v||
    inner = np.sum(grid * upstream, axis=-1, keepdims=True)
    dpre = (upstream - grid * inner) / norms

    grads = params.zeros_like()
    dy = dpre
    n_stages = len(params.weights)
    for k in range(n_stages - 1, -1, -1):
        cache, act = caches[k]
        if k < n_stages - 1:
            dy = dy * (1.0 - act**2)
        dw, db, dy = _conv_backward(dy, params.weights[k], cache)
        grads.weights[k] = dw
        grads.biases[k] = db
    return grads


class Adam:
    """Adam on an ExtractorParams pytree; deterministic, single-writer."""

    def __init__(self, params: ExtractorParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, grads: ExtractorParams, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for target, g, m, v in zip(
            list(self.params.weights) + list(self.params.biases),
            list(grads.weights) + list(grads.biases),
            list(self.m.weights) + list(self.m.biases),
            list(self.v.weights) + list(self.v.biases),
        ):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            target -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def oracle_extract(
    mesh,
    pose: Pose,
    camera: Camera,
    stride: int,
    noise_sigma: float = 0.0,
    background_feature: np.ndarray | None = None,
    seed: int = 0,
) -> FeatureMap:
    """Render a neural mesh's own vertex features into a feature map.

    Foreground cells receive their governing vertex's feature, background
    cells the background feature; isotropic Gaussian noise of scale
    ``noise_sigma`` is added and cells re-normalized.  With zero noise the
    reconstruction loss at the true pose is exactly zero, which makes this the
    verification harness for the pose optimizer.
    """
    bg = mesh.background_feature if background_feature is None else np.asarray(background_feature, dtype=float)
    fcam = camera.for_stride(stride)
    rr = rasterize(mesh.geometry, pose, fcam)
    hf, wf = fcam.image_size
    grid = np.tile(bg, (hf, wf, 1))
    fg = rr.foreground_mask
    if fg.any():
        grid[fg] = mesh.vertex_features[rr.pixel_vertex[fg]]
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        grid = grid + rng.normal(scale=noise_sigma, size=grid.shape)
        grid = unit_normalize(grid)
    return FeatureMap(grid=grid, stride=stride, foreground_mask=fg)


def save_extractor(path, params: ExtractorParams) -> None:
    arrays = dict(params.flat_arrays())
    meta = {"strides": list(params.strides), "n_stages": len(params.weights)}
    checkpoint.save_arrays(path, "extractor", arrays, meta)


def load_extractor(path) -> ExtractorParams:
    arrays, meta = checkpoint.load_arrays(path, expected_kind="extractor")
    n = int(meta["n_stages"])
    return ExtractorParams(
        weights=[arrays[f"w{i}"] for i in range(n)],
        biases=[arrays[f"b{i}"] for i in range(n)],
        strides=tuple(meta["strides"]),
    )
