import math

import numpy as np
import pytest

from meshpose import features as F
from meshpose import geometry as G
from meshpose import losses as L
from meshpose.neuralmesh import init_mesh


@pytest.fixture(scope="module")
def params():
    return F.init_extractor(channels=16, stride=8, seed=7)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(3).uniform(size=(64, 64, 3))


class TestExtract:
    def test_all_cells_unit_norm(self, params):
        rng = np.random.default_rng(0)
        for _ in range(3):
            img = rng.uniform(size=(48, 56, 3))
            fm = F.extract(params, img)
            np.testing.assert_allclose(np.linalg.norm(fm.grid, axis=-1), 1.0, atol=1e-6)

    def test_grid_shape_is_ceil_of_stride(self, params):
        fm = F.extract(params, np.zeros((50, 41, 3)))
        assert fm.grid.shape[:2] == (math.ceil(50 / 8), math.ceil(41 / 8))
        assert fm.stride == 8

    def test_deterministic(self, params, image):
        a = F.extract(params, image)
        b = F.extract(params, image)
        np.testing.assert_array_equal(a.grid, b.grid)

    def test_shift_equivariance_interior(self):
        # Cells whose 61-pixel receptive field avoids both the padding and
        # the newly exposed rows shift by exactly one cell.
        params = F.init_extractor(channels=8, stride=8, seed=2)
        image = np.random.default_rng(9).uniform(size=(96, 96, 3))
        shifted = np.zeros_like(image)
        shifted[8:] = image[:-8]
        a = F.extract(params, image).grid
        b = F.extract(params, shifted).grid
        np.testing.assert_allclose(a[4:8, 4:8], b[5:9, 4:8], atol=1e-9)

    def test_rejects_bad_shapes(self, params):
        with pytest.raises(ValueError):
            F.extract(params, np.zeros((64, 64)))
        with pytest.raises(ValueError):
            F.extract(params, np.zeros((4, 4, 3)))


class TestExtractGradients:
    def test_zero_upstream_gives_zero_gradients(self, params, image):
        fm = F.extract(params, image)
        grads = F.extract_gradients(params, image, np.zeros_like(fm.grid))
        assert all(np.all(w == 0) for w in grads.weights)
        assert all(np.all(b == 0) for b in grads.biases)

    def test_radial_upstream_gives_zero_gradients(self, params, image):
        # The output lives on the unit sphere; an upstream gradient parallel
        # to the output has no tangential component, so nothing flows back.
        fm = F.extract(params, image)
        grads = F.extract_gradients(params, image, fm.grid)
        assert max(np.abs(w).max() for w in grads.weights) < 1e-9

    def test_directional_derivative_matches_finite_differences(self, params, image):
        rng = np.random.default_rng(11)
        fm = F.extract(params, image)
        for trial in range(5):
            upstream = rng.normal(size=fm.grid.shape)
            grads = F.extract_gradients(params, image, upstream)
            direction = params.zeros_like()
            for w in direction.weights:
                w[:] = rng.normal(size=w.shape)
            for b in direction.biases:
                b[:] = rng.normal(size=b.shape)
            analytic = sum(float(np.sum(g * d)) for g, d in zip(grads.weights, direction.weights))
            analytic += sum(float(np.sum(g * d)) for g, d in zip(grads.biases, direction.biases))
            h = 1e-6
            plus, minus = params.copy(), params.copy()
            for w, d in zip(plus.weights, direction.weights):
                w += h * d
            for b, d in zip(plus.biases, direction.biases):
                b += h * d
            for w, d in zip(minus.weights, direction.weights):
                w -= h * d
            for b, d in zip(minus.biases, direction.biases):
                b -= h * d
            f_plus = float(np.sum(F.extract(plus, image).grid * upstream))
            f_minus = float(np.sum(F.extract(minus, image).grid * upstream))
            fd = (f_plus - f_minus) / (2 * h)
            assert abs(analytic - fd) / max(abs(fd), 1e-12) < 1e-3

    def test_shape_mismatch_rejected(self, params, image):
        with pytest.raises(ValueError):
            F.extract_gradients(params, image, np.zeros((3, 3, 16)))


class TestAdam:
    def test_descends_a_quadratic(self):
        params = F.init_extractor(channels=8, stride=8, seed=0)
        target = F.init_extractor(channels=8, stride=8, seed=1)
        opt = F.Adam(params, lr=0.05)

        def loss_and_grad():
            grads = params.zeros_like()
            total = 0.0
            for g, w, t in zip(grads.weights, params.weights, target.weights):
                g[:] = w - t
                total += 0.5 * float(np.sum((w - t) ** 2))
            return total

        first = loss_and_grad()
        for _ in range(50):
            grads = params.zeros_like()
            for g, w, t in zip(grads.weights, params.weights, target.weights):
                g[:] = w - t
            opt.step(grads)
        assert loss_and_grad() < 0.2 * first


@pytest.fixture(scope="module")
def oracle_setup():
    camera = G.Camera.centered(200.0, (128, 128))
    geometry = G.build_cuboid((1.0, 0.7, 0.5), 5)
    mesh = init_mesh(geometry, channels=32, seed=1)
    pose = G.Pose(0.8, 0.3, 0.02, 3.8)
    return camera, mesh, pose


class TestOracleExtract:
    def test_noiseless_foreground_equals_vertex_features(self, oracle_setup):
        camera, mesh, pose = oracle_setup
        fm = F.oracle_extract(mesh, pose, camera, stride=8, noise_sigma=0.0)
        rr = G.rasterize(mesh.geometry, pose, camera.for_stride(8))
        fg = rr.foreground_mask
        np.testing.assert_array_equal(fm.grid[fg], mesh.vertex_features[rr.pixel_vertex[fg]])
        np.testing.assert_array_equal(fm.grid[~fg], np.tile(mesh.background_feature, (int((~fg).sum()), 1)))

    def test_true_pose_is_global_minimum_on_dense_grid(self, oracle_setup):
        camera, mesh, pose = oracle_setup
        fm = F.oracle_extract(mesh, pose, camera, stride=8, noise_sigma=0.0)
        loss_true = L.reconstruction_loss(fm, mesh, pose, camera).total
        assert loss_true == 0.0
        for az in np.linspace(0, 2 * math.pi, 13)[:-1]:
            for el in np.radians([-30.0, 0.0, 30.0, 60.0]):
                other = G.Pose(float(az), float(el), 0.0, pose.distance)
                if G.geodesic_distance(G.pose_to_rotation(other), G.pose_to_rotation(pose)) < 1e-6:
                    continue
                assert L.reconstruction_loss(fm, mesh, other, camera).total > loss_true

    def test_noise_degrades_recovery_monotonically(self, oracle_setup):
        from meshpose.inference import InferenceConfig, infer_pose

        camera, mesh, _ = oracle_setup
        rng = np.random.default_rng(5)
        poses = [
            G.Pose(rng.uniform(0, 2 * math.pi), rng.uniform(0.0, 0.8), 0.0, rng.uniform(3.0, 4.5)) for _ in range(8)
        ]
        config = InferenceConfig(distance_search_range=(2.5, 6.0))
        acc = []
        for sigma in (0.1, 2.0, 4.0):
            errs = []
            for k, pose in enumerate(poses):
                fm = F.oracle_extract(mesh, pose, camera, stride=8, noise_sigma=sigma, seed=100 + k)
                est = infer_pose(fm, mesh, camera, config)
                errs.append(G.geodesic_distance(G.pose_to_rotation(est.pose), G.pose_to_rotation(pose)))
            acc.append(float(np.mean(np.array(errs) < math.pi / 6)))
        assert acc[0] >= acc[1] >= acc[2]
        assert acc[0] > acc[2]

    def test_seeded_noise_is_deterministic(self, oracle_setup):
        camera, mesh, pose = oracle_setup
        a = F.oracle_extract(mesh, pose, camera, stride=8, noise_sigma=0.5, seed=3)
        b = F.oracle_extract(mesh, pose, camera, stride=8, noise_sigma=0.5, seed=3)
        np.testing.assert_array_equal(a.grid, b.grid)


class TestExtractorCheckpoint:
    def test_roundtrip(self, params, tmp_path):
        F.save_extractor(tmp_path / "e.ckpt", params)
        loaded = F.load_extractor(tmp_path / "e.ckpt")
        assert loaded.strides == params.strides
        for a, b in zip(loaded.weights, params.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(loaded.biases, params.biases):
            np.testing.assert_array_equal(a, b)
