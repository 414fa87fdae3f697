import math

import numpy as np
import pytest

from meshpose import features as F
from meshpose import geometry as G
from meshpose import losses as L
from meshpose import neuralmesh as NM

CAMERA = G.Camera.centered(200.0, (128, 128))


def make_mesh(seed=1, channels=32):
    return NM.init_mesh(G.build_cuboid((1.0, 0.7, 0.5), 5), channels=channels, seed=seed)


def unit(v):
    return np.asarray(v, dtype=float) / np.linalg.norm(v)


class TestContrastiveLoss:
    def test_identical_features_give_zero(self):
        grid = np.tile(unit([1.0, 2.0, -1.0, 0.5]), (3, 4, 1))
        fm = F.FeatureMap(grid=grid, stride=8)
        fg = np.array([[0, 0], [1, 1], [2, 2]])
        bg = np.array([[0, 1], [1, 0]])
        value, _ = L.contrastive_loss(fm, fg, bg)
        assert value.total == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_pair_is_minus_four(self):
        grid = np.zeros((1, 2, 4))
        grid[0, 0] = unit([1.0, 0, 0, 0])
        grid[0, 1] = -grid[0, 0]
        fm = F.FeatureMap(grid=grid, stride=8)
        value, _ = L.contrastive_loss(fm, np.array([[0, 0]]), np.array([[0, 1]]))
        assert value.total == pytest.approx(-4.0, abs=1e-12)

    def test_matches_brute_force_definition(self):
        rng = np.random.default_rng(0)
        grid = F.unit_normalize(rng.normal(size=(3, 4, 6)))
        fm = F.FeatureMap(grid=grid, stride=8)
        fg = np.array([[0, 0], [0, 1], [1, 2], [2, 3]])
        bg = np.array([[1, 0], [2, 0], [0, 3]])
        value, _ = L.contrastive_loss(fm, fg, bg)
        brute = 0.0
        for i in range(len(fg)):
            for j in range(len(fg)):
                if i != j:
                    brute += np.sum((grid[tuple(fg[i])] - grid[tuple(fg[j])]) ** 2)
            for j in range(len(bg)):
                brute += np.sum((grid[tuple(fg[i])] - grid[tuple(bg[j])]) ** 2)
        assert value.total == pytest.approx(-brute, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        grid = F.unit_normalize(rng.normal(size=(2, 3, 4)))
        fg = np.array([[0, 0], [0, 1], [1, 2]])
        bg = np.array([[1, 0], [1, 1], [0, 2]])
        _, grad = L.contrastive_loss(F.FeatureMap(grid=grid.copy(), stride=8), fg, bg)
        h = 1e-7
        for idx in np.ndindex(grid.shape):
            plus, minus = grid.copy(), grid.copy()
            plus[idx] += h
            minus[idx] -= h
            vp, _ = L.contrastive_loss(F.FeatureMap(grid=plus, stride=8), fg, bg)
            vm, _ = L.contrastive_loss(F.FeatureMap(grid=minus, stride=8), fg, bg)
            fd = (vp.total - vm.total) / (2 * h)
            assert abs(grad[idx] - fd) / max(abs(fd), 1e-6) < 1e-5

    def test_empty_foreground_rejected(self):
        fm = F.FeatureMap(grid=np.zeros((2, 2, 3)), stride=8)
        with pytest.raises(ValueError):
            L.contrastive_loss(fm, np.zeros((0, 2), dtype=int), np.array([[0, 0]]))

    def test_overlapping_sets_rejected(self):
        fm = F.FeatureMap(grid=np.zeros((2, 2, 3)), stride=8)
        with pytest.raises(ValueError):
            L.contrastive_loss(fm, np.array([[0, 0]]), np.array([[0, 0]]))


class TestReconstructionLoss:
    def test_zero_at_true_pose_with_oracle_features(self):
        mesh = make_mesh()
        pose = G.Pose(0.7, 0.25, 0.03, 3.6)
        fm = F.oracle_extract(mesh, pose, CAMERA, stride=8, noise_sigma=0.0)
        value = L.reconstruction_loss(fm, mesh, pose, CAMERA)
        assert value.total == 0.0
        assert value.terms["foreground"] == 0.0

    def test_true_pose_beats_coarse_grid(self):
        mesh = make_mesh(seed=2)
        pose = G.Pose(1.1, 0.35, 0.0, 3.6)
        fm = F.oracle_extract(mesh, pose, CAMERA, stride=8, noise_sigma=0.0)
        best = L.reconstruction_loss(fm, mesh, pose, CAMERA).total
        for az in np.arange(0, 2 * math.pi, math.pi / 6):
            for el in (-math.pi / 6, 0.0, math.pi / 6, math.pi / 3):
                candidate = G.Pose(float(az), float(el), 0.0, 3.6)
                if G.geodesic_distance(G.pose_to_rotation(candidate), G.pose_to_rotation(pose)) < 1e-9:
                    continue
                assert L.reconstruction_loss(fm, mesh, candidate, CAMERA).total > best

    def test_background_cell_permutation_invariance(self):
        mesh = make_mesh(seed=3)
        pose = G.Pose(0.9, 0.3, 0.0, 3.4)
        fm = F.oracle_extract(mesh, pose, CAMERA, stride=8, noise_sigma=0.4, seed=9)
        corr = NM.project_correspondences(mesh, pose, CAMERA, 8)
        base = L.reconstruction_loss(fm, mesh, pose, CAMERA).total
        bg = corr.background_cells()
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(bg))
        grid = fm.grid.copy()
        grid[bg[:, 0], bg[:, 1]] = grid[bg[perm, 0], bg[perm, 1]]
        permuted = L.reconstruction_loss(F.FeatureMap(grid=grid, stride=8), mesh, pose, CAMERA).total
        assert permuted == pytest.approx(base, rel=1e-12)

    def test_empty_render_is_background_only(self):
        import dataclasses

        mesh = make_mesh(seed=4)
        geo = dataclasses.replace(mesh.geometry, vertices=mesh.geometry.vertices + np.array([0.0, 0.0, 100.0]))
        far = dataclasses.replace(mesh, geometry=geo)
        fm = F.oracle_extract(make_mesh(seed=5), G.Pose(0.3, 0.2, 0.0, 3.0), CAMERA, stride=8, noise_sigma=0.2, seed=1)
        value = L.reconstruction_loss(fm, far, G.Pose(0.3, 0.2, 0.0, 3.0), CAMERA)
        assert value.terms["foreground"] == 0.0
        assert value.total == value.terms["background"]

    def test_vertex_relabeling_invariance(self):
        # Consistent permutation of vertices, features, face indices, and
        # candidates leaves the loss unchanged.
        import dataclasses

        mesh = make_mesh(seed=6)
        pose = G.Pose(0.8, 0.4, 0.0, 3.5)
        fm = F.oracle_extract(mesh, pose, CAMERA, stride=8, noise_sigma=0.3, seed=2)
        rng = np.random.default_rng(1)
        perm = rng.permutation(mesh.num_vertices)
        inverse = np.argsort(perm)
        geo = mesh.geometry
        relabeled_geo = dataclasses.replace(
            geo,
            vertices=geo.vertices[perm],
            faces=inverse[geo.faces].astype(np.int32),
            face_candidates=np.where(geo.face_candidates >= 0, inverse[geo.face_candidates], -1).astype(np.int32),
        )
        relabeled = dataclasses.replace(mesh, geometry=relabeled_geo, vertex_features=mesh.vertex_features[perm])
        a = L.reconstruction_loss(fm, mesh, pose, CAMERA).total
        b = L.reconstruction_loss(fm, relabeled, pose, CAMERA).total
        assert b == pytest.approx(a, rel=1e-9)


class TestPoseGradient:
    def test_matches_finite_differences_many_configs(self):
        rng = np.random.default_rng(21)
        mesh = make_mesh(seed=7)
        checked = 0
        while checked < 12:
            pose = G.Pose(rng.uniform(0, 2 * math.pi), rng.uniform(-0.2, 0.8), rng.uniform(-0.1, 0.1), rng.uniform(3.0, 4.5))
            fm = F.oracle_extract(mesh, pose, CAMERA, stride=8, noise_sigma=0.05, seed=checked)
            corr = NM.project_correspondences(mesh, pose, CAMERA, 8)
            if corr.num_pairs < 10:
                continue
            grad = L.reconstruction_loss_pose_gradient(fm, mesh, pose, CAMERA, corr)
            h = 1e-6
            fd = np.zeros(4)
            for k in range(4):
                up, down = pose.as_array(), pose.as_array()
                up[k] += h
                down[k] -= h
                fd[k] = (
                    L.frozen_pose_objective(fm, mesh, corr, G.Pose.from_array(up), CAMERA)
                    - L.frozen_pose_objective(fm, mesh, corr, G.Pose.from_array(down), CAMERA)
                ) / (2 * h)
            assert np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-9) < 1e-3
            checked += 1

    def test_zero_gradient_at_constructed_exact_minimum(self):
        # Zero residual at every paired projection => global minimum of the
        # smooth surrogate => vanishing gradient.
        mesh = make_mesh(seed=8)
        pose = G.Pose(0.6, 0.3, 0.0, 3.5)
        corr = NM.project_correspondences(mesh, pose, CAMERA, 8)
        fcam = CAMERA.for_stride(8)
        hf, wf = fcam.image_size
        grid = np.tile(mesh.background_feature, (hf, wf, 1))
        uv, _ = G.project_points(mesh.geometry.vertices[corr.vertex_ids], pose, fcam)
        # greedily pick pairs at least 4 cells apart so their constant 4x4
        # patches (hence their 2x2 interpolation stencils) never overlap
        keep = []
        for k in range(corr.num_pairs):
            if all(np.linalg.norm(uv[k] - uv[j]) >= 4.0 for j in keep):
                keep.append(k)
        keep = np.array(keep)
        assert keep.size >= 4
        for k in keep:
            vid = corr.vertex_ids[k]
            u0, v0 = int(np.floor(uv[k, 0])), int(np.floor(uv[k, 1]))
            grid[max(0, v0 - 1) : v0 + 3, max(0, u0 - 1) : u0 + 3] = mesh.vertex_features[vid]
        sampled, _, _ = L._bilinear(grid, uv[keep])
        resid = np.linalg.norm(sampled - mesh.vertex_features[corr.vertex_ids[keep]], axis=1)
        assert resid.max() < 1e-12
        import dataclasses

        frozen = dataclasses.replace(
            corr, vertex_ids=corr.vertex_ids[keep], vertex_cells=corr.vertex_cells[keep]
        )
        fm = F.FeatureMap(grid=grid, stride=8)
        grad = L.reconstruction_loss_pose_gradient(fm, mesh, pose, CAMERA, frozen)
        assert np.linalg.norm(grad) < 1e-6

    def test_theta_gradient_sign_tracks_rotation_offset(self):
        mesh = make_mesh(seed=9)
        base = G.Pose(0.8, 0.2, 0.0, 3.5)
        for delta in (0.05, -0.05):
            truth = G.Pose(base.azimuth, base.elevation, base.theta + delta, base.distance)
            fm = F.oracle_extract(mesh, truth, CAMERA, stride=8, noise_sigma=0.0)
            grad = L.reconstruction_loss_pose_gradient(fm, mesh, base, CAMERA)
            # descending -grad must move theta towards the truth
            assert np.sign(-grad[2]) == np.sign(delta)


class TestDomainContrastiveLoss:
    def _setup(self, seed=10):
        mesh = make_mesh(seed=seed)
        pose = G.Pose(0.5, 0.3, 0.0, 3.5)
        fm = F.oracle_extract(mesh, pose, CAMERA, stride=8, noise_sigma=0.3, seed=seed)
        corr = NM.project_correspondences(mesh, pose, CAMERA, 8)
        return mesh, fm, corr

    def test_perfect_alignment_gives_zero(self):
        mesh, _, corr = self._setup()
        fm0 = F.oracle_extract(mesh, G.Pose(0.5, 0.3, 0.0, 3.5), CAMERA, stride=8, noise_sigma=0.0)
        value, d_vertex, cell_grads = L.domain_contrastive_loss(mesh, [fm0], [corr])
        assert value.total == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(d_vertex, 0.0, atol=1e-12)

    def test_single_orthogonal_pair_gives_two(self):
        mesh, fm, corr = self._setup(seed=11)
        import dataclasses

        one = dataclasses.replace(corr, vertex_ids=corr.vertex_ids[:1], vertex_cells=corr.vertex_cells[:1])
        vid = one.vertex_ids[0]
        cell = one.vertex_cells[0]
        grid = fm.grid.copy()
        c = mesh.vertex_features[vid]
        ortho = np.zeros_like(c)
        ortho[np.argmin(np.abs(c))] = 1.0
        ortho = unit(ortho - c * (c @ ortho))
        grid[cell[0], cell[1]] = ortho
        value, _, _ = L.domain_contrastive_loss(mesh, [F.FeatureMap(grid=grid, stride=8)], [one])
        assert value.total == pytest.approx(2.0, abs=1e-9)

    def test_gradient_symmetry(self):
        mesh, fm, corr = self._setup(seed=12)
        value, d_vertex, cell_grads = L.domain_contrastive_loss(mesh, [fm], [corr])
        summed = np.zeros_like(d_vertex)
        np.add.at(summed, corr.vertex_ids, cell_grads[0][corr.vertex_cells[:, 0], corr.vertex_cells[:, 1]])
        np.testing.assert_allclose(d_vertex, -summed, atol=1e-12)

    def test_empty_correspondences_give_zero(self):
        mesh, fm, corr = self._setup(seed=13)
        import dataclasses

        empty = dataclasses.replace(
            corr, vertex_ids=np.zeros(0, dtype=np.int64), vertex_cells=np.zeros((0, 2), dtype=np.int64)
        )
        value, d_vertex, cell_grads = L.domain_contrastive_loss(mesh, [fm], [empty])
        assert value.total == 0.0
        np.testing.assert_array_equal(cell_grads[0], 0.0)

    def test_cell_gradient_matches_finite_differences(self):
        mesh, fm, corr = self._setup(seed=14)
        import dataclasses

        small = dataclasses.replace(corr, vertex_ids=corr.vertex_ids[:4], vertex_cells=corr.vertex_cells[:4])
        _, _, cell_grads = L.domain_contrastive_loss(mesh, [fm], [small])
        h = 1e-7
        for k in range(4):
            r, c = small.vertex_cells[k]
            for ch in range(0, fm.grid.shape[2], 7):
                plus, minus = fm.grid.copy(), fm.grid.copy()
                plus[r, c, ch] += h
                minus[r, c, ch] -= h
                vp, _, _ = L.domain_contrastive_loss(mesh, [F.FeatureMap(grid=plus, stride=8)], [small])
                vm, _, _ = L.domain_contrastive_loss(mesh, [F.FeatureMap(grid=minus, stride=8)], [small])
                fd = (vp.total - vm.total) / (2 * h)
                assert abs(cell_grads[0][r, c, ch] - fd) < 1e-5


class TestJointLoss:
    def test_alpha_zero_drops_domain_term(self):
        value = L.joint_loss({"contrastive": -2.0, "reconstruction": 5.0, "domain": 100.0}, alpha=0.0)
        assert value.total == pytest.approx(3.0)

    def test_documented_arithmetic_case(self):
        value = L.joint_loss({"contrastive": -1.0, "reconstruction": 2.0, "domain": 3.0}, alpha=1.0)
        assert value.total == pytest.approx(4.0)
        assert value.terms["domain_weighted"] == pytest.approx(3.0)

    def test_alpha_linearity(self):
        a1 = L.joint_loss({"contrastive": 0.5, "reconstruction": 1.0, "domain": 2.5}, alpha=1.0)
        a2 = L.joint_loss({"contrastive": 0.5, "reconstruction": 1.0, "domain": 2.5}, alpha=2.0)
        assert a2.terms["domain_weighted"] == pytest.approx(2 * a1.terms["domain_weighted"])
        assert a2.total - a1.total == pytest.approx(a1.terms["domain_weighted"])

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            L.joint_loss({"contrastive": 0.0, "reconstruction": 0.0}, alpha=-0.1)

    def test_total_equals_breakdown(self):
        value = L.joint_loss({"contrastive": -1.5, "reconstruction": 2.25, "domain": 0.75}, alpha=0.5)
        expected = value.terms["contrastive"] + value.terms["reconstruction"] + value.terms["domain_weighted"]
        assert value.total == pytest.approx(expected, abs=1e-12)
