import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshpose import geometry as G
from meshpose.geometry import Camera, Pose, build_cuboid, geodesic_distance, pose_to_rotation, rasterize, rotation_about_axis


def random_pose(rng, dist_range=(2.5, 6.0)):
    return Pose(
        azimuth=rng.uniform(0, 2 * math.pi),
        elevation=rng.uniform(-0.4, 0.9),
        theta=rng.uniform(-0.1, 0.1),
        distance=rng.uniform(*dist_range),
    )


pose_strategy = st.builds(
    Pose,
    azimuth=st.floats(0, 2 * math.pi - 1e-9),
    elevation=st.floats(-math.pi / 2, math.pi / 2),
    theta=st.floats(-math.pi, math.pi),
    distance=st.floats(0.5, 50.0),
)


class TestPoseToRotation:
    def test_identity_view_anchor(self):
        # Camera on +Z world axis looking at the origin, image up = world up.
        r = pose_to_rotation(Pose(0.0, 0.0, 0.0, 5.0))
        np.testing.assert_allclose(r, np.diag([1.0, -1.0, -1.0]), atol=1e-12)

    def test_azimuth_periodicity(self):
        a, e, t = 0.7, 0.3, 0.05
        r1 = pose_to_rotation(Pose(a, e, t, 3.0))
        r2 = pose_to_rotation(Pose(a + 2 * math.pi, e, t, 3.0))
        np.testing.assert_allclose(r1, r2, atol=1e-12)

    def test_theta_pi_is_geodesic_pi(self):
        a, e = 1.2, -0.4
        r0 = pose_to_rotation(Pose(a, e, 0.0, 3.0))
        r1 = pose_to_rotation(Pose(a, e, math.pi, 3.0))
        assert geodesic_distance(r0, r1) == pytest.approx(math.pi, abs=1e-9)

    def test_camera_center_maps_to_camera_origin(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = random_pose(rng)
            center = p.distance * np.array(
                [
                    math.cos(p.elevation) * math.sin(p.azimuth),
                    math.sin(p.elevation),
                    math.cos(p.elevation) * math.cos(p.azimuth),
                ]
            )
            r = pose_to_rotation(p)
            np.testing.assert_allclose(r @ center + [0, 0, p.distance], 0.0, atol=1e-12)

    @given(pose_strategy)
    @settings(max_examples=200, deadline=None)
    def test_always_a_rotation(self, pose):
        r = pose_to_rotation(pose)
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(r) - 1.0) < 1e-9

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Pose(math.nan, 0, 0, 1.0)
        with pytest.raises(ValueError):
            Pose(0, 0, 0, -1.0)


class TestGeodesicDistance:
    def test_identity_case(self):
        r = pose_to_rotation(Pose(0.3, 0.2, 0.1, 2.0))
        assert geodesic_distance(r, r) == 0.0

    def test_z_axis_30_degrees(self):
        r = rotation_about_axis([0, 0, 1], math.pi / 6)
        assert geodesic_distance(np.eye(3), r) == pytest.approx(math.pi / 6, abs=1e-12)

    def test_axis_angle_oracle_1000(self):
        # Axis-angle construction is the independent oracle: the geodesic
        # distance from the identity must equal the construction angle.
        rng = np.random.default_rng(20240817)
        for _ in range(1000):
            axis = rng.normal(size=3)
            theta = rng.uniform(1e-6, math.pi - 1e-9)
            r = rotation_about_axis(axis, theta)
            assert abs(geodesic_distance(np.eye(3), r) - theta) < 1e-6

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(7)
        rots = []
        for _ in range(30):
            rots.append(rotation_about_axis(rng.normal(size=3), rng.uniform(0, math.pi)))
        for i in range(0, 30, 3):
            r1, r2, r3 = rots[i], rots[i + 1], rots[i + 2]
            assert geodesic_distance(r1, r2) == pytest.approx(geodesic_distance(r2, r1), abs=1e-12)
            assert geodesic_distance(r1, r3) <= geodesic_distance(r1, r2) + geodesic_distance(r2, r3) + 1e-6

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            geodesic_distance(np.eye(3), 2.0 * np.eye(3))
        with pytest.raises(ValueError):
            geodesic_distance(np.ones((3, 3)), np.eye(3))


class TestBuildCuboid:
    def test_density_two_corners_only(self):
        mesh = build_cuboid((1, 1, 1), 2)
        assert mesh.num_vertices == 8

    def test_density_three_surface_count(self):
        # Surface points of the 3x3x3 lattice: 27 minus the single interior one.
        mesh = build_cuboid((1, 1, 1), 3)
        assert mesh.num_vertices == 26

    @pytest.mark.parametrize("density", [2, 3, 5, 8])
    def test_surface_constraint(self, density):
        mesh = build_cuboid((2, 1, 1), density)
        v = mesh.vertices
        on_surface = (
            (np.abs(v[:, 0]) == 1.0) | (np.abs(v[:, 1]) == 0.5) | (np.abs(v[:, 2]) == 0.5)
        )
        assert on_surface.all()

    def test_no_duplicate_vertices(self):
        mesh = build_cuboid((1, 2, 3), 4)
        assert len({tuple(row) for row in mesh.vertices}) == mesh.num_vertices
        assert mesh.num_vertices == 4**3 - 2**3

    def test_faces_valid_and_outward(self):
        mesh = build_cuboid((1.5, 1.0, 0.5), 5)
        assert mesh.faces.min() >= 0 and mesh.faces.max() < mesh.num_vertices
        v, f = mesh.vertices, mesh.faces
        volume = np.sum(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]]))) / 6.0
        assert volume == pytest.approx(1.5 * 1.0 * 0.5, rel=1e-12)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            build_cuboid((0, 1, 1), 3)
        with pytest.raises(ValueError):
            build_cuboid((1, 1, -2), 3)
        with pytest.raises(ValueError):
            build_cuboid((1, 1, 1), 1)


class TestRasterize:
    camera = Camera.centered(100.0, (64, 64))

    def test_frontal_cube_extent_closed_form(self):
        mesh = build_cuboid((1, 1, 1), 4)
        pose = Pose(0.0, 0.0, 0.0, 4.0)
        rr = rasterize(mesh, pose, self.camera)
        # Front face at camera depth d - 0.5; half extent in pixels f*h/(d-h).
        half = 100.0 * 0.5 / 3.5
        cx = cy = 31.5
        cols = np.arange(64)
        expect_cols = np.abs(cols - cx) <= half
        expect = np.outer(np.abs(cols - cy) <= half, expect_cols)
        np.testing.assert_array_equal(rr.foreground_mask, expect)

    def test_convexity_at_most_three_sides_visible(self):
        mesh = build_cuboid((1, 1, 1), 5)
        rng = np.random.default_rng(11)
        half = 0.5
        for _ in range(25):
            pose = random_pose(rng)
            rr = rasterize(mesh, pose, self.camera)
            sides = set()
            for r in np.nonzero(rr.vertex_visible)[0]:
                x, y, z = mesh.vertices[r]
                hits = [
                    s
                    for s, val in zip("ABCDEF", (x == half, x == -half, y == half, y == -half, z == half, z == -half))
                    if val
                ]
                if len(hits) == 1:  # interior of exactly one side
                    sides.add(hits[0])
            assert len(sides) <= 3

    def test_distance_scaling_mask_containment(self):
        mesh = build_cuboid((1, 1, 1), 4)
        near = rasterize(mesh, Pose(0.0, 0.0, 0.0, 4.0), self.camera)
        far = rasterize(mesh, Pose(0.0, 0.0, 0.0, 8.0), self.camera)
        assert far.foreground_mask.sum() > 0
        assert np.all(near.foreground_mask | ~far.foreground_mask)

    def test_behind_camera_is_empty_render(self):
        import dataclasses

        mesh = build_cuboid((1, 1, 1), 3)
        # Shift the mesh along +Z world; at the anchor pose that is towards
        # (and past) the camera, leaving every triangle behind the near plane.
        shifted = dataclasses.replace(mesh, vertices=mesh.vertices + np.array([0.0, 0.0, 8.0]))
        rr = rasterize(shifted, Pose(0.0, 0.0, 0.0, 2.0), self.camera)
        assert rr.foreground_mask.sum() == 0
        assert not rr.vertex_visible.any()

    def test_camera_inside_object_sees_back_face(self):
        # Near-plane clipping drops the faces straddling the camera; the far
        # side of the box is still in front and fills the view.
        mesh = build_cuboid((1, 1, 1), 3)
        rr = rasterize(mesh, Pose(0.0, 0.0, 0.0, 1e-4), self.camera)
        assert rr.foreground_mask.all()

    def test_determinism_bit_identical(self):
        mesh = build_cuboid((1.2, 0.8, 0.6), 5)
        pose = Pose(0.8, 0.35, 0.04, 3.2)
        a = rasterize(mesh, pose, self.camera)
        b = rasterize(mesh, pose, self.camera)
        for field in ("foreground_mask", "vertex_visible", "vertex_pixel", "pixel_vertex", "depth", "pixel_face"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))

    def test_dense_and_bbox_paths_agree(self):
        mesh = build_cuboid((1.2, 0.8, 0.6), 5)
        rng = np.random.default_rng(5)
        for _ in range(10):
            pose = random_pose(rng)
            dense = G.render_batch(mesh.vertices, mesh.faces, [pose], self.camera, mesh.face_candidates)
            bbox = G._rasterize_bbox(mesh.vertices, mesh.faces, pose, self.camera, mesh.face_candidates)
            np.testing.assert_array_equal(dense.foreground_mask[0], bbox.foreground_mask)
            np.testing.assert_array_equal(dense.pixel_vertex[0], bbox.pixel_vertex)
            np.testing.assert_array_equal(dense.vertex_visible[0], bbox.vertex_visible)

    def test_visibility_consistency_ray_oracle(self):
        # Independent oracle: cast a 3D ray through each visible vertex and
        # intersect all faces (Moller-Trumbore); the vertex must be within the
        # depth tolerance of the first hit.
        mesh = build_cuboid((1.0, 0.7, 0.5), 5)
        rng = np.random.default_rng(13)
        for _ in range(10):
            pose = random_pose(rng)
            rr = rasterize(mesh, pose, self.camera)
            cam_pts = G.transform_to_camera(mesh.vertices, pose)
            eps = G.DEPTH_TOLERANCE_SCALE * pose.distance
            for r in np.nonzero(rr.vertex_visible)[0]:
                direction = cam_pts[r] / np.linalg.norm(cam_pts[r])
                t_hit = np.inf
                for tri in mesh.faces:
                    a, b, c = cam_pts[tri]
                    m = np.column_stack([b - a, c - a, -direction])
                    if abs(np.linalg.det(m)) < 1e-12:
                        continue
                    u, v, t = np.linalg.solve(m, -a)
                    if u >= -1e-9 and v >= -1e-9 and u + v <= 1 + 1e-9 and t > 0:
                        t_hit = min(t_hit, t)
                z_hit = t_hit * direction[2]
                assert cam_pts[r][2] <= z_hit + eps + 1e-9

    def test_every_foreground_pixel_has_governing_vertex(self):
        mesh = build_cuboid((1, 1, 1), 5)
        rr = rasterize(mesh, Pose(0.5, 0.3, 0.0, 3.5), self.camera)
        assert np.all((rr.pixel_vertex >= 0) == rr.foreground_mask)
        gov = rr.pixel_vertex[rr.foreground_mask]
        assert gov.max() < mesh.num_vertices


class TestProjectionJacobian:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        camera = Camera.centered(120.0, (96, 96))
        pts = rng.normal(scale=0.4, size=(12, 3))
        for _ in range(10):
            pose = random_pose(rng)
            uv, z, jac = G.project_points_with_jacobian(pts, pose, camera)
            h = 1e-6
            for k in range(4):
                up = pose.as_array()
                up[k] += h
                um = pose.as_array()
                um[k] -= h
                uv_p, _ = G.project_points(pts, Pose.from_array(up), camera)
                uv_m, _ = G.project_points(pts, Pose.from_array(um), camera)
                fd = (uv_p - uv_m) / (2 * h)
                np.testing.assert_allclose(jac[:, :, k], fd, atol=5e-5, rtol=1e-4)


class TestPoseCanonicalization:
    def test_wraps_angles(self):
        p = Pose(7.0, 0.2, 4.0, 2.0).canonical()
        assert 0 <= p.azimuth < 2 * math.pi
        assert -math.pi < p.theta <= math.pi
        r1 = pose_to_rotation(Pose(7.0, 0.2, 4.0, 2.0))
        r2 = pose_to_rotation(p)
        np.testing.assert_allclose(r1, r2, atol=1e-12)

    def test_camera_validation(self):
        with pytest.raises(ValueError):
            Camera(-1.0, (10, 10), (32, 32))
        with pytest.raises(ValueError):
            Camera(50.0, (40, 10), (32, 32))
