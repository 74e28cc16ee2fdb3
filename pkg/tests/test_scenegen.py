"""Synthetic scene factories: pixel-wise Gaussians, exact planes, textures."""

import numpy as np
import pytest

from splatnorm import (
    Camera,
    DepthMap,
    InvalidInputError,
    Plane,
    Scene,
    backproject,
    depth_to_gaussians,
    duplicate_scene,
    make_plane_views,
    warp_depth,
)
from splatnorm.scenegen import CHECKER_COLORS, GaussianizeOptions


def make_camera(size=4, fx=100.0):
    return Camera(fx=fx, fy=fx, cx=size / 2, cy=size / 2,
                  rotation_wc=np.eye(3), translation_wc=np.zeros(3),
                  width=size, height=size)


class TestDepthToGaussians:
    @staticmethod
    def flat_inputs(size=4, depth=2.0):
        cam = make_camera(size)
        dm = DepthMap(values=np.full((size, size), depth), camera=cam)
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (size, size, 3))
        return cam, dm, img

    def test_one_gaussian_per_pixel(self):
        cam, dm, img = self.flat_inputs()
        scene = depth_to_gaussians(dm, img, GaussianizeOptions(view_index=3))
        assert len(scene) == 16
        rr, cc = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
        expect_mu = backproject(
            cam, np.stack([cc.ravel() + 0.5, rr.ravel() + 0.5], axis=1),
            np.full(16, 2.0))
        np.testing.assert_allclose(scene.mu, expect_mu, atol=1e-12)
        np.testing.assert_allclose(scene.scale, 0.02)  # depth / fx
        np.testing.assert_allclose(scene.opacity, 0.8)
        np.testing.assert_allclose(scene.opacity3d, 0.8)
        np.testing.assert_allclose(scene.color, img.reshape(-1, 3))
        np.testing.assert_array_equal(scene.prov_view, 3)
        np.testing.assert_array_equal(
            scene.prov_pixel, np.stack([rr.ravel(), cc.ravel()], axis=1))
        np.testing.assert_array_equal(scene.rotation[:, 0], 1.0)
        np.testing.assert_allclose(
            scene.normal, np.tile([0.0, 0.0, -1.0], (16, 1)), atol=1e-12)

    def test_invalid_pixels_skipped(self):
        _, dm, img = self.flat_inputs()
        vals = dm.values.copy()
        vals[1, 2] = 0.0
        scene = depth_to_gaussians(DepthMap(values=vals, camera=dm.camera), img)
        assert len(scene) == 15
        pixels = {tuple(p) for p in scene.prov_pixel}
        assert (1, 2) not in pixels

    def test_scale_factor(self):
        _, dm, img = self.flat_inputs()
        scene = depth_to_gaussians(dm, img, GaussianizeOptions(scale_factor=2.0))
        np.testing.assert_allclose(scene.scale, 0.04)

    def test_no_normals_option(self):
        _, dm, img = self.flat_inputs()
        scene = depth_to_gaussians(dm, img, GaussianizeOptions(store_normals=False))
        assert scene.normal is None

    def test_empty_depth(self):
        cam, _, img = self.flat_inputs()
        scene = depth_to_gaussians(DepthMap(values=np.zeros((4, 4)), camera=cam), img)
        assert len(scene) == 0

    def test_color_shape_mismatch(self):
        _, dm, _ = self.flat_inputs()
        with pytest.raises(InvalidInputError):
            depth_to_gaussians(dm, np.zeros((5, 5, 3)))

    def test_options_validation(self):
        with pytest.raises(InvalidInputError):
            GaussianizeOptions(opacity=0.0)
        with pytest.raises(InvalidInputError):
            GaussianizeOptions(scale_factor=0.0)
        with pytest.raises(InvalidInputError):
            GaussianizeOptions(view_index=-1)


class TestPlane:
    def test_fronto_parallel_intersections(self):
        cam = make_camera(size=8)
        plane = Plane(point=[0, 0, 2], normal=[0, 0, 1])
        points, depth, ok = plane.intersections(cam)
        assert ok.all()
        np.testing.assert_allclose(depth, 2.0, atol=1e-12)
        u, v = np.meshgrid(np.arange(8) + 0.5, np.arange(8) + 0.5)
        np.testing.assert_allclose(points[..., 0], (u - 4) / 100 * 2, atol=1e-12)
        np.testing.assert_allclose(points[..., 1], (v - 4) / 100 * 2, atol=1e-12)
        np.testing.assert_allclose(points[..., 2], 2.0, atol=1e-12)

    def test_behind_camera_invalid(self):
        cam = make_camera()
        plane = Plane(point=[0, 0, -1], normal=[0, 0, 1])
        _, depth, ok = plane.intersections(cam)
        assert not ok.any()
        assert not depth.any()

    def test_normal_normalized(self):
        plane = Plane(point=[0, 0, 2], normal=[0, 0, 5])
        np.testing.assert_allclose(plane.normal, [0, 0, 1])
        with pytest.raises(InvalidInputError):
            Plane(point=[0, 0, 2], normal=[0, 0, 0])

    def test_basis_orthonormal_in_plane(self):
        plane = Plane(point=[0.3, -0.2, 2.0], normal=[0.3, -0.5, 0.8])
        e1, e2 = plane.basis()
        assert np.linalg.norm(e1) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(e2) == pytest.approx(1.0, abs=1e-12)
        assert e1 @ e2 == pytest.approx(0.0, abs=1e-12)
        assert e1 @ plane.normal == pytest.approx(0.0, abs=1e-12)
        assert e2 @ plane.normal == pytest.approx(0.0, abs=1e-12)


class TestMakePlaneViews:
    def test_single_fronto_view(self):
        pv = make_plane_views(1, depth=2.0, resolution=(16, 16))
        assert len(pv.cameras) == 1
        np.testing.assert_allclose(pv.depths[0].values, 2.0, atol=1e-12)
        np.testing.assert_allclose(pv.cameras[0].center, 0.0, atol=1e-12)

    def test_two_view_geometry(self):
        pv = make_plane_views(2, depth=2.0, resolution=(16, 16), baseline=0.1)
        centers = [cam.center for cam in pv.cameras]
        np.testing.assert_allclose(centers[0], [-0.05, 0, 0], atol=1e-12)
        np.testing.assert_allclose(centers[1], [0.05, 0, 0], atol=1e-12)
        # both depth maps describe one plane: warping one yields the other
        _, warped = warp_depth(pv.depths[0], pv.cameras[1])
        covered = warped > 0
        assert covered.any()
        np.testing.assert_allclose(
            warped[covered], pv.depths[1].values[covered], atol=1e-9)

    def test_tilted_depth_closed_form(self):
        """Plane through (0,0,2) tilted 45 deg about x: z(v) = 2/(1 - b)
        with b the normalized vertical pixel coordinate."""
        pv = make_plane_views(1, depth=2.0, tilt_deg=45.0, resolution=(16, 16), fx=32.0)
        cam = pv.cameras[0]
        v = np.arange(16) + 0.5
        b = (v - cam.cy) / cam.fy
        expect = 2.0 / (1.0 - b)
        got = pv.depths[0].values
        np.testing.assert_allclose(got, np.tile(expect[:, None], (1, 16)), rtol=1e-6)

    def test_checker_uses_two_colors(self):
        pv = make_plane_views(1, resolution=(16, 16))
        colors = {tuple(c) for c in pv.images[0].reshape(-1, 3)}
        assert colors == {tuple(CHECKER_COLORS[0]), tuple(CHECKER_COLORS[1])}

    def test_noise_texture_deterministic(self):
        a = make_plane_views(1, texture="noise", resolution=(16, 16), seed=5)
        b = make_plane_views(1, texture="noise", resolution=(16, 16), seed=5)
        assert a.images[0].tobytes() == b.images[0].tobytes()
        c = make_plane_views(1, texture="noise", resolution=(16, 16), seed=6)
        assert a.images[0].tobytes() != c.images[0].tobytes()
        assert a.images[0].min() > 0.0
        assert a.images[0].max() < 1.0

    def test_image_for_extra_camera(self):
        """Zoomed ground truth: a new camera samples the same plane."""
        pv = make_plane_views(1, resolution=(16, 16))
        zoomed = pv.cameras[0].zoomed(2.0)
        img = pv.image_for(zoomed)
        assert img.shape == (16, 16, 3)
        colors = {tuple(c) for c in img.reshape(-1, 3)}
        assert colors <= {tuple(CHECKER_COLORS[0]), tuple(CHECKER_COLORS[1])}

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            make_plane_views(0)
        with pytest.raises(InvalidInputError):
            make_plane_views(1, depth=0.0)
        with pytest.raises(InvalidInputError):
            make_plane_views(1, texture="marble", resolution=(8, 8))


class TestDuplicateScene:
    @staticmethod
    def base_scene(n=5):
        rng = np.random.default_rng(1)
        opacity = rng.uniform(0.2, 0.9, n)
        return Scene(
            mu=rng.normal(size=(n, 3)) + [0, 0, 3],
            opacity=opacity,
            scale=rng.uniform(0.01, 0.05, (n, 3)),
            rotation=np.tile([1.0, 0, 0, 0], (n, 1)),
            color=rng.uniform(0, 1, (n, 3)),
            opacity3d=opacity,
            normal=np.tile([0.0, 0.0, -1.0], (n, 1)),
            prov_view=np.zeros(n, dtype=np.int64),
            prov_pixel=np.stack([np.arange(n), np.arange(n)], axis=1),
        )

    def test_single_copy_identity(self):
        scene = self.base_scene()
        assert duplicate_scene(scene, 1) is scene

    def test_triplicate(self):
        scene = self.base_scene(5)
        out = duplicate_scene(scene, 3)
        assert len(out) == 15
        np.testing.assert_array_equal(out.mu, np.repeat(scene.mu, 3, axis=0))
        np.testing.assert_array_equal(out.opacity, np.repeat(scene.opacity, 3))
        np.testing.assert_array_equal(out.prov_view, np.tile([0, 1, 2], 5))
        np.testing.assert_array_equal(out.prov_pixel, np.repeat(scene.prov_pixel, 3, axis=0))
        np.testing.assert_array_equal(out.normal, np.repeat(scene.normal, 3, axis=0))

    def test_without_provenance(self):
        scene = self.base_scene().replace(prov_view=None, prov_pixel=None)
        out = duplicate_scene(scene, 2)
        assert len(out) == 10
        assert out.prov_view is None
        assert out.prov_pixel is None

    def test_copies_validated(self):
        with pytest.raises(InvalidInputError):
            duplicate_scene(self.base_scene(), 0)
