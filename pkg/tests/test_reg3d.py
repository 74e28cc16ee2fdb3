"""Ray-plane sampling branch: intersections, 3D falloffs, normals."""

import numpy as np
import pytest

from splatnorm import (
    Camera,
    DepthMap,
    Gaussian,
    InvalidInputError,
    NormalMap,
    Ray,
    RenderOptions,
    Scene,
    covariance3d,
    eval_gaussian3d,
    normal_from_depth,
    quat_to_rotation,
    ray_plane_intersect,
    read_pfm,
    render,
    render3d,
    resolve_normals,
)
from splatnorm.io import load_png
from splatnorm.reg3d import save_normal_map_pfm, save_normal_map_png


def make_camera(**kwargs):
    defaults = dict(
        fx=100.0, fy=100.0, cx=16.5, cy=16.5,
        rotation_wc=np.eye(3), translation_wc=np.zeros(3),
        width=33, height=33,
    )
    defaults.update(kwargs)
    return Camera(**defaults)


def flat_depth(depth=2.0, size=17):
    cam = make_camera(fx=16.0, fy=16.0, cx=size / 2, cy=size / 2,
                      width=size, height=size)
    return DepthMap(values=np.full((size, size), depth), camera=cam)


class TestRayPlane:
    def test_head_on(self):
        ray = Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))
        x, t = ray_plane_intersect(ray, [0, 0, 2], [0, 0, -1])
        assert t == pytest.approx(2.0)
        np.testing.assert_allclose(x, [0, 0, 2], atol=1e-12)

    def test_offset_plane_point(self):
        """Any point on the plane defines it; only n matters for depth."""
        ray = Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))
        x, t = ray_plane_intersect(ray, [1, 1, 3], [0, 0, 1])
        assert t == pytest.approx(3.0)
        np.testing.assert_allclose(x, [0, 0, 3], atol=1e-12)

    def test_parallel_is_none(self):
        ray = Ray(origin=np.zeros(3), direction=np.array([1.0, 0.0, 0.0]))
        assert ray_plane_intersect(ray, [0, 0, 2], [0, 0, 1]) is None

    def test_behind_origin_is_none(self):
        ray = Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))
        assert ray_plane_intersect(ray, [0, 0, -2], [0, 0, 1]) is None

    def test_direction_must_be_unit(self):
        with pytest.raises(InvalidInputError):
            Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 2.0]))

    def test_random_hits_satisfy_plane_equation(self):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 200:
            o = rng.normal(size=3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            mu = rng.normal(size=3) * 3
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            hit = ray_plane_intersect(Ray(origin=o, direction=d), mu, n)
            if hit is None:
                continue
            x, t = hit
            scale = max(np.abs(mu).max(), np.abs(x).max(), 1.0)
            assert abs(n @ (x - mu)) <= 1e-6 * scale
            np.testing.assert_allclose(x, o + t * d, rtol=1e-12)
            checked += 1


class TestEvalGaussian3d:
    @staticmethod
    def gaussian(scale=(1.0, 1.0, 1.0), rotation=(1, 0, 0, 0), mu=(0, 0, 0)):
        return Gaussian(mu=np.asarray(mu, float), opacity=1.0,
                        scale=np.asarray(scale, float),
                        rotation=np.asarray(rotation, float),
                        color=np.array([1.0, 1.0, 1.0]))

    def test_unity_at_center(self):
        g = self.gaussian(mu=(0.3, -0.7, 2.0))
        assert eval_gaussian3d(g, g.mu) == 1.0

    def test_one_sigma_isotropic(self):
        g = self.gaussian()
        for axis in np.eye(3):
            assert eval_gaussian3d(g, axis) == pytest.approx(np.exp(-0.5), abs=1e-9)

    def test_one_sigma_each_axis(self):
        assert eval_gaussian3d(self.gaussian(), [1, 1, 1]) == pytest.approx(
            np.exp(-1.5), abs=1e-9)

    def test_anisotropic(self):
        g = self.gaussian(scale=(1.0, 2.0, 1.0))
        assert eval_gaussian3d(g, [0, 2, 0]) == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_rotation_covariance(self):
        """Value equals exp(-1/2 d^T Sigma^-1 d) with Sigma = R S^2 R^T."""
        rng = np.random.default_rng(11)
        for _ in range(30):
            q = rng.normal(size=4)
            s = rng.uniform(0.5, 2.0, 3)
            mu = rng.normal(size=3)
            x = mu + rng.normal(size=3)
            g = self.gaussian(scale=s, rotation=q, mu=mu)
            cov = covariance3d(s, q)
            d = x - mu
            expect = np.exp(-0.5 * d @ np.linalg.solve(cov, d))
            assert eval_gaussian3d(g, x) == pytest.approx(expect, rel=1e-10)

    def test_rotating_gaussian_and_point_together(self):
        q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
        rot = quat_to_rotation(q)
        base = self.gaussian(scale=(1.0, 2.0, 3.0))
        turned = self.gaussian(scale=(1.0, 2.0, 3.0), rotation=q)
        x = np.array([0.4, -0.2, 1.1])
        assert eval_gaussian3d(turned, rot @ x) == pytest.approx(
            eval_gaussian3d(base, x), rel=1e-12)

    def test_scale_underflow(self):
        g = self.gaussian(scale=(1.0, 1e-200, 1.0))
        with pytest.raises(InvalidInputError):
            eval_gaussian3d(g, [0, 0, 0])


class TestNormalFromDepth:
    def test_fronto_parallel_plane(self):
        nm = normal_from_depth(flat_depth())
        assert nm.frame == "camera"
        border = np.zeros((17, 17), dtype=bool)
        border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
        assert not nm.valid[border].any()
        assert nm.valid[~border].all()
        np.testing.assert_allclose(
            nm.normals[nm.valid], np.tile([0.0, 0.0, -1.0], (nm.valid.sum(), 1)),
            atol=1e-9)

    def test_tilted_plane(self):
        """Plane x = z - 2 has unit normal (1, 0, -1)/sqrt(2) toward camera."""
        size = 33
        cam = make_camera(width=size, height=size)
        u = np.arange(size) + 0.5
        un = (u - cam.cx) / cam.fx
        z = 2.0 / (1.0 - un)
        depth = DepthMap(values=np.tile(z, (size, 1)), camera=cam)
        nm = normal_from_depth(depth)
        expect = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
        np.testing.assert_allclose(
            nm.normals[nm.valid], np.tile(expect, (nm.valid.sum(), 1)), atol=1e-3)

    def test_invalid_depth_masks_neighborhood(self):
        depth = flat_depth()
        vals = depth.values.copy()
        vals[8, 8] = 0.0
        nm = normal_from_depth(DepthMap(values=vals, camera=depth.camera))
        for r, c in [(8, 8), (8, 7), (8, 9), (7, 8), (9, 8)]:
            assert not nm.valid[r, c]
        assert nm.valid[8, 6] and nm.valid[6, 8]

    def test_tiny_map(self):
        cam = make_camera(width=2, height=2, cx=1.0, cy=1.0)
        nm = normal_from_depth(DepthMap(values=np.full((2, 2), 1.0), camera=cam))
        assert not nm.valid.any()


class TestNormalMap:
    def test_unit_length_enforced(self):
        bad = np.zeros((4, 4, 3))
        bad[1, 1] = [0.0, 0.0, -0.5]
        valid = np.zeros((4, 4), dtype=bool)
        valid[1, 1] = True
        with pytest.raises(InvalidInputError):
            NormalMap(normals=bad, valid=valid)

    def test_unknown_frame(self):
        with pytest.raises(InvalidInputError):
            NormalMap(normals=np.zeros((2, 2, 3)), valid=np.zeros((2, 2), bool),
                      frame="object")

    def test_to_world_rotates(self):
        """Camera looking along world +x: a camera-facing normal (0,0,-1)
        points along world -x."""
        rot_wc = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        cam = make_camera(rotation_wc=rot_wc)
        normals = np.zeros((2, 2, 3))
        normals[..., 2] = -1.0
        nm = NormalMap(normals=normals, valid=np.ones((2, 2), bool), camera=cam)
        world = nm.to_world()
        assert world.frame == "world"
        np.testing.assert_allclose(world.normals[0, 0], [-1.0, 0.0, 0.0], atol=1e-12)

    def test_to_world_requires_camera(self):
        nm = NormalMap(normals=np.zeros((2, 2, 3)), valid=np.zeros((2, 2), bool))
        with pytest.raises(InvalidInputError):
            nm.to_world()


class TestResolveNormals:
    @staticmethod
    def scene(normal):
        return Scene(
            mu=[[0.0, 0.0, 2.0]], opacity=[0.5], scale=[[0.02] * 3],
            rotation=[[1, 0, 0, 0]], color=[[1.0, 0.0, 0.0]], opacity3d=[0.5],
            normal=normal, prov_view=[0], prov_pixel=[[8, 8]],
        )

    def test_stored_normals_pass_through(self):
        scene = self.scene([[0.0, 0.0, -1.0]])
        np.testing.assert_array_equal(resolve_normals(scene), [[0.0, 0.0, -1.0]])

    def test_nan_rows_resolved_from_maps(self):
        scene = self.scene([[np.nan, np.nan, np.nan]])
        nm = normal_from_depth(flat_depth())
        out = resolve_normals(scene, [nm])
        np.testing.assert_allclose(out, [[0.0, 0.0, -1.0]], atol=1e-9)

    def test_missing_without_maps(self):
        with pytest.raises(InvalidInputError):
            resolve_normals(self.scene(None))

    def test_invalid_at_provenance_pixel(self):
        scene = self.scene(None)
        depth = flat_depth()
        vals = depth.values.copy()
        vals[8, 8] = 0.0
        nm = normal_from_depth(DepthMap(values=vals, camera=depth.camera))
        with pytest.raises(InvalidInputError):
            resolve_normals(scene, [nm])


class TestRender3d:
    @staticmethod
    def single(opacity3d=0.8, scale=0.05):
        return Scene(
            mu=[[0.0, 0.0, 2.0]], opacity=[0.8], scale=[[scale] * 3],
            rotation=[[1, 0, 0, 0]], color=[[0.2, 0.9, 0.4]],
            opacity3d=[opacity3d], normal=[[0.0, 0.0, -1.0]],
        )

    def test_zero_opacity3d_is_background(self):
        cam = make_camera()
        out = render3d(self.single(opacity3d=0.0), None, cam,
                       RenderOptions(background=(0.25, 0.5, 0.75), alpha_min=0.0))
        assert not out.weight_sum.any()
        np.testing.assert_allclose(
            out.color, np.broadcast_to([0.25, 0.5, 0.75], out.color.shape))

    def test_center_pixel_closed_form(self):
        """The ray through the principal point hits the plane at mu."""
        cam = make_camera()
        out = render3d(self.single(), None, cam, RenderOptions())
        assert out.weight_sum[16, 16] == pytest.approx(0.8, abs=1e-12)
        np.testing.assert_allclose(
            out.color[16, 16], 0.8 * np.array([0.2, 0.9, 0.4]), atol=1e-12)
        assert out.final_transmittance[16, 16] == pytest.approx(0.2, abs=1e-12)

    def test_neighbor_pixel_closed_form(self):
        """One pixel right of center: the plane hit lands 0.02 world units
        off the mean (depth 2, fx 100), so alpha = o3d exp(-(0.02/s)^2/2)."""
        cam = make_camera()
        scale = 0.05
        out = render3d(self.single(scale=scale), None, cam, RenderOptions())
        expect = 0.8 * np.exp(-0.5 * (0.02 / scale) ** 2)
        assert out.weight_sum[16, 17] == pytest.approx(expect, abs=1e-12)

    def test_weight_grows_with_scale(self):
        cam = make_camera()
        totals = [
            render3d(self.single(scale=s), None, cam, RenderOptions()).weight_sum.sum()
            for s in (0.02, 0.04, 0.08)
        ]
        assert totals[0] < totals[1] < totals[2]

    def test_conservation(self):
        cam = make_camera()
        rng = np.random.default_rng(3)
        n = 40
        opacity = rng.uniform(0.2, 0.9, n)
        scene = Scene(
            mu=np.column_stack([rng.uniform(-0.3, 0.3, (n, 2)), rng.uniform(1.5, 3.0, n)]),
            opacity=opacity,
            scale=rng.uniform(0.02, 0.08, (n, 3)),
            rotation=np.tile([1.0, 0, 0, 0], (n, 1)),
            color=rng.uniform(0, 1, (n, 3)),
            opacity3d=opacity,
        )
        normals = np.tile([0.0, 0.0, -1.0], (n, 1))
        out = render3d(scene, normals, cam, RenderOptions())
        np.testing.assert_allclose(
            out.weight_sum + out.final_transmittance, 1.0, atol=1e-5)

    def test_matches_2d_for_fronto_flat_gaussian(self):
        """A fronto-parallel disk Gaussian (tiny z extent) renders the same
        through plane sampling and through 2D projection when dilation is
        off: the plane hit equals the projected 2D evaluation."""
        cam = make_camera()
        scene = Scene(
            mu=[[0.05, -0.03, 2.0]], opacity=[0.7], scale=[[0.04, 0.06, 1e-4]],
            rotation=[[1, 0, 0, 0]], color=[[1.0, 0.5, 0.0]], opacity3d=[0.7],
            normal=[[0.0, 0.0, -1.0]],
        )
        opts = RenderOptions(dilation=0.0)
        flat = render3d(scene, None, cam, opts)
        proj = render(scene, cam, opts)
        np.testing.assert_allclose(flat.weight_sum, proj.weight_sum, atol=1e-4)

    def test_rejects_norm_exponents(self):
        cam = make_camera()
        with pytest.raises(InvalidInputError):
            render3d(self.single(), None, cam, RenderOptions(norm_exponents=[1.0]))

    def test_deterministic_across_threads(self):
        cam = make_camera()
        scene = self.single()
        a = render3d(scene, None, cam, RenderOptions(threads=1))
        b = render3d(scene, None, cam, RenderOptions(threads=4))
        assert a.color.tobytes() == b.color.tobytes()


class TestExports:
    def test_pfm_round_trip(self, tmp_path):
        nm = normal_from_depth(flat_depth())
        path = tmp_path / "n.pfm"
        save_normal_map_pfm(nm, path)
        np.testing.assert_allclose(read_pfm(path), nm.normals, atol=1e-7)

    def test_png_color_coding(self, tmp_path):
        nm = normal_from_depth(flat_depth())
        path = tmp_path / "n.png"
        save_normal_map_png(nm, path)
        img = load_png(path, encoding="linear")
        assert img[0, 0].max() == 0.0  # invalid border is black
        np.testing.assert_allclose(img[8, 8], [0.5, 0.5, 0.0], atol=0.01)
