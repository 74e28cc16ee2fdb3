"""Synthetic scene factories.

Stand-ins for a feed-forward predictor's outputs: pixel-wise Gaussians
back-projected from depth maps, exact-plane multi-view setups with analytic
depth, procedural textures, and duplicated scenes for overlap experiments.
All generators are pure functions of their arguments and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import distance_transform_edt

from .core import Camera, DepthMap, InvalidInputError, Scene, backproject
from .reg3d import NormalMap, normal_from_depth


@dataclass(frozen=True)
class GaussianizeOptions:
    opacity: float = 0.8
    scale_factor: float = 1.0
    view_index: int = 0
    store_normals: bool = True

    def __post_init__(self):
        if not 0 < self.opacity <= 1:
            raise InvalidInputError("opacity must lie in (0, 1]")
        if self.scale_factor <= 0:
            raise InvalidInputError("scale_factor must be positive")
        if self.view_index < 0:
            raise InvalidInputError("view_index must be non-negative")


def _fill_invalid(raster: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid entries with the nearest valid entry."""
    if not np.any(valid):
        return raster
    if np.all(valid):
        return raster
    _, (ir, ic) = distance_transform_edt(~valid, return_indices=True)
    return raster[ir, ic]


def depth_to_gaussians(depth: DepthMap, color, opts: GaussianizeOptions | None = None) -> Scene:
    """One Gaussian per valid depth pixel.

    Center = back-projected pixel, color from the image, isotropic scale
    scale_factor * D(p) / fx (one pixel footprint at factor 1), identity
    rotation, opacity3d = opacity, provenance (view, pixel), world-frame
    normals from the depth map with invalid pixels filled by their nearest
    valid neighbor.
    """
    opts = opts or GaussianizeOptions()
    color = np.asarray(color, dtype=np.float64)
    cam = depth.camera
    if color.shape != (cam.height, cam.width, 3):
        raise InvalidInputError(
            f"color image {color.shape} does not match depth {(cam.height, cam.width)}"
        )
    valid = depth.valid
    rows, cols = np.nonzero(valid)
    n = len(rows)
    if n == 0:
        return Scene.empty()
    d = depth.values[rows, cols]
    mu = backproject(cam, np.stack([cols + 0.5, rows + 0.5], axis=1), d)
    scale = np.repeat((opts.scale_factor * d / cam.fx)[:, None], 3, axis=1)
    rotation = np.zeros((n, 4))
    rotation[:, 0] = 1.0

    normal = None
    if opts.store_normals:
        nm = normal_from_depth(depth).to_world()
        if np.any(nm.valid):
            filled = _fill_invalid(nm.normals, nm.valid)
            normal = filled[rows, cols]

    return Scene(
        mu=mu,
        opacity=np.full(n, opts.opacity),
        scale=scale,
        rotation=rotation,
        color=color[rows, cols],
        opacity3d=np.full(n, opts.opacity),
        normal=normal,
        prov_view=np.full(n, opts.view_index, dtype=np.int64),
        prov_pixel=np.stack([rows, cols], axis=1).astype(np.int64),
    )


@dataclass(frozen=True)
class Plane:
    """Infinite plane through `point` with unit normal `normal` (world frame)."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        if p.shape != (3,) or n.shape != (3,):
            raise InvalidInputError("plane point and normal must be 3-vectors")
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise InvalidInputError("plane normal must be nonzero")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n / norm)

    def intersections(self, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-pixel ray hits: (points (H,W,3), depth (H,W), valid (H,W)).

        Depth is the camera-frame z of the hit; rays go through pixel
        centers. Parallel rays and hits behind the camera are invalid.
        """
        h, w = camera.height, camera.width
        u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
        d_world = d_cam @ camera.rotation_wc
        origin = camera.center
        nd = d_world @ self.normal
        num = float(self.normal @ (self.point - origin))
        ok = np.abs(nd) > 1e-12
        t = num / np.where(ok, nd, 1.0)
        ok &= t > 0
        # with unnormalized directions (z_cam component 1), t is the camera-frame z
        points = origin + t[..., None] * d_world
        return points, np.where(ok, t, 0.0), ok

    def depth_for(self, camera: Camera) -> DepthMap:
        _, depth, _ = self.intersections(camera)
        return DepthMap(values=depth, camera=camera)

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane orthonormal axes for texture coordinates."""
        n = self.normal
        seed = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = seed - (seed @ n) * n
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        return e1, e2


CHECKER_COLORS = (np.array([0.9, 0.6, 0.2]), np.array([0.15, 0.3, 0.75]))
NOISE_LATTICE = 16


@dataclass(frozen=True)
class PlaneViews:
    """An exact textured plane seen from K cameras, with analytic depth.

    depth_for/image_for evaluate the same plane and texture for any extra
    camera (zoomed or shifted), which is how zoom ground truth is made.
    """

    plane: Plane
    cameras: list[Camera]
    texture: str = "checker"
    seed: int = 0
    cell: float = 0.16
    depths: list[DepthMap] = field(default_factory=list)
    images: list[np.ndarray] = field(default_factory=list)

    def depth_for(self, camera: Camera) -> DepthMap:
        return self.plane.depth_for(camera)

    def texture_at(self, points: np.ndarray) -> np.ndarray:
        """Procedural plane color at world points (..., 3)."""
        e1, e2 = self.plane.basis()
        rel = points - self.plane.point
        tu = rel @ e1
        tv = rel @ e2
        if self.texture == "checker":
            parity = (np.floor(tu / self.cell) + np.floor(tv / self.cell)) % 2
            a, b = CHECKER_COLORS
            return np.where(parity[..., None] == 0, a, b)
        if self.texture == "noise":
            rng = np.random.default_rng(self.seed)
            lattice = 0.1 + 0.8 * rng.random((NOISE_LATTICE, NOISE_LATTICE, 3))
            fu = tu / self.cell
            fv = tv / self.cell
            iu = np.floor(fu).astype(np.int64)
            iv = np.floor(fv).astype(np.int64)
            su = fu - iu
            sv = fv - iv
            su = su * su * (3 - 2 * su)
            sv = sv * sv * (3 - 2 * sv)
            c00 = lattice[iu % NOISE_LATTICE, iv % NOISE_LATTICE]
            c10 = lattice[(iu + 1) % NOISE_LATTICE, iv % NOISE_LATTICE]
            c01 = lattice[iu % NOISE_LATTICE, (iv + 1) % NOISE_LATTICE]
            c11 = lattice[(iu + 1) % NOISE_LATTICE, (iv + 1) % NOISE_LATTICE]
            top = c00 * (1 - su[..., None]) + c10 * su[..., None]
            bot = c01 * (1 - su[..., None]) + c11 * su[..., None]
            return top * (1 - sv[..., None]) + bot * sv[..., None]
        raise InvalidInputError(f"unknown texture {self.texture!r}")

    def image_for(self, camera: Camera) -> np.ndarray:
        points, _, ok = self.plane.intersections(camera)
        img = self.texture_at(points)
        return np.where(ok[..., None], img, 0.0)


def make_plane_views(
    k: int,
    depth: float = 2.0,
    tilt_deg: float = 0.0,
    texture: str = "checker",
    resolution: tuple[int, int] = (64, 64),
    fx: float | None = None,
    baseline: float = 0.1,
    seed: int = 0,
    cell: float | None = None,
) -> PlaneViews:
    """K translated cameras viewing a textured plane with analytic depth.

    The plane passes through (0, 0, depth), tilted about the x-axis by
    tilt_deg. Cameras sit on a short x-axis segment at z=0 looking down +z.
    """
    if k < 1:
        raise InvalidInputError("need at least one view")
    if depth <= 0:
        raise InvalidInputError("plane depth must be positive")
    h, w = resolution
    if fx is None:
        fx = float(max(h, w))
    if cell is None:
        cell = 8.0 * depth / fx
    tilt = np.deg2rad(tilt_deg)
    plane = Plane(point=np.array([0.0, 0.0, depth]), normal=np.array([0.0, -np.sin(tilt), np.cos(tilt)]))

    cameras = []
    eye = np.eye(3)
    for i in range(k):
        x = (i - (k - 1) / 2.0) * baseline
        cameras.append(Camera(
            fx=fx, fy=fx, cx=w / 2.0, cy=h / 2.0,
            rotation_wc=eye, translation_wc=np.array([-x, 0.0, 0.0]),
            width=w, height=h,
        ))

    pv = PlaneViews(plane=plane, cameras=cameras, texture=texture, seed=seed, cell=cell)
    return replace(
        pv,
        depths=[pv.depth_for(c) for c in cameras],
        images=[pv.image_for(c) for c in cameras],
    )


def duplicate_scene(scene: Scene, copies: int) -> Scene:
    """Each Gaussian repeated `copies` times consecutively; provenance views
    relabeled 0..copies-1 per copy so copies read as coming from distinct
    views.
    """
    if copies < 1:
        raise InvalidInputError("copies must be at least 1")
    if copies == 1 or len(scene) == 0:
        return scene
    n = len(scene)
    rep = lambda a: np.repeat(a, copies, axis=0)
    has_prov = scene.has_provenance
    return Scene(
        mu=rep(scene.mu),
        opacity=rep(scene.opacity),
        scale=rep(scene.scale),
        rotation=rep(scene.rotation),
        color=rep(scene.color),
        opacity3d=rep(scene.opacity3d),
        normal=rep(scene.normal) if scene.normal is not None else None,
        prov_view=np.tile(np.arange(copies, dtype=np.int64), n) if has_prov else None,
        prov_pixel=rep(scene.prov_pixel) if has_prov else None,
    )
