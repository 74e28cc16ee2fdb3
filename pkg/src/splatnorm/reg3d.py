"""3D sampling-based rendering branch.

Each Gaussian defines a plane through its center with a surface normal; a
camera ray is intersected with that plane, the 3D falloff is evaluated at the
intersection, and alpha = opacity3d * falloff is composited front-to-back in
the same global depth order as the 2D rasterizer. Normals come from depth
maps via central-difference tangents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Camera,
    DepthMap,
    Gaussian,
    InvalidInputError,
    Scene,
    quat_to_rotation,
)
from .io import save_png, write_pfm
from .rasterizer import (
    ALPHA_CLAMP,
    Frame,
    RenderOptions,
    RenderOutput,
    _blank_output,
    _run_tiles,
    composite,
    pixel_centers,
    prepare_frame,
    tile_rect,
)

EPS_PARALLEL = 1e-6


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if o.shape != (3,) or d.shape != (3,):
            raise InvalidInputError("ray origin and direction must be 3-vectors")
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise InvalidInputError("ray must be finite")
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise InvalidInputError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def ray_plane_intersect(ray: Ray, mu, n, eps_parallel: float = EPS_PARALLEL):
    """Intersection of a ray with the plane through mu with normal n.

    Returns (x, t) with x = origin + t * direction, or None when the ray is
    parallel to the plane (|n.d| < eps_parallel) or the hit is behind the
    origin (t <= 0).
    """
    mu = np.asarray(mu, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    nd = float(n @ ray.direction)
    if abs(nd) < eps_parallel:
        return None
    t = float(n @ (mu - ray.origin)) / nd
    if t <= 0:
        return None
    return ray.origin + t * ray.direction, t


def eval_gaussian3d(g: Gaussian, x) -> float:
    """Unnormalized falloff exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)), in (0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise InvalidInputError("x must be a 3-vector")
    if np.any(g.scale < 1e-154):
        raise InvalidInputError("scale underflow makes the covariance singular")
    rot = quat_to_rotation(g.rotation)
    y = (rot.T @ (x - g.mu)) / g.scale
    return float(np.exp(-0.5 * (y @ y)))


@dataclass(frozen=True)
class NormalMap:
    """Raster of unit normals with a validity mask, tagged with its frame."""

    normals: np.ndarray
    valid: np.ndarray
    frame: str = "camera"
    camera: Camera | None = None

    def __post_init__(self):
        nm = np.asarray(self.normals, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if nm.ndim != 3 or nm.shape[2] != 3 or valid.shape != nm.shape[:2]:
            raise InvalidInputError("normals must be (H, W, 3) with an (H, W) mask")
        if self.frame not in ("camera", "world"):
            raise InvalidInputError(f"unknown normal frame {self.frame!r}")
        norms = np.linalg.norm(nm[valid], axis=-1)
        if norms.size and np.any(np.abs(norms - 1.0) > 1e-5):
            raise InvalidInputError("valid normals must be unit length")
        nm = nm.copy()
        valid = valid.copy()
        nm.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "normals", nm)
        object.__setattr__(self, "valid", valid)

    def to_world(self) -> "NormalMap":
        if self.frame == "world":
            return self
        if self.camera is None:
            raise InvalidInputError("camera-frame normal map without a camera")
        world = self.normals @ self.camera.rotation_wc
        return NormalMap(normals=world, valid=self.valid, frame="world", camera=self.camera)


def normal_from_depth(depth: DepthMap) -> NormalMap:
    """Camera-frame normals from central-difference tangents of the
    back-projected depth map, flipped toward the camera. Border pixels and
    any pixel whose 4-neighborhood has invalid depth are masked out.
    """
    cam = depth.camera
    d = depth.values
    h, w = d.shape
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return NormalMap(normals=normals, valid=valid, frame="camera", camera=cam)

    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pts = np.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], axis=-1)

    tu = pts[1:-1, 2:] - pts[1:-1, :-2]
    tv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1)

    ok = (d > 0)[1:-1, 1:-1]
    ok &= (d > 0)[1:-1, 2:] & (d > 0)[1:-1, :-2]
    ok &= (d > 0)[2:, 1:-1] & (d > 0)[:-2, 1:-1]
    ok &= norm > 1e-12

    n = n / np.where(ok, norm, 1.0)[..., None]
    # orient toward the camera at the origin: n . x must be negative
    flip = np.sum(n * pts[1:-1, 1:-1], axis=-1) > 0
    n[flip] = -n[flip]

    normals[1:-1, 1:-1] = np.where(ok[..., None], n, 0.0)
    valid[1:-1, 1:-1] = ok
    return NormalMap(normals=normals, valid=valid, frame="camera", camera=cam)


def resolve_normals(scene: Scene, normal_maps: list[NormalMap] | None = None) -> np.ndarray:
    """Unit normal per Gaussian: the stored field where present, else the
    world-frame normal map sampled at the provenance pixel.
    """
    n = len(scene)
    out = np.full((n, 3), np.nan)
    if scene.normal is not None:
        out = scene.normal.copy()
    missing = np.any(np.isnan(out), axis=1)
    if np.any(missing):
        if normal_maps is None or not scene.has_provenance:
            raise InvalidInputError("missing normals and no normal maps to resolve them")
        world_maps = [nm.to_world() for nm in normal_maps]
        for view in np.unique(scene.prov_view[missing]):
            if view >= len(world_maps):
                raise InvalidInputError(f"no normal map for source view {view}")
            nm = world_maps[view]
            sel = missing & (scene.prov_view == view)
            r = scene.prov_pixel[sel, 0]
            c = scene.prov_pixel[sel, 1]
            h, w = nm.valid.shape
            if np.any(r >= h) or np.any(c >= w):
                raise InvalidInputError(f"provenance pixel outside normal map of view {view}")
            if not np.all(nm.valid[r, c]):
                raise InvalidInputError(f"normal map of view {view} invalid at a provenance pixel")
            out[sel] = nm.normals[r, c]
    norms = np.linalg.norm(out, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise InvalidInputError("resolved normals must be unit length")
    return out


@dataclass
class Geometry3D:
    """Per-frame arrays for ray-plane alpha evaluation, in sorted order."""

    origin: np.ndarray
    mu: np.ndarray
    normal: np.ndarray
    opacity3d: np.ndarray
    whiten: np.ndarray  # (M, 3, 3), diag(1/s) R^T per Gaussian
    rot: np.ndarray  # (M, 3, 3)
    inv_scale: np.ndarray  # (M, 3)
    nmu_no: np.ndarray = field(init=False)  # n.(mu - o), precomputed

    def __post_init__(self):
        self.nmu_no = np.einsum("ij,ij->i", self.normal, self.mu - self.origin)


def prepare_geometry3d(scene: Scene, normals: np.ndarray, camera: Camera, frame: Frame) -> Geometry3D:
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != (len(scene), 3):
        raise InvalidInputError("normals must be one unit 3-vector per Gaussian")
    norms = np.linalg.norm(normals, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-5) or not np.all(np.isfinite(normals)):
        raise InvalidInputError("normals must be unit length")
    idx = frame.gaussian_index
    rot = quat_to_rotation(scene.rotation[idx])
    inv_scale = 1.0 / scene.scale[idx]
    whiten = np.swapaxes(rot, 1, 2) * inv_scale[:, :, None]
    return Geometry3D(
        origin=camera.center,
        mu=scene.mu[idx],
        normal=normals[idx],
        opacity3d=scene.opacity3d[idx],
        whiten=whiten,
        rot=rot,
        inv_scale=inv_scale,
    )


def camera_rays(camera: Camera, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Unit world-frame directions through the given pixel coordinates."""
    d_cam = np.stack(
        [(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, np.ones_like(px)],
        axis=-1,
    )
    d_world = d_cam @ camera.rotation_wc
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def alphas_3d(
    frame: Frame,
    geom: Geometry3D,
    sel: np.ndarray,
    px: np.ndarray,
    py: np.ndarray,
    camera: Camera,
    options: RenderOptions,
    with_parts: bool = False,
):
    """Plane-intersection alphas for the selected sorted splats at pixels
    (px, py): shape (n, P). With with_parts, also returns sparse backward
    inputs (idx_n, idx_p, y, grad_mask) over the candidate pairs, where y
    holds the whitened intersection offsets and grad_mask marks entries
    with usable gradients (hit accepted, unclamped, above alpha_min).

    Geometry is evaluated only on (splat, pixel) pairs inside the 2D
    footprint; everything outside is zero by the candidate-set rule.
    """
    n, p = len(sel), len(px)
    alpha = np.zeros((n, p))
    # candidate set: the 2D footprint must cover the pixel
    dx = px[None, :] - frame.mean2d[sel, 0][:, None]
    dy = py[None, :] - frame.mean2d[sel, 1][:, None]
    inside = dx * dx + dy * dy <= frame.radius[sel][:, None] ** 2
    idx_n, idx_p = np.nonzero(inside)
    if idx_n.size == 0:
        if not with_parts:
            return alpha
        return alpha, idx_n, idx_p, np.zeros((0, 3)), np.zeros(0, dtype=bool)

    gs = sel[idx_n]
    dirs = camera_rays(camera, px, py)[idx_p]
    nrm = geom.normal[gs]
    nd = np.einsum("kj,kj->k", nrm, dirs)
    ok = np.abs(nd) >= EPS_PARALLEL
    t = geom.nmu_no[gs] / np.where(ok, nd, 1.0)
    ok &= t > 0

    # intersection offset from the center: t*d + (o - mu)
    delta = t[:, None] * dirs + (geom.origin - geom.mu[gs])
    y = np.einsum("kij,kj->ki", geom.whiten[gs], delta)
    q = np.einsum("ki,ki->k", y, y)
    a = geom.opacity3d[gs] * np.exp(-0.5 * q)
    a = np.where(ok, a, 0.0)

    unclamped = a <= ALPHA_CLAMP
    a = np.minimum(a, ALPHA_CLAMP)
    if options.alpha_min > 0:
        a = np.where(a < options.alpha_min, 0.0, a)
    alpha[idx_n, idx_p] = a
    if not with_parts:
        return alpha
    grad_mask = ok & unclamped & (a > 0)
    return alpha, idx_n, idx_p, y, grad_mask


def render3d(
    scene: Scene,
    normals: np.ndarray | None,
    camera: Camera,
    options: RenderOptions | None = None,
) -> RenderOutput:
    """Composite plane-sampled 3D falloffs in the global 2D depth order.

    normals may be None when every Gaussian carries a stored normal.
    """
    options = options or RenderOptions()
    if options.norm_exponents is not None:
        raise InvalidInputError("norm_exponents applies to the 2D rasterizer only")
    out = _blank_output(camera, options.background)
    if len(scene) == 0:
        return out
    if normals is None:
        normals = resolve_normals(scene)
    frame = prepare_frame(scene, camera, options)
    geom = prepare_geometry3d(scene, normals, camera, frame)
    tile = options.tile_size

    def worker(t: int):
        r0, r1, c0, c1 = tile_rect(frame, t, camera, tile)
        sel = frame.tile_flat[frame.tile_bounds[t]:frame.tile_bounds[t + 1]]
        px, py = pixel_centers(r0, r1, c0, c1)
        alpha = alphas_3d(frame, geom, sel, px, py, camera, options)
        return composite(alpha, frame.color[sel], options.background, options.t_stop)

    results = _run_tiles(frame, camera, options, worker)
    for t, (color, weight, count, tfinal) in enumerate(results):
        r0, r1, c0, c1 = tile_rect(frame, t, camera, tile)
        shape = (r1 - r0, c1 - c0)
        out.color[r0:r1, c0:c1] = color.reshape(shape + (3,))
        out.weight_sum[r0:r1, c0:c1] = weight.reshape(shape)
        out.contrib_count[r0:r1, c0:c1] = count.reshape(shape)
        out.final_transmittance[r0:r1, c0:c1] = tfinal.reshape(shape)
    return out


# ------------------------------------------------------------------- export

def save_normal_map_pfm(nm: NormalMap, path) -> None:
    write_pfm(nm.normals, path)


def save_normal_map_png(nm: NormalMap, path) -> None:
    """Color-coded export: (n + 1) / 2 per channel, invalid pixels black."""
    img = (nm.normals + 1.0) / 2.0
    img = np.where(nm.valid[..., None], img, 0.0)
    save_png(img, path, encoding="linear")
