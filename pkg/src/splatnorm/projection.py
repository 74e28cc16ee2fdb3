"""EWA projection of 3D Gaussians to screen-space splats.

cov2d = (J W Sigma W^T J^T) + dilation * I with J the pinhole Jacobian at the
Gaussian center and W the world-to-camera rotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EPS_Z, Camera, Gaussian, InvalidInputError, Scene, quat_to_rotation

# Default screen-space dilation (px^2) and footprint cutoff (in sigmas).
DILATION = 0.3
CUTOFF_SIGMA = 3.0


@dataclass(frozen=True)
class Splat2D:
    """One projected Gaussian. ``radius`` is a conservative footprint radius
    in pixels, at least 3 sigma of the largest screen-space axis.
    """

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int
    radius: float


@dataclass
class Splats:
    """Projected, non-culled splats in scene order (struct of arrays).

    ``axes2d`` holds J W R diag(s) per splat, so cov2d = axes2d axes2d^T
    + dilation I; the columns are the screen-space images of the Gaussian's
    principal axes (the 2D gradient path differentiates through them).
    """

    gaussian_index: np.ndarray  # (M,) int, into the source Scene
    mean2d: np.ndarray          # (M, 2)
    cov2d: np.ndarray           # (M, 2, 2)
    conic: np.ndarray           # (M, 3) inverse covariance (a, b, c)
    depth: np.ndarray           # (M,)
    radius: np.ndarray          # (M,)
    axes2d: np.ndarray          # (M, 2, 3)

    def __len__(self) -> int:
        return len(self.gaussian_index)


def covariance3d(scale, rotation) -> np.ndarray:
    """Sigma = R diag(s^2) R^T for one (3,)/(4,) pair or batches (N, 3)/(N, 4)."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
        raise InvalidInputError("scale must be positive and finite")
    R = quat_to_rotation(rotation)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def pinhole_jacobian(camera: Camera, point_cam) -> np.ndarray:
    """Jacobian of the pinhole projection at a camera-frame point (2, 3)."""
    x, y, z = np.asarray(point_cam, dtype=np.float64)
    if z <= EPS_Z:
        raise InvalidInputError("Jacobian undefined at or behind the camera plane")
    return np.array([
        [camera.fx / z, 0.0, -camera.fx * x / (z * z)],
        [0.0, camera.fy / z, -camera.fy * y / (z * z)],
    ])


def footprint_radius(cov2d) -> float:
    """3 sigma of the largest eigenvalue of a 2x2 SPD covariance, in pixels."""
    cov2d = np.asarray(cov2d, dtype=np.float64)
    if cov2d.shape != (2, 2) or abs(cov2d[0, 1] - cov2d[1, 0]) > 1e-9:
        raise InvalidInputError("cov2d must be symmetric 2x2")
    lmax, lmin = _eigenvalues_2x2(cov2d[0, 0], cov2d[0, 1], cov2d[1, 1])
    if lmin <= 0 or not np.isfinite(lmax):
        raise InvalidInputError("cov2d must be positive definite")
    return float(3.0 * np.sqrt(lmax))


def _eigenvalues_2x2(a, b, c):
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b**2, 0.0))
    return mid + disc, mid - disc


def project_scene(
    scene: Scene,
    camera: Camera,
    dilation: float = DILATION,
    cutoff_sigma: float = CUTOFF_SIGMA,
) -> Splats:
    """Project every Gaussian; cull behind-camera and fully off-image splats.

    Output order equals scene order. ``cutoff_sigma`` scales the stored
    footprint radius (floored at 3 sigma).
    """
    n = len(scene)
    if n == 0:
        return Splats(
            gaussian_index=np.zeros(0, dtype=np.int64), mean2d=np.zeros((0, 2)),
            cov2d=np.zeros((0, 2, 2)), conic=np.zeros((0, 3)), depth=np.zeros(0),
            radius=np.zeros(0), axes2d=np.zeros((0, 2, 3)),
        )
    W = camera.rotation_wc
    cam = scene.mu @ W.T + camera.translation_wc
    z = cam[:, 2]
    front = z > EPS_Z
    safe_z = np.where(front, z, 1.0)

    u = camera.fx * cam[:, 0] / safe_z + camera.cx
    v = camera.fy * cam[:, 1] / safe_z + camera.cy
    mean2d = np.stack([u, v], axis=1)

    # J W R diag(s): (N, 2, 3)
    R3 = quat_to_rotation(scene.rotation)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / safe_z
    J[:, 1, 1] = camera.fy / safe_z
    J[:, 0, 2] = -camera.fx * cam[:, 0] / safe_z**2
    J[:, 1, 2] = -camera.fy * cam[:, 1] / safe_z**2
    axes2d = (J @ W @ R3) * scene.scale[:, None, :]

    cov2d = axes2d @ np.swapaxes(axes2d, 1, 2)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lmax, lmin = _eigenvalues_2x2(a, b, c)
    det = a * c - b * b
    spd = (lmin > 0) & (det > 0) & np.isfinite(lmax)

    radius = max(float(cutoff_sigma), 3.0) * np.sqrt(np.maximum(lmax, 0.0))
    on_image = (
        (mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < camera.width)
        & (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < camera.height)
    )
    keep = front & spd & on_image
    idx = np.flatnonzero(keep)

    safe_det = np.where(keep, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)
    return Splats(
        gaussian_index=idx.astype(np.int64),
        mean2d=mean2d[idx],
        cov2d=cov2d[idx],
        conic=conic[idx],
        depth=z[idx],
        radius=radius[idx],
        axes2d=axes2d[idx],
    )


def project_gaussian(
    g: Gaussian,
    camera: Camera,
    dilation: float = DILATION,
    cutoff_sigma: float = CUTOFF_SIGMA,
) -> Splat2D | None:
    """Project one Gaussian; None when culled."""
    scene = Scene.from_gaussians([g])
    splats = project_scene(scene, camera, dilation=dilation, cutoff_sigma=cutoff_sigma)
    if len(splats) == 0:
        return None
    return Splat2D(
        mean2d=splats.mean2d[0],
        cov2d=splats.cov2d[0],
        depth=float(splats.depth[0]),
        gaussian_index=0,
        radius=float(splats.radius[0]),
    )
