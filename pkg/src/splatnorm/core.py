"""Core geometry types: Gaussians, scenes, cameras, depth maps.

Conventions used throughout the package:

* right-handed coordinates, camera looks down +z in its own frame
* image origin top-left, pixel (row r, col c) has center (u, v) = (c + 0.5, r + 0.5)
* pixel coordinates are (u, v) with u = fx * X/Z + cx and v = fy * Y/Z + cy
* quaternions are (w, x, y, z)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

# Points with camera-frame depth at or below this are behind the camera.
EPS_Z = 1e-6


class InvalidInputError(ValueError):
    """A value violates a documented precondition."""


class BehindCameraError(ValueError):
    """A point at or behind the camera plane was projected."""


class ParseError(ValueError):
    """A file could not be parsed. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _as_float(x, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidInputError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def quat_to_rotation(q) -> np.ndarray:
    """Convert unit quaternion(s) (w, x, y, z) to rotation matrix/matrices.

    Accepts shape (4,) or (N, 4); returns (3, 3) or (N, 3, 3). Quaternions
    are renormalized internally; a zero-norm quaternion is an error.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[-1] != 4:
        raise InvalidInputError(f"quaternion must have 4 components, got shape {q.shape}")
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm < 1e-12) or not np.all(np.isfinite(norm)):
        raise InvalidInputError("zero-norm or non-finite quaternion")
    w, x, y, z = (q / norm[..., None]).T

    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation_wc`` / ``translation_wc`` map world to camera:
    x_cam = R @ x_world + t.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation_wc: np.ndarray
    translation_wc: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation_wc", _as_float(self.rotation_wc, (3, 3), "rotation_wc"))
        object.__setattr__(self, "translation_wc", _as_float(self.translation_wc, (3,), "translation_wc"))
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image dimensions must be at least 1x1")
        R = self.rotation_wc
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise InvalidInputError("rotation_wc is not orthonormal (1e-6)")
        if np.linalg.det(R) < 0:
            raise InvalidInputError("rotation_wc must have determinant +1")
        for name in ("rotation_wc", "translation_wc"):
            arr = getattr(self, name).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation_wc.T @ self.translation_wc

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) into the camera frame."""
        return points @ self.rotation_wc.T + self.translation_wc

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation_wc) @ self.rotation_wc

    def zoomed(self, factor: float) -> "Camera":
        """Scale the focal lengths, principal point and resolution unchanged."""
        if factor <= 0:
            raise InvalidInputError("zoom factor must be positive")
        return replace(self, fx=self.fx * factor, fy=self.fy * factor)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates, two (H, W) arrays (u, v)."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        return np.broadcast_to(u, (self.height, self.width)).copy(), np.broadcast_to(
            v[:, None], (self.height, self.width)
        ).copy()


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (..., 3) to pixel coordinates (..., 2) and depths.

    No visibility test: depths may be non-positive and pixels out of bounds;
    callers mask. Behind-camera pixel values are meaningless.
    """
    cam = camera.to_camera(np.asarray(points, dtype=np.float64))
    z = cam[..., 2]
    # avoid divide warnings at or behind the camera; results there are masked by callers
    safe_z = np.where(np.abs(z) < EPS_Z, EPS_Z, z)
    u = camera.fx * cam[..., 0] / safe_z + camera.cx
    v = camera.fy * cam[..., 1] / safe_z + camera.cy
    return np.stack([u, v], axis=-1), z


def project(camera: Camera, x) -> tuple[np.ndarray, float]:
    """Project one world point; raises BehindCameraError for z <= 1e-6."""
    x = _as_float(x, (3,), "point")
    pix, z = project_points(camera, x)
    if z <= EPS_Z:
        raise BehindCameraError(f"point has camera depth {z:.3g}")
    return pix, float(z)


def backproject(camera: Camera, pixel, depth) -> np.ndarray:
    """Inverse of project: pixel (u, v) plus camera-frame depth to a world point.

    Vectorizes over leading dimensions of ``pixel``/``depth``.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
        raise InvalidInputError("depth must be positive and finite")
    x = (pixel[..., 0] - camera.cx) / camera.fx * depth
    y = (pixel[..., 1] - camera.cy) / camera.fy * depth
    cam = np.stack([x, y, depth], axis=-1)
    return camera.to_world(cam)


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic 3D Gaussian primitive.

    ``opacity3d`` is the opacity used by the 3D sampling branch and defaults
    to ``opacity``. ``normal`` is a world-frame unit vector or None.
    """

    mu: np.ndarray
    opacity: float
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity3d: float | None = None
    normal: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_float(self.mu, (3,), "mu"))
        object.__setattr__(self, "scale", _as_float(self.scale, (3,), "scale"))
        object.__setattr__(self, "rotation", _as_float(self.rotation, (4,), "rotation"))
        object.__setattr__(self, "color", _as_float(self.color, (3,), "color"))
        if self.opacity3d is None:
            object.__setattr__(self, "opacity3d", float(self.opacity))
        if self.normal is not None:
            object.__setattr__(self, "normal", _as_float(self.normal, (3,), "normal"))


def _check_unit_rows(arr: np.ndarray, name: str, atol: float = 1e-6) -> None:
    norms = np.linalg.norm(arr, axis=-1)
    if not np.allclose(norms, 1.0, atol=atol):
        raise InvalidInputError(f"{name} rows must be unit-norm within {atol}")


@dataclass
class Scene:
    """Ordered collection of Gaussians, stored as arrays.

    Index order is the global primitive order used for tie-breaking in depth
    sorts, so it is part of the data. Arrays are frozen after validation;
    transforms return new Scenes. Absent normals are NaN rows. ``prov_view``
    / ``prov_pixel`` record (source view, source pixel (row, col)) or None.
    """

    mu: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity3d: np.ndarray
    normal: np.ndarray | None = None
    prov_view: np.ndarray | None = None
    prov_pixel: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.mu.ndim != 2 or self.mu.shape[1] != 3:
            raise InvalidInputError(f"mu must be (N, 3), got {self.mu.shape}")
        n = len(self.mu)
        self.opacity = _as_float(self.opacity, (n,), "opacity")
        self.scale = _as_float(self.scale, (n, 3), "scale")
        self.rotation = _as_float(self.rotation, (n, 4), "rotation")
        self.color = _as_float(self.color, (n, 3), "color")
        self.opacity3d = _as_float(self.opacity3d, (n,), "opacity3d")

        if not np.all(np.isfinite(self.mu)):
            raise InvalidInputError("mu must be finite")
        for name in ("opacity", "opacity3d"):
            v = getattr(self, name)
            if np.any((v < 0) | (v > 1)) or not np.all(np.isfinite(v)):
                raise InvalidInputError(f"{name} must lie in [0, 1]")
        if np.any(self.scale <= 0) or not np.all(np.isfinite(self.scale)):
            raise InvalidInputError("scale must be positive and finite")
        _check_unit_rows(self.rotation, "rotation")
        if np.any((self.color < 0) | (self.color > 1)):
            raise InvalidInputError("color must lie in [0, 1]")

        if self.normal is not None:
            self.normal = _as_float(self.normal, (n, 3), "normal")
            present = ~np.any(np.isnan(self.normal), axis=1)
            if np.any(present):
                _check_unit_rows(self.normal[present], "normal")
        if (self.prov_view is None) != (self.prov_pixel is None):
            raise InvalidInputError("provenance needs both view and pixel")
        if self.prov_view is not None:
            self.prov_view = np.asarray(self.prov_view, dtype=np.int64)
            self.prov_pixel = np.asarray(self.prov_pixel, dtype=np.int64)
            if self.prov_view.shape != (n,) or self.prov_pixel.shape != (n, 2):
                raise InvalidInputError("provenance arrays must be (N,) and (N, 2)")
            if np.any(self.prov_view < 0) or np.any(self.prov_pixel < 0):
                raise InvalidInputError("provenance indices must be non-negative")

        # freeze copies so neither side can mutate the other's arrays;
        # already-frozen owners (e.g. fields of another Scene) are adopted
        # as-is so replace() shares untouched arrays
        for name in ("mu", "opacity", "scale", "rotation", "color",
                     "opacity3d", "normal", "prov_view", "prov_pixel"):
            arr = getattr(self, name)
            if arr is not None:
                if arr.flags.writeable or arr.base is not None:
                    arr = arr.copy()
                    arr.flags.writeable = False
                setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> Gaussian:
        normal = None
        if self.normal is not None and not np.any(np.isnan(self.normal[i])):
            normal = self.normal[i].copy()
        return Gaussian(
            mu=self.mu[i].copy(),
            opacity=float(self.opacity[i]),
            scale=self.scale[i].copy(),
            rotation=self.rotation[i].copy(),
            color=self.color[i].copy(),
            opacity3d=float(self.opacity3d[i]),
            normal=normal,
        )

    def __iter__(self) -> Iterator[Gaussian]:
        return (self[i] for i in range(len(self)))

    @property
    def has_provenance(self) -> bool:
        return self.prov_view is not None

    @classmethod
    def empty(cls) -> "Scene":
        return cls(
            mu=np.zeros((0, 3)), opacity=np.zeros(0), scale=np.zeros((0, 3)),
            rotation=np.zeros((0, 4)), color=np.zeros((0, 3)), opacity3d=np.zeros(0),
        )

    @classmethod
    def from_gaussians(
        cls,
        gaussians: Sequence[Gaussian],
        prov_view=None,
        prov_pixel=None,
    ) -> "Scene":
        if len(gaussians) == 0:
            return cls.empty()
        normal = None
        if any(g.normal is not None for g in gaussians):
            normal = np.full((len(gaussians), 3), np.nan)
            for i, g in enumerate(gaussians):
                if g.normal is not None:
                    normal[i] = g.normal
        return cls(
            mu=np.array([g.mu for g in gaussians]),
            opacity=np.array([g.opacity for g in gaussians]),
            scale=np.array([g.scale for g in gaussians]),
            rotation=np.array([g.rotation for g in gaussians]),
            color=np.array([g.color for g in gaussians]),
            opacity3d=np.array([g.opacity3d for g in gaussians]),
            normal=normal,
            prov_view=prov_view,
            prov_pixel=prov_pixel,
        )

    def replace(self, **kwargs) -> "Scene":
        """New Scene with some arrays swapped out; the rest are shared."""
        fields = dict(
            mu=self.mu, opacity=self.opacity, scale=self.scale, rotation=self.rotation,
            color=self.color, opacity3d=self.opacity3d, normal=self.normal,
            prov_view=self.prov_view, prov_pixel=self.prov_pixel,
        )
        fields.update(kwargs)
        return Scene(**fields)


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel camera-frame z for one view. Non-positive values mark
    invalid pixels.
    """

    values: np.ndarray
    camera: Camera

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise InvalidInputError(f"depth values must be 2D, got shape {v.shape}")
        if v.shape != (self.camera.height, self.camera.width):
            raise InvalidInputError(
                f"depth shape {v.shape} does not match camera "
                f"{(self.camera.height, self.camera.width)}"
            )
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("depth values must be finite")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def valid(self) -> np.ndarray:
        """(H, W) bool mask of valid pixels."""
        return self.values > 0
