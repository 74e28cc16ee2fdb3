"""Alpha normalization and multi-view overlap counting.

The normalization transform alpha -> 1 - (1 - alpha)^(m_ref / m_tilde)
keeps the accumulated compositing weight of m_tilde overlapping copies equal
to that of m_ref copies. Overlap counts come from cross-view depth
consistency: view k agrees with pixel p of view i when the depth of view k's
corresponding surfel, re-expressed in view i's frame, passes a relative test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import EPS_Z, Camera, DepthMap, InvalidInputError, Scene, backproject
from .io import load_png16, save_png16
from .rasterizer import ALPHA_CLAMP


@dataclass(frozen=True)
class NormalizationConfig:
    m_ref: float = 1.0
    tau: float = 0.5

    def __post_init__(self):
        if self.m_ref <= 0:
            raise InvalidInputError("m_ref must be positive")
        if not 0 < self.tau < 1:
            raise InvalidInputError("tau must lie in (0, 1)")


@dataclass(frozen=True)
class CountMap:
    """Per-pixel number of views that agree on the surface seen at each
    pixel of one view. Valid pixels count at least the view itself; 0 marks
    invalid-depth pixels.
    """

    counts: np.ndarray
    view_index: int

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or np.any(c < 0):
            raise InvalidInputError("counts must be a non-negative 2D integer raster")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)


def alpha_normalize(alpha, m_ref, m_tilde):
    """alpha -> 1 - (1 - alpha)^(m_ref / m_tilde), elementwise.

    Inputs at or above the compositing clamp are clamped to 0.999 first.
    """
    alpha_arr = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha_arr < 0) or np.any(alpha_arr > 1) or not np.all(np.isfinite(alpha_arr)):
        raise InvalidInputError("alpha must lie in [0, 1]")
    m_tilde_arr = np.asarray(m_tilde)
    if np.any(m_tilde_arr < 1):
        raise InvalidInputError("m_tilde must be at least 1")
    if m_ref <= 0:
        raise InvalidInputError("m_ref must be positive")
    clamped = np.minimum(alpha_arr, ALPHA_CLAMP)
    result = 1.0 - np.power(1.0 - clamped, m_ref / np.asarray(m_tilde_arr, dtype=np.float64))
    return result if result.ndim else float(result)


def normalization_exponents(counts, config: NormalizationConfig) -> np.ndarray:
    """Per-Gaussian exponents m_ref / m_tilde for RenderOptions.norm_exponents."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise InvalidInputError("counts must be at least 1")
    return config.m_ref / counts


def warp_depth(source: DepthMap, target_camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Forward-warp a depth map into a target view.

    Returns (pixel_map, warped): pixel_map is (H, W, 2) with the target
    (row, col) each valid source pixel lands in (-1 where dropped), warped is
    the target-sized raster of target-frame z values, z-buffered (nearest
    wins), 0 where nothing lands.
    """
    h, w = source.values.shape
    pixel_map = np.full((h, w, 2), -1, dtype=np.int64)
    warped = np.full((target_camera.height, target_camera.width), np.inf)

    valid = source.valid
    if np.any(valid):
        rows, cols = np.nonzero(valid)
        pix = np.stack([cols + 0.5, rows + 0.5], axis=1)
        world = backproject(source.camera, pix, source.values[rows, cols])
        cam = target_camera.to_camera(world)
        z = cam[:, 2]
        front = z > EPS_Z
        safe_z = np.where(front, z, 1.0)
        u = target_camera.fx * cam[:, 0] / safe_z + target_camera.cx
        v = target_camera.fy * cam[:, 1] / safe_z + target_camera.cy
        tc = np.floor(u).astype(np.int64)
        tr = np.floor(v).astype(np.int64)
        keep = front & (tc >= 0) & (tc < target_camera.width) & (tr >= 0) & (tr < target_camera.height)
        pixel_map[rows[keep], cols[keep], 0] = tr[keep]
        pixel_map[rows[keep], cols[keep], 1] = tc[keep]
        np.minimum.at(warped, (tr[keep], tc[keep]), z[keep])

    warped[~np.isfinite(warped)] = 0.0
    return pixel_map, warped


def count_map(depths: list[DepthMap], view_i: int, config: NormalizationConfig | None = None) -> CountMap:
    """Number of views whose depth agrees with view_i at each of its pixels.

    Per valid pixel p: back-project with D_i(p), project into view k, sample
    D_k nearest-neighbor at the landing pixel, re-express that surfel's depth
    in view i's frame, and count k when |D_i - z| / (D_i + z) <= tau. The
    self view always counts; invalid pixels get 0.
    """
    config = config or NormalizationConfig()
    if not 0 <= view_i < len(depths):
        raise InvalidInputError(f"view_i {view_i} out of range for {len(depths)} views")
    ref = depths[view_i]
    cam_i = ref.camera
    valid = ref.valid
    counts = valid.astype(np.int64)
    if not np.any(valid):
        return CountMap(counts=counts, view_index=view_i)

    rows, cols = np.nonzero(valid)
    d_i = ref.values[rows, cols]
    world = backproject(cam_i, np.stack([cols + 0.5, rows + 0.5], axis=1), d_i)

    for k, other in enumerate(depths):
        if k == view_i:
            continue
        cam_k = other.camera
        cam = cam_k.to_camera(world)
        z = cam[:, 2]
        front = z > EPS_Z
        safe_z = np.where(front, z, 1.0)
        u = cam_k.fx * cam[:, 0] / safe_z + cam_k.cx
        v = cam_k.fy * cam[:, 1] / safe_z + cam_k.cy
        pc = np.floor(u).astype(np.int64)
        pr = np.floor(v).astype(np.int64)
        inside = front & (pc >= 0) & (pc < cam_k.width) & (pr >= 0) & (pr < cam_k.height)
        pc_s = np.where(inside, pc, 0)
        pr_s = np.where(inside, pr, 0)
        d_k = other.values[pr_s, pc_s]
        usable = inside & (d_k > 0)

        # view k's surfel at the landing pixel, re-expressed in view i's frame
        surfel = backproject(
            cam_k,
            np.stack([pc_s + 0.5, pr_s + 0.5], axis=1),
            np.where(usable, d_k, 1.0),
        )
        z_in_i = cam_i.to_camera(surfel)[:, 2]
        usable &= z_in_i > 0
        rel = np.abs(d_i - z_in_i) / np.where(usable, d_i + z_in_i, 1.0)
        counts[rows, cols] += (usable & (rel <= config.tau)).astype(np.int64)

    return CountMap(counts=counts, view_index=view_i)


def per_gaussian_counts(scene: Scene, count_maps: list[CountMap]) -> np.ndarray:
    """m_tilde per Gaussian: its source pixel's count, floored at 1."""
    if not scene.has_provenance:
        raise InvalidInputError("scene has no provenance; cannot look up counts")
    by_view = {cm.view_index: cm for cm in count_maps}
    result = np.ones(len(scene), dtype=np.int64)
    for view in np.unique(scene.prov_view):
        if view not in by_view:
            raise InvalidInputError(f"no count map for source view {view}")
        cm = by_view[int(view)]
        mask = scene.prov_view == view
        r = scene.prov_pixel[mask, 0]
        c = scene.prov_pixel[mask, 1]
        h, w = cm.counts.shape
        if np.any(r >= h) or np.any(c >= w):
            raise InvalidInputError(f"provenance pixel outside count map of view {view}")
        result[mask] = np.maximum(cm.counts[r, c], 1)
    return result


def normalize_scene(scene: Scene, counts, config: NormalizationConfig | None = None) -> Scene:
    """Scene copy with opacities rewritten by the normalization transform.

    Rewriting o realizes the per-pixel transform exactly at each Gaussian's
    mean and approximately elsewhere; exact per-pixel normalization is the
    rasterizer's norm_exponents mode (see normalization_exponents).
    """
    config = config or NormalizationConfig()
    counts = np.asarray(counts)
    if counts.shape != (len(scene),):
        raise InvalidInputError(
            f"counts length {counts.shape} does not match scene size {len(scene)}"
        )
    new_opacity = alpha_normalize(scene.opacity, config.m_ref, counts)
    return scene.replace(opacity=np.asarray(new_opacity, dtype=np.float64))


# ------------------------------------------------------------------- export

def save_count_map_json(cm: CountMap, path) -> None:
    Path(path).write_text(
        json.dumps({"view_index": cm.view_index, "counts": cm.counts.tolist()}) + "\n"
    )


def load_count_map_json(path) -> CountMap:
    data = json.loads(Path(path).read_text())
    return CountMap(counts=np.asarray(data["counts"], dtype=np.int64), view_index=int(data["view_index"]))


def save_count_map_png(cm: CountMap, path) -> None:
    save_png16(cm.counts, path)


def load_count_map_png(path, view_index: int = 0) -> CountMap:
    return CountMap(counts=load_png16(path), view_index=view_index)
