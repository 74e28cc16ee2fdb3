"""Front-to-back alpha compositing of projected Gaussians (2D branch).

Tiled renderer plus a brute-force reference that evaluates every splat at
every pixel with no tiling and no footprint cutoff. Both share the same
depth sort, clamps, and early-out so they agree to float tolerance.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Camera, InvalidInputError, Scene
from .projection import CUTOFF_SIGMA, DILATION, Splats, project_scene

# Upper clamp keeps transmittance strictly positive, as in standard splatting.
ALPHA_CLAMP = 0.999


@dataclass
class RenderOptions:
    """Rasterization knobs shared by the 2D and 3D branches.

    ``norm_exponents`` enables the exact per-pixel alpha normalization mode:
    one exponent m_ref / m_tilde per scene Gaussian, applied as
    alpha -> 1 - (1 - alpha)^e before the alpha_min skip.
    """

    alpha_min: float = 1.0 / 255.0
    t_stop: float = 1e-4
    dilation: float = DILATION
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile_size: int = 16
    cutoff_sigma: float = CUTOFF_SIGMA
    threads: int = 1
    norm_exponents: np.ndarray | None = None

    def replace(self, **kwargs) -> "RenderOptions":
        return replace(self, **kwargs)


@dataclass
class RenderOutput:
    color: np.ndarray               # (H, W, 3)
    weight_sum: np.ndarray          # (H, W)
    contrib_count: np.ndarray       # (H, W) int
    final_transmittance: np.ndarray  # (H, W)


def depth_sort_indices(splats) -> np.ndarray:
    """Indices ordering splats by ascending depth, ties by ascending index."""
    depth = splats.depth if isinstance(splats, Splats) else np.asarray(splats, dtype=np.float64)
    if np.any(np.isnan(depth)):
        raise InvalidInputError("NaN depth in splat list")
    return np.argsort(depth, kind="stable")


@dataclass
class Frame:
    """Splat arrays in compositing (front-to-back) order plus tile bins."""

    gaussian_index: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    radius: np.ndarray
    axes2d: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    exponents: np.ndarray | None
    tile_flat: np.ndarray    # splat positions (into the sorted arrays) grouped by tile
    tile_bounds: np.ndarray  # (ntiles+1,) segment boundaries into tile_flat
    ntx: int
    nty: int


def _bin_tiles(mean2d, radius, camera: Camera, tile: int):
    """Group splats (given in compositing order) by overlapped tile.

    Returns (flat, bounds, ntx, nty): for tile t, flat[bounds[t]:bounds[t+1]]
    lists splat positions in compositing order.
    """
    ntx = -(-camera.width // tile)
    nty = -(-camera.height // tile)
    m = len(radius)
    if m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(ntx * nty + 1, dtype=np.int64), ntx, nty
    tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / tile).astype(np.int64), 0, ntx - 1)
    tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / tile).astype(np.int64), 0, ntx - 1)
    ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / tile).astype(np.int64), 0, nty - 1)
    ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / tile).astype(np.int64), 0, nty - 1)
    cw = tx1 - tx0 + 1
    ch = ty1 - ty0 + 1
    counts = cw * ch
    total = int(counts.sum())
    rep = np.repeat(np.arange(m, dtype=np.int64), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total, dtype=np.int64) - offsets[rep]
    loc_x = within % cw[rep]
    loc_y = within // cw[rep]
    tile_id = (ty0[rep] + loc_y) * ntx + (tx0[rep] + loc_x)
    order = np.argsort(tile_id, kind="stable")  # stable keeps compositing order per tile
    flat = rep[order]
    bounds = np.searchsorted(tile_id[order], np.arange(ntx * nty + 1))
    return flat, bounds, ntx, nty


def prepare_frame(scene: Scene, camera: Camera, options: RenderOptions) -> Frame:
    """Project, depth-sort, and tile-bin a scene for one view."""
    splats = project_scene(scene, camera, options.dilation, options.cutoff_sigma)
    order = depth_sort_indices(splats)
    gidx = splats.gaussian_index[order]
    mean2d = splats.mean2d[order]
    radius = splats.radius[order]
    exponents = None
    if options.norm_exponents is not None:
        e = np.asarray(options.norm_exponents, dtype=np.float64)
        if e.shape != (len(scene),):
            raise InvalidInputError(
                f"norm_exponents must have shape ({len(scene)},), got {e.shape}"
            )
        if np.any(e <= 0) or not np.all(np.isfinite(e)):
            raise InvalidInputError("norm_exponents must be positive and finite")
        exponents = e[gidx]
    flat, bounds, ntx, nty = _bin_tiles(mean2d, radius, camera, options.tile_size)
    return Frame(
        gaussian_index=gidx,
        mean2d=mean2d,
        conic=splats.conic[order],
        radius=radius,
        axes2d=splats.axes2d[order],
        opacity=scene.opacity[gidx],
        color=scene.color[gidx],
        exponents=exponents,
        tile_flat=flat,
        tile_bounds=bounds,
        ntx=ntx,
        nty=nty,
    )


def tile_rect(frame: Frame, t: int, camera: Camera, tile: int):
    ty, tx = divmod(t, frame.ntx)
    r0, c0 = ty * tile, tx * tile
    return r0, min(r0 + tile, camera.height), c0, min(c0 + tile, camera.width)


def pixel_centers(r0, r1, c0, c1):
    """Flattened pixel-center coordinates of a rect, row-major."""
    px = np.tile(np.arange(c0, c1) + 0.5, r1 - r0)
    py = np.repeat(np.arange(r0, r1) + 0.5, c1 - c0)
    return px, py


def alphas_2d(frame: Frame, sel: np.ndarray, px, py, options: RenderOptions,
              cutoff: bool = True, with_parts: bool = False):
    """Per-pixel alphas (n, P) for the selected splats, clamps applied.

    with_parts additionally returns (dx, dy, grad_mask) for the backward
    pass; grad_mask marks entries where alpha varies with the parameters
    (not cut off, not clamped, not skipped).
    """
    mx = frame.mean2d[sel, 0][:, None]
    my = frame.mean2d[sel, 1][:, None]
    ca = frame.conic[sel, 0][:, None]
    cb = frame.conic[sel, 1][:, None]
    cc = frame.conic[sel, 2][:, None]
    dx = px[None, :] - mx
    dy = py[None, :] - my
    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    alpha = frame.opacity[sel][:, None] * np.exp(-0.5 * q)
    if cutoff:
        alpha[dx * dx + dy * dy > (frame.radius[sel] ** 2)[:, None]] = 0.0
    unclamped = alpha <= ALPHA_CLAMP
    np.minimum(alpha, ALPHA_CLAMP, out=alpha)
    if frame.exponents is not None:
        alpha = 1.0 - np.power(1.0 - alpha, frame.exponents[sel][:, None])
        unclamped &= alpha <= ALPHA_CLAMP
        np.minimum(alpha, ALPHA_CLAMP, out=alpha)
    alpha[alpha < options.alpha_min] = 0.0
    if not with_parts:
        return alpha
    return alpha, dx, dy, unclamped & (alpha > 0)


def composite(alpha: np.ndarray, colors: np.ndarray, background, t_stop: float):
    """Front-to-back composite of per-pixel alphas (n, P) in row order.

    Returns (color (P, 3), weight (P,), count (P,), final_transmittance (P,)).
    Compositing stops once transmittance falls below t_stop (t_stop <= 0
    disables the early-out).
    """
    n, p = alpha.shape
    bg = np.asarray(background, dtype=np.float64)
    if n == 0:
        return (
            np.tile(bg, (p, 1)), np.zeros(p),
            np.zeros(p, dtype=np.int64), np.ones(p),
        )
    cum = np.cumprod(1.0 - alpha, axis=0)
    trans = np.empty_like(cum)
    trans[0] = 1.0
    trans[1:] = cum[:-1]
    weights = alpha * trans
    if t_stop > 0:
        active = trans >= t_stop
        weights = weights * active
        count = ((alpha > 0) & active).sum(axis=0)
        n_eff = active.sum(axis=0)
    else:
        count = (alpha > 0).sum(axis=0)
        n_eff = np.full(p, n, dtype=np.int64)
    tfinal = np.take_along_axis(cum, np.maximum(n_eff - 1, 0)[None, :], axis=0)[0]
    tfinal = np.where(n_eff > 0, tfinal, 1.0)
    color = weights.T @ colors + tfinal[:, None] * bg
    return color, weights.sum(axis=0), count, tfinal


def _blank_output(camera: Camera, background) -> RenderOutput:
    bg = np.asarray(background, dtype=np.float64)
    h, w = camera.height, camera.width
    return RenderOutput(
        color=np.tile(bg, (h, w, 1)),
        weight_sum=np.zeros((h, w)),
        contrib_count=np.zeros((h, w), dtype=np.int64),
        final_transmittance=np.ones((h, w)),
    )


def _run_tiles(frame: Frame, camera: Camera, options: RenderOptions, worker):
    """Run a per-tile worker over all tiles, optionally threaded.

    The worker returns per-pixel arrays for its rect; writes happen on the
    calling thread in fixed tile order, so results do not depend on the
    thread count.
    """
    tiles = range(frame.ntx * frame.nty)
    if options.threads > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            return list(pool.map(worker, tiles))
    return [worker(t) for t in tiles]


def render(scene: Scene, camera: Camera, options: RenderOptions | None = None) -> RenderOutput:
    """Tiled front-to-back compositing; see RenderOptions for knobs."""
    options = options or RenderOptions()
    out = _blank_output(camera, options.background)
    if len(scene) == 0:
        return out
    frame = prepare_frame(scene, camera, options)
    tile = options.tile_size

    def worker(t: int):
        r0, r1, c0, c1 = tile_rect(frame, t, camera, tile)
        sel = frame.tile_flat[frame.tile_bounds[t]:frame.tile_bounds[t + 1]]
        px, py = pixel_centers(r0, r1, c0, c1)
        alpha = alphas_2d(frame, sel, px, py, options)
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


def render_reference(scene: Scene, camera: Camera, options: RenderOptions | None = None) -> RenderOutput:
    """Oracle renderer: every projected splat evaluated at every pixel.

    No tiling, no footprint cutoff; same sort, clamps, and early-out as
    render. Single-threaded; pixels are chunked by rows purely to bound
    memory (per-pixel results are independent of chunking).
    """
    options = options or RenderOptions()
    out = _blank_output(camera, options.background)
    if len(scene) == 0:
        return out
    frame = prepare_frame(scene, camera, options)
    m = max(len(frame.gaussian_index), 1)
    rows_per_chunk = max(1, 4_000_000 // (m * camera.width))
    for r0 in range(0, camera.height, rows_per_chunk):
        r1 = min(r0 + rows_per_chunk, camera.height)
        px, py = pixel_centers(r0, r1, 0, camera.width)
        sel = np.arange(len(frame.gaussian_index))
        alpha = alphas_2d(frame, sel, px, py, options, cutoff=False)
        color, weight, count, tfinal = composite(
            alpha, frame.color, options.background, options.t_stop
        )
        shape = (r1 - r0, camera.width)
        out.color[r0:r1] = color.reshape(shape + (3,))
        out.weight_sum[r0:r1] = weight.reshape(shape)
        out.contrib_count[r0:r1] = count.reshape(shape)
        out.final_transmittance[r0:r1] = tfinal.reshape(shape)
    return out
