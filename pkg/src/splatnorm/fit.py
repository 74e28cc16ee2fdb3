"""Gradient-based per-scene optimization.

Minimizes (1 - lambda) L2D + lambda L3D over per-Gaussian parameters, with
the 3D-branch gradients restricted by construction to log-scales and
logit-opacity3d. Scales are optimized in log-space and opacities in
logit-space so positivity and (0,1) bounds hold at every iterate. The sort
order, tile binning, and footprint cutoff are treated as constants of each
iteration; their gradients are zero.

Analytic gradients cover the MSE terms; central finite differences over the
same parameterization are kept as a permanent oracle (gradient_mode "fd").
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Camera, InvalidInputError, Scene
from .loss import LossConfig, hole_fraction, mse
from .rasterizer import (
    RenderOptions,
    RenderOutput,
    alphas_2d,
    pixel_centers,
    prepare_frame,
    render,
    tile_rect,
)
from .reg3d import alphas_3d, prepare_geometry3d, render3d, resolve_normals

_LOGIT_EPS = 1e-7


class FitDivergedError(RuntimeError):
    """Loss became non-finite; carries the last scene and history."""

    def __init__(self, message: str, scene: Scene, history: list):
        super().__init__(message)
        self.scene = scene
        self.history = history


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 100
    step_log_scale: float = 0.05
    step_logit_opacity3d: float = 0.05
    step_logit_opacity: float = 0.0
    step_color: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)
    gradient_mode: str = "analytic"
    fd_epsilon: float = 1e-4
    seed: int = 0
    optimizer: str = "gd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    probe_zoom: float = 1.0

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidInputError("iterations must be non-negative")
        for name in ("step_log_scale", "step_logit_opacity3d", "step_logit_opacity", "step_color"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        if self.gradient_mode not in ("analytic", "fd"):
            raise InvalidInputError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.optimizer not in ("gd", "adam"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.fd_epsilon <= 0:
            raise InvalidInputError("fd_epsilon must be positive")
        if self.probe_zoom <= 0:
            raise InvalidInputError("probe_zoom must be positive")

    def replace(self, **kwargs) -> "FitConfig":
        return replace(self, **kwargs)


@dataclass
class Grads2D:
    log_scale: np.ndarray       # (N, 3)
    logit_opacity: np.ndarray   # (N,)
    color: np.ndarray           # (N, 3)


@dataclass
class Grads3D:
    log_scale: np.ndarray        # (N, 3)
    logit_opacity3d: np.ndarray  # (N,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(p / (1.0 - p))


def _require_mse_only(config: FitConfig) -> None:
    if config.loss.perceptual is not None:
        raise InvalidInputError("analytic gradients cover the MSE term only")


def _require_plain_alphas(options: RenderOptions) -> None:
    if options.norm_exponents is not None:
        raise InvalidInputError("gradients do not support the normalization exponent mode")


def _composite_backward(alpha, colors, dldc_pix, background, t_stop):
    """dL/dalpha (n, P) and compositing weights (n, P) for one pixel block.

    Mirrors composite(): the same transmittance recursion, early-out prefix,
    and background term, differentiated with suffix color sums.
    """
    n, p = alpha.shape
    bg = np.asarray(background, dtype=np.float64)
    if n == 0:
        return np.zeros((0, p)), np.zeros((0, p))
    cum = np.cumprod(1.0 - alpha, axis=0)
    trans = np.empty_like(cum)
    trans[0] = 1.0
    trans[1:] = cum[:-1]
    if t_stop > 0:
        active = trans >= t_stop
        n_eff = active.sum(axis=0)
    else:
        active = np.ones(alpha.shape, dtype=bool)
        n_eff = np.full(p, n, dtype=np.int64)
    weights = alpha * trans * active
    tfinal = np.take_along_axis(cum, np.maximum(n_eff - 1, 0)[None, :], axis=0)[0]
    tfinal = np.where(n_eff > 0, tfinal, 1.0)

    contrib = weights[:, :, None] * colors[:, None, :]
    after = np.zeros_like(contrib)
    if n > 1:
        after[:-1] = np.cumsum(contrib[::-1], axis=0)[::-1][1:]
    after += (tfinal[:, None] * bg)[None, :, :]
    dc_dalpha = trans[:, :, None] * colors[:, None, :] - after / (1.0 - alpha)[:, :, None]
    dl_dalpha = np.einsum("npc,pc->np", dc_dalpha, dldc_pix) * active
    return dl_dalpha, weights


def grad_loss2d(
    scene: Scene,
    camera: Camera,
    gt: np.ndarray,
    config: FitConfig | None = None,
    options: RenderOptions | None = None,
    out: RenderOutput | None = None,
) -> Grads2D:
    """Gradient of mse(render(scene).color, gt) w.r.t. log-scale,
    logit-opacity, and color. All other parameters have zero gradient.
    """
    config = config or FitConfig()
    options = options or RenderOptions()
    _require_plain_alphas(options)
    _require_mse_only(config)
    if config.gradient_mode == "fd":
        return _grad_loss2d_fd(scene, camera, gt, config, options)
    gt = np.asarray(gt, dtype=np.float64)
    if out is None:
        out = render(scene, camera, options)
    if out.color.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {out.color.shape} vs {gt.shape}")
    dldc = 2.0 * (out.color - gt) / gt.size

    n = len(scene)
    grads = Grads2D(
        log_scale=np.zeros((n, 3)),
        logit_opacity=np.zeros(n),
        color=np.zeros((n, 3)),
    )
    if n == 0:
        return grads
    frame = prepare_frame(scene, camera, options)
    m = len(frame.gaussian_index)
    if m == 0:
        return grads
    gs_scale = np.zeros((m, 3))
    gs_opac = np.zeros(m)
    gs_color = np.zeros((m, 3))
    tile = options.tile_size

    for t in range(frame.ntx * frame.nty):
        sel = frame.tile_flat[frame.tile_bounds[t]:frame.tile_bounds[t + 1]]
        if len(sel) == 0:
            continue
        r0, r1, c0, c1 = tile_rect(frame, t, camera, tile)
        px, py = pixel_centers(r0, r1, c0, c1)
        dldc_pix = dldc[r0:r1, c0:c1].reshape(-1, 3)
        alpha, dx, dy, gmask = alphas_2d(frame, sel, px, py, options, with_parts=True)
        dl_dalpha, weights = _composite_backward(
            alpha, frame.color[sel], dldc_pix, options.background, options.t_stop
        )
        np.add.at(gs_color, sel, weights @ dldc_pix)

        i_n, i_p = np.nonzero(gmask)
        if i_n.size == 0:
            continue
        base = (dl_dalpha * alpha)[i_n, i_p]
        gs = sel[i_n]
        a_, b_, c_ = frame.conic[gs].T
        dxs = dx[i_n, i_p]
        dys = dy[i_n, i_p]
        cdx = a_ * dxs + b_ * dys
        cdy = b_ * dxs + c_ * dys
        axes = frame.axes2d[gs]  # (K, 2, 3)
        dot = axes[:, 0, :] * cdx[:, None] + axes[:, 1, :] * cdy[:, None]
        np.add.at(gs_scale, gs, base[:, None] * dot * dot)
        np.add.at(gs_opac, gs, base * (1.0 - frame.opacity[gs]))

    np.add.at(grads.log_scale, frame.gaussian_index, gs_scale)
    np.add.at(grads.logit_opacity, frame.gaussian_index, gs_opac)
    np.add.at(grads.color, frame.gaussian_index, gs_color)
    return grads


def grad_loss3d(
    scene: Scene,
    normals: np.ndarray | None,
    camera: Camera,
    gt: np.ndarray,
    config: FitConfig | None = None,
    options: RenderOptions | None = None,
    out: RenderOutput | None = None,
) -> Grads3D:
    """Gradient of mse(render3d(scene).color, gt) w.r.t. log-scale and
    logit-opacity3d only; every other parameter's gradient is zero by
    construction.
    """
    config = config or FitConfig()
    options = options or RenderOptions()
    _require_plain_alphas(options)
    _require_mse_only(config)
    if normals is None:
        normals = resolve_normals(scene)
    if config.gradient_mode == "fd":
        return _grad_loss3d_fd(scene, normals, camera, gt, config, options)
    gt = np.asarray(gt, dtype=np.float64)
    if out is None:
        out = render3d(scene, normals, camera, options)
    if out.color.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {out.color.shape} vs {gt.shape}")
    dldc = 2.0 * (out.color - gt) / gt.size

    n = len(scene)
    grads = Grads3D(log_scale=np.zeros((n, 3)), logit_opacity3d=np.zeros(n))
    if n == 0:
        return grads
    frame = prepare_frame(scene, camera, options)
    m = len(frame.gaussian_index)
    if m == 0:
        return grads
    geom = prepare_geometry3d(scene, normals, camera, frame)
    o3d_sorted = geom.opacity3d
    gs_scale = np.zeros((m, 3))
    gs_o3d = np.zeros(m)
    tile = options.tile_size

    for t in range(frame.ntx * frame.nty):
        sel = frame.tile_flat[frame.tile_bounds[t]:frame.tile_bounds[t + 1]]
        if len(sel) == 0:
            continue
        r0, r1, c0, c1 = tile_rect(frame, t, camera, tile)
        px, py = pixel_centers(r0, r1, c0, c1)
        dldc_pix = dldc[r0:r1, c0:c1].reshape(-1, 3)
        alpha, i_n, i_p, y, gmask = alphas_3d(
            frame, geom, sel, px, py, camera, options, with_parts=True
        )
        dl_dalpha, _ = _composite_backward(
            alpha, frame.color[sel], dldc_pix, options.background, options.t_stop
        )
        if i_n.size == 0:
            continue
        base = (dl_dalpha * alpha)[i_n, i_p] * gmask
        gs = sel[i_n]
        np.add.at(gs_scale, gs, base[:, None] * (y * y))
        np.add.at(gs_o3d, gs, base * (1.0 - o3d_sorted[gs]))

    np.add.at(grads.log_scale, frame.gaussian_index, gs_scale)
    np.add.at(grads.logit_opacity3d, frame.gaussian_index, gs_o3d)
    return grads


# ------------------------------------------------- finite-difference oracle

def _fd_grad(loss_fn, arrays: dict[str, np.ndarray], eps: float) -> dict[str, np.ndarray]:
    """Central differences of loss_fn over every entry of every array."""
    grads = {k: np.zeros_like(v) for k, v in arrays.items()}
    for key, arr in arrays.items():
        flat = arr.reshape(-1)
        g = grads[key].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            lp = loss_fn(arrays)
            flat[i] = saved - eps
            lm = loss_fn(arrays)
            flat[i] = saved
            g[i] = (lp - lm) / (2.0 * eps)
    return grads


def _grad_loss2d_fd(scene, camera, gt, config, options) -> Grads2D:
    gt = np.asarray(gt, dtype=np.float64)
    arrays = {
        "log_scale": np.log(scene.scale),
        "logit_opacity": _logit(scene.opacity),
        "color": scene.color.copy(),
    }

    def loss_fn(a):
        s = scene.replace(
            scale=np.exp(a["log_scale"]),
            opacity=_sigmoid(a["logit_opacity"]),
            color=a["color"],
        )
        return mse(render(s, camera, options).color, gt)

    g = _fd_grad(loss_fn, arrays, config.fd_epsilon)
    return Grads2D(log_scale=g["log_scale"], logit_opacity=g["logit_opacity"], color=g["color"])


def _grad_loss3d_fd(scene, normals, camera, gt, config, options) -> Grads3D:
    gt = np.asarray(gt, dtype=np.float64)
    arrays = {
        "log_scale": np.log(scene.scale),
        "logit_opacity3d": _logit(scene.opacity3d),
    }

    def loss_fn(a):
        s = scene.replace(
            scale=np.exp(a["log_scale"]),
            opacity3d=_sigmoid(a["logit_opacity3d"]),
        )
        return mse(render3d(s, normals, camera, options).color, gt)

    g = _fd_grad(loss_fn, arrays, config.fd_epsilon)
    return Grads3D(log_scale=g["log_scale"], logit_opacity3d=g["logit_opacity3d"])


# ------------------------------------------------------------------ fitting

HISTORY_COLUMNS = ("iteration", "loss", "loss2d", "loss3d", "median_scale", "hole_fraction")


class _Optimizer:
    """Parameter-group updates: plain GD or Adam, state per group."""

    def __init__(self, config: FitConfig):
        self.config = config
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def start_step(self):
        self.t += 1

    def update(self, name: str, value: np.ndarray, grad: np.ndarray, step: float) -> np.ndarray:
        c = self.config
        if c.optimizer == "gd":
            return value - step * grad
        if name not in self.m:
            self.m[name] = np.zeros_like(value)
            self.v[name] = np.zeros_like(value)
        self.m[name] = c.adam_beta1 * self.m[name] + (1 - c.adam_beta1) * grad
        self.v[name] = c.adam_beta2 * self.v[name] + (1 - c.adam_beta2) * grad * grad
        mhat = self.m[name] / (1 - c.adam_beta1 ** self.t)
        vhat = self.v[name] / (1 - c.adam_beta2 ** self.t)
        return value - step * mhat / (np.sqrt(vhat) + c.adam_epsilon)


def fit(
    scene: Scene,
    views: list[tuple[Camera, np.ndarray]],
    normals: np.ndarray | None = None,
    config: FitConfig | None = None,
    options: RenderOptions | None = None,
) -> tuple[Scene, list[dict]]:
    """Optimize the scene against the target views.

    Returns (fitted scene, history). History has one row per iteration with
    the metrics of the pre-update state. Parameter groups whose step size is
    zero (or that receive no loss weight) are carried through untouched.
    """
    config = config or FitConfig()
    options = options or RenderOptions()
    _require_plain_alphas(options)
    if not views:
        raise InvalidInputError("fit needs at least one target view")
    gts = [np.asarray(gt, dtype=np.float64) for _, gt in views]
    lam = config.loss.lambda_

    if normals is None and lam > 0:
        normals = resolve_normals(scene)
    use3d = normals is not None

    if config.iterations == 0:
        return scene, []

    log_s = np.log(scene.scale)
    logit_o = _logit(scene.opacity)
    logit_o3 = _logit(scene.opacity3d)
    color = scene.color.copy()

    upd_scale = config.step_log_scale > 0 and len(scene) > 0
    upd_o3 = config.step_logit_opacity3d > 0 and lam > 0 and use3d
    upd_o = config.step_logit_opacity > 0 and lam < 1
    upd_color = config.step_color > 0 and lam < 1

    current = scene
    history: list[dict] = []
    opt = _Optimizer(config)

    for it in range(config.iterations):
        outs2d = [render(current, cam, options) for cam, _ in views]
        l2 = float(np.mean([mse(o.color, g) for o, g in zip(outs2d, gts)]))
        if use3d:
            outs3d = [render3d(current, normals, cam, options) for cam, _ in views]
            l3 = float(np.mean([mse(o.color, g) for o, g in zip(outs3d, gts)]))
        else:
            outs3d = None
            l3 = float("nan")
        loss_val = (1.0 - lam) * l2 + (lam * l3 if lam > 0 else 0.0)

        if config.probe_zoom == 1.0:
            probe_out = outs2d[0]
        else:
            probe_out = render(current, views[0][0].zoomed(config.probe_zoom), options)
        history.append({
            "iteration": it,
            "loss": loss_val,
            "loss2d": l2,
            "loss3d": l3,
            "median_scale": float(np.median(current.scale)) if len(current) else float("nan"),
            "hole_fraction": hole_fraction(probe_out),
        })
        if not np.isfinite(loss_val):
            raise FitDivergedError(
                f"non-finite loss at iteration {it}", scene=current, history=history
            )

        g_ls = np.zeros_like(log_s)
        g_lo = np.zeros_like(logit_o)
        g_lo3 = np.zeros_like(logit_o3)
        g_col = np.zeros_like(color)
        nv = len(views)
        if lam < 1:
            for (cam, _), g, out in zip(views, gts, outs2d):
                g2 = grad_loss2d(current, cam, g, config, options, out=out)
                g_ls += (1.0 - lam) / nv * g2.log_scale
                g_lo += (1.0 - lam) / nv * g2.logit_opacity
                g_col += (1.0 - lam) / nv * g2.color
        if lam > 0 and use3d:
            for (cam, _), g, out in zip(views, gts, outs3d):
                g3 = grad_loss3d(current, normals, cam, g, config, options, out=out)
                g_ls += lam / nv * g3.log_scale
                g_lo3 += lam / nv * g3.logit_opacity3d

        opt.start_step()
        kwargs = {}
        if upd_scale:
            log_s = opt.update("log_scale", log_s, g_ls, config.step_log_scale)
            kwargs["scale"] = np.exp(log_s)
        if upd_o:
            logit_o = opt.update("logit_opacity", logit_o, g_lo, config.step_logit_opacity)
            kwargs["opacity"] = _sigmoid(logit_o)
        if upd_o3:
            logit_o3 = opt.update("logit_opacity3d", logit_o3, g_lo3, config.step_logit_opacity3d)
            kwargs["opacity3d"] = _sigmoid(logit_o3)
        if upd_color:
            color = opt.update("color", color, g_col, config.step_color)
            np.clip(color, 0.0, 1.0, out=color)
            kwargs["color"] = color
        if kwargs:
            current = current.replace(**kwargs)

    return current, history


def write_history_csv(history: list[dict], path) -> None:
    """CSV with fixed columns, '.' decimals, LF line endings."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([
                row["iteration"],
                *(repr(float(row[k])) for k in HISTORY_COLUMNS[1:]),
            ])
