"""File formats: Scene/Camera JSON, 3DGS-convention PLY, PFM, PNG.

PLY stores opacity as a logit and scales as logs (sigmoid/exp applied on
load, inverses on save) and degree-0 SH instead of RGB. PFM files are
32-bit float, little-endian (scale -1.0), rows bottom-to-top.
"""

from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, InvalidInputError, ParseError, Scene

# degree-0 spherical harmonic basis constant, 1 / (2 sqrt(pi))
SH_C0 = 0.28209479177387814

_GAUSSIAN_KEYS = {"mu", "opacity", "scale", "rotation", "color", "opacity3d", "normal"}

# 3DGS PLY properties we interpret; f_rest_* (higher SH bands) and nx/ny/nz
# are recognized but dropped.
_PLY_SAVE_PROPS = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


# ---------------------------------------------------------------- scene JSON

def _scene_to_json_dict(scene: Scene) -> dict:
    gaussians = []
    for i in range(len(scene)):
        normal = None
        if scene.normal is not None and not np.any(np.isnan(scene.normal[i])):
            normal = scene.normal[i].tolist()
        gaussians.append({
            "mu": scene.mu[i].tolist(),
            "opacity": float(scene.opacity[i]),
            "scale": scene.scale[i].tolist(),
            "rotation": scene.rotation[i].tolist(),
            "color": scene.color[i].tolist(),
            "opacity3d": float(scene.opacity3d[i]),
            "normal": normal,
        })
    provenance = None
    if scene.has_provenance:
        provenance = [
            {"view": int(v), "pixel": [int(p[0]), int(p[1])]}
            for v, p in zip(scene.prov_view, scene.prov_pixel)
        ]
    return {"gaussians": gaussians, "provenance": provenance}


def _scene_from_json_dict(data: dict) -> Scene:
    if not isinstance(data, dict) or "gaussians" not in data:
        raise ParseError("scene JSON must be an object with a 'gaussians' array")
    for key in data:
        if key not in ("gaussians", "provenance"):
            warnings.warn(f"ignoring unknown scene field {key!r}")
    entries = data["gaussians"]
    n = len(entries)
    mu = np.zeros((n, 3))
    opacity = np.zeros(n)
    scale = np.zeros((n, 3))
    rotation = np.zeros((n, 4))
    color = np.zeros((n, 3))
    opacity3d = np.zeros(n)
    normal = np.full((n, 3), np.nan)
    any_normal = False
    for i, g in enumerate(entries):
        for key in g:
            if key not in _GAUSSIAN_KEYS:
                warnings.warn(f"ignoring unknown Gaussian field {key!r}")
        try:
            mu[i] = g["mu"]
            opacity[i] = g["opacity"]
            scale[i] = g["scale"]
            rotation[i] = g["rotation"]
            color[i] = g["color"]
        except (KeyError, ValueError) as e:
            raise ParseError(f"Gaussian {i}: {e!r}") from e
        opacity3d[i] = g.get("opacity3d", opacity[i]) if g.get("opacity3d") is not None else opacity[i]
        if g.get("normal") is not None:
            normal[i] = g["normal"]
            any_normal = True
    prov_view = prov_pixel = None
    if data.get("provenance") is not None:
        prov = data["provenance"]
        if len(prov) != n:
            raise ParseError("provenance length does not match gaussians")
        prov_view = np.array([p["view"] for p in prov], dtype=np.int64)
        prov_pixel = np.array([p["pixel"] for p in prov], dtype=np.int64)
    return Scene(
        mu=mu, opacity=opacity, scale=scale, rotation=rotation, color=color,
        opacity3d=opacity3d, normal=normal if any_normal else None,
        prov_view=prov_view, prov_pixel=prov_pixel,
    )


# ----------------------------------------------------------------------- PLY

def _logit(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 1e-7, 1 - 1e-7)
    return np.log(x / (1 - x))


def _save_ply(scene: Scene, path: Path) -> None:
    n = len(scene)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        + "".join(f"property float {p}\n" for p in _PLY_SAVE_PROPS)
        + "end_header\n"
    )
    data = np.empty((n, len(_PLY_SAVE_PROPS)), dtype="<f4")
    data[:, 0:3] = scene.mu
    data[:, 3:6] = (scene.color - 0.5) / SH_C0
    data[:, 6] = _logit(scene.opacity)
    data[:, 7:10] = np.log(scene.scale)
    data[:, 10:14] = scene.rotation
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def _load_ply(path: Path) -> Scene:
    raw = Path(path).read_bytes()
    end_marker = b"end_header\n"
    end = raw.find(end_marker)
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing header)", offset=0)
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    body_offset = end + len(end_marker)

    n_vertex = None
    props: list[str] = []
    in_vertex = False
    for line in header_lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "binary_little_endian":
                raise ParseError(f"unsupported PLY format {tok[1]!r}", offset=raw.find(line.encode()))
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] != "float":
                raise ParseError(f"unsupported property type {tok[1]!r}", offset=raw.find(line.encode()))
            props.append(tok[2])
    if n_vertex is None:
        raise ParseError("PLY header has no vertex element", offset=0)

    expected = body_offset + 4 * len(props) * n_vertex
    if len(raw) < expected:
        raise ParseError(
            f"PLY body truncated: expected {expected - body_offset} bytes", offset=len(raw)
        )
    data = np.frombuffer(raw, dtype="<f4", count=len(props) * n_vertex, offset=body_offset)
    data = data.reshape(n_vertex, len(props)).astype(np.float64)

    col = {name: i for i, name in enumerate(props)}
    needed = [p for p in _PLY_SAVE_PROPS if p not in col]
    if needed:
        raise ParseError(f"PLY missing properties {needed}", offset=0)
    for name in props:
        known = (
            name in _PLY_SAVE_PROPS
            or name.startswith("f_rest_")
            or name in ("nx", "ny", "nz")
        )
        if not known:
            warnings.warn(f"ignoring unknown PLY property {name!r}")

    def take(names):
        return data[:, [col[n] for n in names]]

    rotation = take(["rot_0", "rot_1", "rot_2", "rot_3"])
    norms = np.linalg.norm(rotation, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ParseError("PLY contains a zero-norm rotation", offset=body_offset)
    opacity = 1.0 / (1.0 + np.exp(-data[:, col["opacity"]]))
    return Scene(
        mu=take(["x", "y", "z"]),
        opacity=opacity,
        scale=np.exp(take(["scale_0", "scale_1", "scale_2"])),
        rotation=rotation / norms,
        color=np.clip(take(["f_dc_0", "f_dc_1", "f_dc_2"]) * SH_C0 + 0.5, 0.0, 1.0),
        opacity3d=opacity.copy(),
    )


def save_scene(scene: Scene, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        _save_ply(scene, path)
    else:
        path.write_text(json.dumps(_scene_to_json_dict(scene)) + "\n")


def load_scene(path) -> Scene:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return _load_ply(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"scene JSON: {e.msg}", offset=e.pos) from e
    return _scene_from_json_dict(data)


# --------------------------------------------------------------- camera JSON

def save_camera(camera: Camera, path) -> None:
    data = {
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "R": camera.rotation_wc.reshape(-1).tolist(),
        "t": camera.translation_wc.tolist(),
        "width": camera.width, "height": camera.height,
    }
    Path(path).write_text(json.dumps(data) + "\n")


def load_camera(path) -> Camera:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"camera JSON: {e.msg}", offset=e.pos) from e
    try:
        return Camera(
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            rotation_wc=np.array(data["R"], dtype=np.float64).reshape(3, 3),
            translation_wc=np.array(data["t"], dtype=np.float64),
            width=int(data["width"]), height=int(data["height"]),
        )
    except (KeyError, ValueError) as e:
        raise ParseError(f"camera JSON: {e!r}") from e


# ----------------------------------------------------------------------- PFM

def write_pfm(image: np.ndarray, path) -> None:
    """Write (H, W) or (H, W, 3) float data as PFM (little-endian, scale -1)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        magic = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    else:
        raise InvalidInputError(f"PFM needs (H, W) or (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        # PFM scanlines run bottom-to-top
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("PFM header truncated", offset=start)
        return raw[start:pos]

    magic = token()
    if magic not in (b"PF", b"Pf"):
        raise ParseError(f"not a PFM file (magic {magic!r})", offset=0)
    channels = 3 if magic == b"PF" else 1
    try:
        w, h = int(token()), int(token())
        scale = float(token())
    except ValueError as e:
        raise ParseError(f"PFM header: {e}", offset=pos) from e
    pos += 1  # single whitespace byte after the scale line
    count = w * h * channels
    if len(raw) - pos < count * 4:
        raise ParseError("PFM body truncated", offset=len(raw))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.float64)
    image = data.reshape(h, w, channels)[::-1]
    return image[..., 0].copy() if channels == 1 else image.copy()


# ----------------------------------------------------------------------- PNG

def srgb_encode(linear: np.ndarray) -> np.ndarray:
    linear = np.clip(linear, 0.0, 1.0)
    return np.where(
        linear <= 0.0031308,
        12.92 * linear,
        1.055 * np.power(linear, 1 / 2.4) - 0.055,
    )


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    encoded = np.clip(encoded, 0.0, 1.0)
    return np.where(
        encoded <= 0.04045,
        encoded / 12.92,
        np.power((encoded + 0.055) / 1.055, 2.4),
    )


def save_png(image: np.ndarray, path, encoding: str = "srgb") -> None:
    """Write a float image in [0, 1] as 8-bit PNG.

    encoding='srgb' applies the sRGB transfer function (for viewing linear
    renders); encoding='linear' quantizes values directly.
    """
    image = np.asarray(image, dtype=np.float64)
    if encoding == "srgb":
        image = srgb_encode(image)
    elif encoding != "linear":
        raise InvalidInputError(f"unknown encoding {encoding!r}")
    quantized = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    mode = "RGB" if quantized.ndim == 3 else "L"
    Image.fromarray(quantized, mode=mode).save(path)


def load_png(path, encoding: str = "srgb") -> np.ndarray:
    arr = np.asarray(Image.open(path)).astype(np.float64) / 255.0
    return srgb_decode(arr) if encoding == "srgb" else arr


def save_png16(values: np.ndarray, path) -> None:
    """Write non-negative integers (counts) as a 16-bit grayscale PNG."""
    values = np.asarray(values)
    if np.any(values < 0) or np.any(values > 65535):
        raise InvalidInputError("16-bit PNG values must lie in [0, 65535]")
    Image.fromarray(values.astype(np.uint16)).save(path)


def load_png16(path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int64)
