"""Signed distance fields, primitive rasterization and pixel-layer I/O.

All geometry lives in canvas-fraction units: a WxH layer spans [0, 1] in x
(columns) and [0, 1] in y (rows, increasing downward).  SDF values are
negative inside a shape, zero on its boundary and positive outside.
Rotation is given in turns and is applied counterclockwise in canvas
coordinates (x right, y down).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

SHAPE_CIRCLE = "circle"
SHAPE_SQUARE = "square"
SHAPE_TRIANGLE = "triangle"
SHAPES = (SHAPE_CIRCLE, SHAPE_SQUARE, SHAPE_TRIANGLE)


@dataclass(frozen=True)
class PrimitiveParams:
    """Pose and paint of one primitive: center, rotation (turns), bbox size, intensity."""

    shape: str
    pos: tuple = (0.5, 0.5)
    rot: float = 0.0
    size: tuple = (0.5, 0.5)
    intensity: float = 1.0


def _rotate_into(px, py, cx, cy, rot):
    """Express points in the local frame of a shape centered at (cx, cy), rot in turns."""
    a = 2.0 * np.pi * rot
    ca, sa = np.cos(a), np.sin(a)
    dx, dy = px - cx, py - cy
    # inverse rotation: world -> local
    return ca * dx + sa * dy, -sa * dx + ca * dy


def sdf_circle(px, py, rx, ry):
    """Disc with per-axis radii.  Exact Euclidean distance when rx == ry,
    sign-correct scaled distance otherwise."""
    rx = max(float(rx), 1e-9)
    ry = max(float(ry), 1e-9)
    if abs(rx - ry) < 1e-12:
        return np.hypot(px, py) - rx
    k = np.hypot(px / rx, py / ry)
    return (k - 1.0) * min(rx, ry)


def sdf_box(px, py, hw, hh):
    """Axis-aligned box with half-extents (hw, hh); the classic two-term form."""
    dx = np.abs(px) - hw
    dy = np.abs(py) - hh
    outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
    inside = np.minimum(np.maximum(dx, dy), 0.0)
    return outside + inside


def sdf_triangle(px, py, hw, hh):
    """Isoceles triangle, apex up at rot 0, bounding half-extents (hw, hh).

    Evaluated in the apex frame: apex at the origin, base corners at
    (+-hw, 2*hh).  y grows downward so the apex is the visual top.
    """
    qx, qy = hw, 2.0 * hh
    ax = np.abs(px)
    ay = py
    # edge from apex to base corner
    t1 = np.clip((ax * qx + ay * qy) / (qx * qx + qy * qy), 0.0, 1.0)
    e1x, e1y = ax - qx * t1, ay - qy * t1
    # base edge
    t2 = np.clip(ax / qx, 0.0, 1.0)
    e2x, e2y = ax - qx * t2, ay - qy
    d = np.minimum(e1x * e1x + e1y * e1y, e2x * e2x + e2y * e2y)
    # both terms positive strictly inside, negative past either supporting line
    inner = np.minimum(qx * ay - qy * ax, qy * (qy - ay))
    return -np.sqrt(d) * np.sign(inner)


def sdf_eval(params: PrimitiveParams, px, py):
    """Signed distance from world points to the primitive, canvas-fraction units."""
    cx, cy = params.pos
    lx, ly = _rotate_into(np.asarray(px, float), np.asarray(py, float), cx, cy, params.rot)
    hw = max(float(params.size[0]) * 0.5, 1e-9)
    hh = max(float(params.size[1]) * 0.5, 1e-9)
    if params.shape == SHAPE_CIRCLE:
        return sdf_circle(lx, ly, hw, hh)
    if params.shape == SHAPE_SQUARE:
        return sdf_box(lx, ly, hw, hh)
    if params.shape == SHAPE_TRIANGLE:
        # shift into the apex frame; the apex sits at local (0, -hh)
        return sdf_triangle(lx, ly + hh, hw, hh)
    raise ValueError(f"unknown shape {params.shape!r}")


def pixel_grid(width: int, height: int):
    """Centers of all pixels in canvas fractions, returned as (px, py) 2-D arrays."""
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width
    ys = (np.arange(height, dtype=np.float64) + 0.5) / height
    return np.meshgrid(xs, ys)


def coverage(params: PrimitiveParams, width: int, height: int) -> np.ndarray:
    """Anti-aliased occupancy in [0, 1]: smoothstep over the SDF inside a one-pixel band."""
    px, py = pixel_grid(width, height)
    d = sdf_eval(params, px, py)
    pw = 1.0 / max(width, height)
    t = np.clip(0.5 - d / pw, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def draw_primitive(params: PrimitiveParams, width: int, height: int) -> np.ndarray:
    """Render intensity * coverage over a transparent (zero) background."""
    return coverage(params, width, height) * params.intensity


def composite_over(base: np.ndarray, params: PrimitiveParams) -> np.ndarray:
    """Alpha-1 compositing: the primitive replaces the base where it covers."""
    h, w = base.shape
    c = coverage(params, w, h)
    return base * (1.0 - c) + c * params.intensity


def bilinear_resample(layer: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a grayscale layer to a new resolution, pixel-center aligned."""
    h, w = layer.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = layer[np.ix_(y0, x0)]
    b = layer[np.ix_(y0, x1)]
    c = layer[np.ix_(y1, x0)]
    d = layer[np.ix_(y1, x1)]
    top = a * (1.0 - fx) + b * fx
    bot = c * (1.0 - fx) + d * fx
    return top * (1.0 - fy) + bot * fy


@dataclass(frozen=True)
class EffectsConfig:
    """Synthesis-time nuisance effects.  All probabilities in [0, 1];
    an all-zero config is the identity."""

    p_background: float = 0.0
    background_amplitude: float = 0.25
    p_occlusion: float = 0.0
    occlusion_area: float = 0.25  # max bbox area fraction of one occluder
    p_brightness: float = 0.0
    # kept modest: multiplicative jitter is unrecoverable from the patch and
    # eats directly into the intensity error budget
    brightness_jitter: float = 0.1

    @staticmethod
    def none() -> "EffectsConfig":
        return EffectsConfig()

    @staticmethod
    def default() -> "EffectsConfig":
        return EffectsConfig(p_background=0.5, p_occlusion=0.25, p_brightness=0.5)


def apply_effects(layer: np.ndarray, rng: np.random.Generator,
                  config: EffectsConfig) -> np.ndarray:
    """Composite nuisance effects onto a rendered layer, clamped to [0, 1].

    Zero-valued pixels are treated as transparent for the background fill.
    Deterministic given the generator state; identity for the zero config.
    """
    h, w = layer.shape
    out = layer.copy()
    if config.p_background > 0 and rng.random() < config.p_background:
        amp = rng.uniform(0.05, config.background_amplitude)
        bg = rng.uniform(0.0, amp, size=(h, w))
        if rng.random() < 0.5:
            gx, gy = rng.uniform(-amp, amp, size=2)
            px, py = pixel_grid(w, h)
            bg = bg + gx * px + gy * py
        bg = np.clip(bg, 0.0, 1.0)
        out = np.where(out > 1e-6, out, bg)
    if config.p_occlusion > 0 and rng.random() < config.p_occlusion:
        shape = SHAPES[rng.integers(0, len(SHAPES))]
        # bbox area capped at occlusion_area of the canvas
        ow = rng.uniform(0.1, np.sqrt(config.occlusion_area))
        oh = min(rng.uniform(0.1, np.sqrt(config.occlusion_area)), config.occlusion_area / ow)
        occ = PrimitiveParams(shape, pos=(rng.uniform(0, 1), rng.uniform(0, 1)),
                              rot=rng.uniform(0, 1), size=(ow, oh),
                              intensity=rng.uniform(0.0, 1.0))
        out = composite_over(out, occ)
    if config.p_brightness > 0 and rng.random() < config.p_brightness:
        out = out * (1.0 + rng.uniform(-config.brightness_jitter, config.brightness_jitter))
    return np.clip(out, 0.0, 1.0)


def to_bytes(layer: np.ndarray) -> np.ndarray:
    """Quantize to 8-bit grayscale with round-half-up."""
    return np.clip(np.rint(np.clip(layer, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def from_bytes(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def write_png(layer: np.ndarray, path) -> None:
    Image.fromarray(to_bytes(layer), mode="L").save(path, format="PNG")


def png_bytes(layer: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_bytes(layer), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def read_png(path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return from_bytes(np.asarray(img, dtype=np.uint8))


def decode_image(data: bytes) -> np.ndarray:
    """Decode PNG or PGM bytes into a float layer; raises ValueError on junk."""
    if data[:2] in (b"P2", b"P5"):
        return _parse_pgm(data)
    try:
        img = Image.open(io.BytesIO(data)).convert("L")
    except Exception as exc:
        raise ValueError(f"undecodable image: {exc}") from exc
    return from_bytes(np.asarray(img, dtype=np.uint8))


def write_pgm(layer: np.ndarray, path) -> None:
    """Plain-text PGM (P2), dependency-free to read back."""
    b = to_bytes(layer)
    h, w = b.shape
    lines = [f"P2", f"{w} {h}", "255"]
    for row in b:
        lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return _parse_pgm(f.read())


def _parse_pgm(data: bytes) -> np.ndarray:
    tokens = []
    for line in data.split(b"\n"):
        body = line.split(b"#", 1)[0]
        tokens.extend(body.split())
        if tokens and tokens[0] == b"P5" and len(tokens) >= 4:
            break
    if not tokens or tokens[0] not in (b"P2", b"P5"):
        raise ValueError("not a PGM stream")
    magic = tokens[0]
    if len(tokens) < 4:
        raise ValueError("truncated PGM header")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if w <= 0 or h <= 0 or maxval <= 0:
        raise ValueError("bad PGM dimensions")
    if magic == b"P2":
        vals = np.array([int(t) for t in tokens[4:4 + w * h]], dtype=np.float64)
        if vals.size != w * h:
            raise ValueError("truncated PGM data")
    else:
        # binary payload starts after the single whitespace following maxval
        header_end = 0
        fields = 0
        i = 0
        while fields < 4 and i < len(data):
            while i < len(data) and data[i:i + 1].isspace():
                i += 1
            if data[i:i + 1] == b"#":
                while i < len(data) and data[i] != 0x0A:
                    i += 1
                continue
            while i < len(data) and not data[i:i + 1].isspace():
                i += 1
            fields += 1
        header_end = i + 1
        raw = np.frombuffer(data[header_end:header_end + w * h], dtype=np.uint8)
        if raw.size != w * h:
            raise ValueError("truncated PGM data")
        vals = raw.astype(np.float64)
    return (vals / maxval).reshape(h, w)
