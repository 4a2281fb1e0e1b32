"""Procedural ground textures and ground-truth query sampling.

A texture is band-limited 1/f noise with sparse, persistent imperfections
(dark strokes, grains or fibres) drawn on top.  Queries are bilinear crops
of a texture under a known :class:`~texloc.core.Pose2`, optionally degraded
by occlusion, motion blur and sensor noise, always in that order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
import scipy.fft
from scipy import ndimage

from .core import Pose2, apply

STYLES = ("scratchy", "granular", "fibrous")
DEFAULT_QUERY_SIZE = (1280, 960)


@dataclass(frozen=True)
class SyntheticTexture:
    pixels: np.ndarray = field(repr=False)
    width: int
    height: int
    seed: int
    style: str = "scratchy"


@dataclass(frozen=True)
class Degradation:
    occlusion: float = 0.0
    blur: float = 0.0
    noise: float = 0.0
    blur_angle: float = 0.0
    dust: float = 0.0  # specks per megapixel

    def __post_init__(self):
        if not 0.0 <= self.occlusion < 1.0:
            raise ValueError("occlusion fraction must be in [0, 1)")
        if self.blur < 0 or self.noise < 0 or self.dust < 0:
            raise ValueError("blur length, noise sigma and dust density must be non-negative")


@dataclass(frozen=True)
class QuerySample:
    image: np.ndarray = field(repr=False)
    truth: Pose2
    degradation: Degradation = Degradation()
    occluded_fraction: float = 0.0


def _pink_noise(rng: np.random.Generator, h: int, w: int, lo: float, hi: float, slope: float) -> np.ndarray:
    white = rng.standard_normal((h, w), dtype=np.float32)
    spectrum = scipy.fft.rfft2(white, workers=-1)
    fy = scipy.fft.fftfreq(h)[:, None]
    fx = scipy.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fx * fx + fy * fy).astype(np.float32)
    f[0, 0] = 1.0
    gain = f ** (-slope)
    # Smooth band edges; lo and hi are wavelengths in pixels.
    gain *= 1.0 / (1.0 + (f * lo / 1.0) ** -8)  # suppress wavelengths longer than lo
    gain *= np.exp(-((f * hi) ** 2))  # roll off wavelengths shorter than ~hi
    gain[0, 0] = 0.0
    out = scipy.fft.irfft2(spectrum * gain, s=(h, w), workers=-1).astype(np.float32)
    out -= out.mean()
    out /= out.std() + 1e-12
    return out


def _draw_strokes(rng, canvas: np.ndarray, count: int, length: tuple[float, float],
                  thickness: tuple[int, int], bend: float, value_range: tuple[int, int]):
    h, w = canvas.shape
    for _ in range(count):
        x, y = rng.uniform(0, w), rng.uniform(0, h)
        ang = rng.uniform(0, 2 * math.pi)
        total = rng.uniform(*length)
        nseg = 4
        pts = [(x, y)]
        for _ in range(nseg):
            ang += rng.normal(0.0, bend)
            x += math.cos(ang) * total / nseg
            y += math.sin(ang) * total / nseg
            pts.append((x, y))
        arr = np.round(np.array(pts) * 16).astype(np.int32)
        val = int(rng.integers(*value_range))
        th = int(rng.integers(thickness[0], thickness[1] + 1))
        cv2.polylines(canvas, [arr], False, val, th, cv2.LINE_AA, shift=4)


def _draw_dots(rng, canvas: np.ndarray, count: int, radius: tuple[float, float], value_range):
    h, w = canvas.shape
    xs = rng.uniform(0, w, count)
    ys = rng.uniform(0, h, count)
    rs = rng.uniform(*radius, count)
    vals = rng.integers(*value_range, count)
    for x, y, r, v in zip(xs, ys, rs, vals):
        cv2.circle(canvas, (int(x * 16), int(y * 16)), max(int(r * 16), 8), int(v), -1, cv2.LINE_AA, shift=4)


# Per-style parameters: noise amplitude, noise band, imperfection density
# (per megapixel).  Tuned so the default detector finds 1000-2000 keypoints
# in a 1280x960 window.
_STYLE_PARAMS = {
    "scratchy": dict(amp=0.11, lo=300.0, hi=2.0, slope=1.0, density=700, mark=0.35),
    "granular": dict(amp=0.10, lo=200.0, hi=1.5, slope=0.9, density=2500, mark=0.30),
    "fibrous": dict(amp=0.09, lo=250.0, hi=2.0, slope=1.0, density=8000, mark=0.45),
}


def generate_texture(seed: int, width: int, height: int, style: str = "scratchy") -> SyntheticTexture:
    """Deterministic grayscale texture with values in [0, 1]."""
    if width < 512 or height < 512:
        raise ValueError("texture must be at least 512x512")
    if style not in _STYLE_PARAMS:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    p = _STYLE_PARAMS[style]
    rng = np.random.default_rng([int(seed), STYLES.index(style)])
    base = 0.5 + p["amp"] * _pink_noise(rng, height, width, p["lo"], p["hi"], p["slope"])

    marks = np.zeros((height, width), np.uint8)
    count = int(rng.poisson(p["density"] * width * height / 1e6))
    if style == "scratchy":
        _draw_strokes(rng, marks, count, (8.0, 60.0), (1, 3), 0.25, (120, 256))
        sign = -1.0
    elif style == "granular":
        _draw_dots(rng, marks, count, (1.0, 4.0), (100, 256))
        sign = -1.0
    else:
        _draw_strokes(rng, marks, count, (10.0, 40.0), (1, 1), 0.6, (100, 256))
        sign = 1.0
    layer = cv2.GaussianBlur(marks.astype(np.float32) / 255.0, (0, 0), 0.7)
    pixels = np.clip(base + sign * p["mark"] * layer, 0.0, 1.0).astype(np.float32)
    return SyntheticTexture(pixels, width, height, int(seed), style)


def crop_corners(pose: Pose2, size: tuple[int, int]) -> np.ndarray:
    w, h = size
    return apply(pose, np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float))


def pose_inside(tex_shape: tuple[int, int], pose: Pose2, size: tuple[int, int], margin: float = 0.0) -> bool:
    h, w = tex_shape
    c = crop_corners(pose, size)
    return bool(np.all(c[:, 0] >= margin) and np.all(c[:, 0] <= w - 1 - margin)
                and np.all(c[:, 1] >= margin) and np.all(c[:, 1] <= h - 1 - margin))


def warp_crop(pixels: np.ndarray, pose: Pose2, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample: output pixel ``(u, v)`` reads ``pixels`` at ``pose(u, v)``."""
    w, h = size
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    x = c * u - s * v + pose.tx
    y = s * u + c * v + pose.ty
    return ndimage.map_coordinates(pixels, [y, x], order=1, mode="nearest").astype(np.float32)


def occlusion_mask(size: tuple[int, int], fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one blob covering exactly ``round(fraction * w * h)`` pixels.

    Pixels are ranked by distance to a random centre perturbed by a smooth
    field, so masks drawn from the same generator state are nested in
    ``fraction``.
    """
    w, h = size
    n = int(round(fraction * w * h))
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    field_ = rng.standard_normal((max(h // 32, 2), max(w // 32, 2))).astype(np.float32)
    field_ = cv2.resize(field_, (w, h), interpolation=cv2.INTER_CUBIC)
    v, u = np.mgrid[0:h, 0:w]
    score = np.hypot(u - cx, v - cy) / math.hypot(w, h) + 0.05 * field_
    mask = np.zeros(w * h, bool)
    if n > 0:
        mask[np.argsort(score, axis=None, kind="stable")[:n]] = True
    return mask.reshape(h, w)


def motion_kernel(length: float, angle: float = 0.0) -> np.ndarray:
    """Normalised linear blur kernel of ``length`` pixels along ``angle``."""
    size = int(math.ceil(length)) | 1
    k = np.zeros((size, size), np.float32)
    c = (size - 1) / 2.0
    dx, dy = math.cos(angle), math.sin(angle)
    for t in np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, max(int(length * 4), 2)):
        x, y = c + t * dx, c + t * dy
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for xx, yy, wgt in ((x0, y0, (1 - fx) * (1 - fy)), (x0 + 1, y0, fx * (1 - fy)),
                            (x0, y0 + 1, (1 - fx) * fy), (x0 + 1, y0 + 1, fx * fy)):
            if 0 <= xx < size and 0 <= yy < size:
                k[yy, xx] += wgt
    return k / k.sum()


def add_dust(image: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    """Scatter small saturated specks (``density`` per megapixel) over ``image``."""
    h, w = image.shape
    layer = np.full((h, w), 128, np.uint8)
    _draw_dots(rng, layer, int(rng.poisson(density * w * h / 1e6)), (2.5, 6.0), (0, 256))
    out = image.copy()
    lv = layer.astype(np.float32)
    dark, bright = lv < 128, lv > 128
    out[dark] = out[dark] * (lv[dark] / 128.0)
    out[bright] = out[bright] + (1.0 - out[bright]) * ((lv[bright] - 128.0) / 127.0)
    return out


def degrade(image: np.ndarray, degradation: Degradation, rng: np.random.Generator,
            fill: float | None = None) -> tuple[np.ndarray, float]:
    """Apply occlusion, dust, blur and noise in that order.

    Returns the image and the occluded fraction.
    """
    out = image.astype(np.float32, copy=True)
    h, w = out.shape
    frac = 0.0
    if degradation.occlusion > 0:
        mask = occlusion_mask((w, h), degradation.occlusion, rng)
        out[mask] = float(image.mean()) if fill is None else fill
        frac = float(mask.mean())
    if degradation.dust > 0:
        out = add_dust(out, degradation.dust, rng)
    if degradation.blur > 1.0:
        out = cv2.filter2D(out, -1, motion_kernel(degradation.blur, degradation.blur_angle),
                           borderType=cv2.BORDER_REFLECT_101)
    if degradation.noise > 0:
        out = out + rng.normal(0.0, degradation.noise, out.shape).astype(np.float32)
    return out, frac


def sample_query(tex: SyntheticTexture, pose: Pose2, size: tuple[int, int] = DEFAULT_QUERY_SIZE,
                 degradation: Degradation | None = None, seed: int = 0) -> QuerySample:
    """Crop ``tex`` under ``pose`` (query frame to texture frame) and degrade it."""
    degradation = degradation or Degradation()
    if not pose_inside(tex.pixels.shape, pose, size):
        raise ValueError(f"crop of size {size} under {pose} leaves the texture")
    img = warp_crop(tex.pixels, pose, size)
    img, frac = degrade(img, degradation, np.random.default_rng(seed))
    return QuerySample(img, pose, degradation, frac)


def zigzag_poses(rows: int, cols: int, size: tuple[int, int] = DEFAULT_QUERY_SIZE, overlap: float = 0.4,
                 origin: tuple[float, float] = (0.0, 0.0), jitter: float = 0.0, jitter_deg: float = 0.0,
                 seed: int = 0) -> list[Pose2]:
    """Frame poses of a serpentine capture path, in capture order."""
    w, h = size
    sx, sy = w * (1 - overlap), h * (1 - overlap)
    rng = np.random.default_rng(seed)
    poses = []
    for r in range(rows):
        order = range(cols) if r % 2 == 0 else reversed(range(cols))
        for c in order:
            th = math.radians(rng.uniform(-jitter_deg, jitter_deg)) if jitter_deg else 0.0
            dx, dy = (rng.uniform(-jitter, jitter, 2) if jitter else (0.0, 0.0))
            cx = origin[0] + c * sx + w / 2.0 + dx
            cy = origin[1] + r * sy + h / 2.0 + dy
            # Rotate about the frame centre.
            ct, st = math.cos(th), math.sin(th)
            tx = cx - (ct * w / 2.0 - st * h / 2.0)
            ty = cy - (st * w / 2.0 + ct * h / 2.0)
            poses.append(Pose2(th, tx, ty))
    return poses


def grid_extent(rows: int, cols: int, size: tuple[int, int] = DEFAULT_QUERY_SIZE, overlap: float = 0.4):
    """Width and height covered by an un-jittered ``rows x cols`` grid."""
    w, h = size
    return w + (cols - 1) * w * (1 - overlap), h + (rows - 1) * h * (1 - overlap)


def random_inside_pose(rng: np.random.Generator, region: tuple[float, float, float, float],
                       size: tuple[int, int] = DEFAULT_QUERY_SIZE, max_tries: int = 1000) -> Pose2:
    """Uniform rotation, and a centre such that the rotated crop lies in ``region``.

    ``region`` is ``(x0, y0, x1, y1)`` in texture pixels.
    """
    w, h = size
    x0, y0, x1, y1 = region
    for _ in range(max_tries):
        th = rng.uniform(-math.pi, math.pi)
        ct, st = abs(math.cos(th)), abs(math.sin(th))
        hw = 0.5 * (ct * (w - 1) + st * (h - 1))
        hh = 0.5 * (st * (w - 1) + ct * (h - 1))
        if x1 - x0 < 2 * hw or y1 - y0 < 2 * hh:
            continue
        cx = rng.uniform(x0 + hw, x1 - hw)
        cy = rng.uniform(y0 + hh, y1 - hh)
        c, s = math.cos(th), math.sin(th)
        mx, my = (w - 1) / 2.0, (h - 1) / 2.0
        return Pose2(th, cx - (c * mx - s * my), cy - (s * mx + c * my))
    raise ValueError("region too small for the requested crop size")
