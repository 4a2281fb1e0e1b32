"""Scale-space DoG keypoints and 4x4x8 gradient-orientation descriptors.

The detector follows the usual recipe: a Gaussian pyramid with
``scales_per_octave + 3`` levels per octave, difference-of-Gaussian extrema
over 3x3x3 neighbourhoods, quadratic sub-pixel refinement, contrast and
edge rejection, then one keypoint per dominant orientation peak.

Everything is vectorised over keypoints; cv2 is used only for blurring and
3x3 max/min filtering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .core import KEYPOINT_DTYPE, TWO_PI, FeatureSet, empty_keypoints, wrap_angle

DESCRIPTOR_DIM = 128
_ORI_BINS = 36
_ORI_PEAK_RATIO = 0.8
_ORI_SIGMA_FACTOR = 1.5
_DESC_CELLS = 4
_DESC_BINS = 8
_DESC_CELL_WIDTH = 3.0  # in units of keypoint sigma
_DESC_SAMPLES_PER_CELL = 4
_DESC_CLAMP = 0.2
_REFINE_ITERS = 5


@dataclass(frozen=True)
class DetectorConfig:
    octaves: int = 4
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    contrast_threshold: float = 0.03
    edge_ratio_threshold: float = 10.0
    max_features: int = 0
    assumed_blur: float = 0.5
    border: int = 5

    def __post_init__(self):
        if self.octaves < 1 or self.scales_per_octave < 1:
            raise ValueError("octaves and scales_per_octave must be >= 1")
        if self.contrast_threshold <= 0 or self.edge_ratio_threshold <= 0 or self.base_sigma <= 0:
            raise ValueError("thresholds and base_sigma must be positive")
        if self.max_features < 0:
            raise ValueError("max_features must be >= 0")

    def level_sigma(self, level: float) -> float:
        """Blur of pyramid level ``level`` in octave-local pixels."""
        return self.base_sigma * 2.0 ** (level / self.scales_per_octave)


def as_float_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("expected a single-channel image")
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float32) / 65535.0
    return img.astype(np.float32)


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return cv2.GaussianBlur(img, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101)


class ScaleSpace:
    """Gaussian and DoG pyramids of one image, with lazily built gradients."""

    def __init__(self, image, cfg: DetectorConfig | None = None):
        self.cfg = cfg = cfg or DetectorConfig()
        img = as_float_image(image)
        self.shape = img.shape
        s = cfg.scales_per_octave
        max_oct = max(1, int(math.floor(math.log2(min(img.shape) / 16.0))) + 1)
        self.n_octaves = min(cfg.octaves, max_oct)
        sig = [cfg.level_sigma(i) for i in range(s + 3)]
        inc = [math.sqrt(max(sig[0] ** 2 - cfg.assumed_blur**2, 0.01))]
        inc += [math.sqrt(sig[i] ** 2 - sig[i - 1] ** 2) for i in range(1, s + 3)]

        self.gauss: list[list[np.ndarray]] = []
        self.dog: list[np.ndarray] = []
        base = img
        for o in range(self.n_octaves):
            levels = [_blur(base, inc[0]) if o == 0 else base]
            for i in range(1, s + 3):
                levels.append(_blur(levels[-1], inc[i]))
            self.gauss.append(levels)
            self.dog.append(np.stack([levels[i + 1] - levels[i] for i in range(s + 2)]))
            base = levels[s][::2, ::2]
        self._grad: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def gradient(self, octave: int, level: int) -> tuple[np.ndarray, np.ndarray]:
        key = (octave, level)
        if key not in self._grad:
            g = self.gauss[octave][level]
            gx = np.zeros_like(g)
            gy = np.zeros_like(g)
            gx[:, 1:-1] = g[:, 2:] - g[:, :-2]
            gy[1:-1, :] = g[2:, :] - g[:-2, :]
            self._grad[key] = (gx, gy)
        return self._grad[key]


def _local_extrema(dog: np.ndarray, threshold: float, border: int):
    """Candidate (level, row, col) of 3x3x3 DoG extrema above ``threshold``."""
    kernel = np.ones((3, 3), np.uint8)
    dil = [cv2.dilate(d, kernel) for d in dog]
    ero = [cv2.erode(d, kernel) for d in dog]
    out = []
    h, w = dog.shape[1:]
    for i in range(1, dog.shape[0] - 1):
        d = dog[i]
        mx = np.maximum(np.maximum(dil[i - 1], dil[i]), dil[i + 1])
        mn = np.minimum(np.minimum(ero[i - 1], ero[i]), ero[i + 1])
        mask = ((d >= mx) & (d > threshold)) | ((d <= mn) & (d < -threshold))
        mask[:border, :] = False
        mask[h - border:, :] = False
        mask[:, :border] = False
        mask[:, w - border:] = False
        r, c = np.nonzero(mask)
        out.append(np.stack([np.full(r.shape, i), r, c], axis=1))
    return np.concatenate(out) if out else np.zeros((0, 3), int)


def _derivatives(dog: np.ndarray, lv, r, c):
    v = dog[lv, r, c]
    dx = 0.5 * (dog[lv, r, c + 1] - dog[lv, r, c - 1])
    dy = 0.5 * (dog[lv, r + 1, c] - dog[lv, r - 1, c])
    ds = 0.5 * (dog[lv + 1, r, c] - dog[lv - 1, r, c])
    dxx = dog[lv, r, c + 1] + dog[lv, r, c - 1] - 2 * v
    dyy = dog[lv, r + 1, c] + dog[lv, r - 1, c] - 2 * v
    dss = dog[lv + 1, r, c] + dog[lv - 1, r, c] - 2 * v
    dxy = 0.25 * (dog[lv, r + 1, c + 1] - dog[lv, r + 1, c - 1] - dog[lv, r - 1, c + 1] + dog[lv, r - 1, c - 1])
    dxs = 0.25 * (dog[lv + 1, r, c + 1] - dog[lv + 1, r, c - 1] - dog[lv - 1, r, c + 1] + dog[lv - 1, r, c - 1])
    dys = 0.25 * (dog[lv + 1, r + 1, c] - dog[lv + 1, r - 1, c] - dog[lv - 1, r + 1, c] + dog[lv - 1, r - 1, c])
    g = np.stack([dx, dy, ds], axis=1).astype(np.float64)
    H = np.empty((len(v), 3, 3))
    H[:, 0, 0], H[:, 1, 1], H[:, 2, 2] = dxx, dyy, dss
    H[:, 0, 1] = H[:, 1, 0] = dxy
    H[:, 0, 2] = H[:, 2, 0] = dxs
    H[:, 1, 2] = H[:, 2, 1] = dys
    return v.astype(np.float64), g, H


def _solve3(H: np.ndarray, b: np.ndarray):
    """Batched ``H x = b`` by cofactors; returns x and a validity mask."""
    a, bb, c = H[:, 0, 0], H[:, 0, 1], H[:, 0, 2]
    d, e, f = H[:, 1, 0], H[:, 1, 1], H[:, 1, 2]
    g, h, i = H[:, 2, 0], H[:, 2, 1], H[:, 2, 2]
    A = e * i - f * h
    B = -(d * i - f * g)
    C = d * h - e * g
    det = a * A + bb * B + c * C
    ok = np.abs(det) > 1e-12
    det = np.where(ok, det, 1.0)
    inv = np.empty_like(H)
    inv[:, 0, 0], inv[:, 1, 0], inv[:, 2, 0] = A, B, C
    inv[:, 0, 1] = -(bb * i - c * h)
    inv[:, 1, 1] = a * i - c * g
    inv[:, 2, 1] = -(a * h - bb * g)
    inv[:, 0, 2] = bb * f - c * e
    inv[:, 1, 2] = -(a * f - c * d)
    inv[:, 2, 2] = a * e - bb * d
    x = np.einsum("nij,nj->ni", inv, b) / det[:, None]
    return x, ok


def _refine(dog: np.ndarray, cand: np.ndarray, cfg: DetectorConfig, border: int):
    """Quadratic sub-pixel refinement plus contrast and edge tests."""
    n_lv, h, w = dog.shape
    lv, r, c = cand[:, 0].copy(), cand[:, 1].copy(), cand[:, 2].copy()
    idx = np.arange(len(lv))
    done_idx, done_off, done_val = [], [], []
    for _ in range(_REFINE_ITERS):
        if len(idx) == 0:
            break
        v, g, H = _derivatives(dog, lv, r, c)
        off, ok = _solve3(H, -g)
        off[~ok] = np.inf
        conv = ok & np.all(np.abs(off) <= 0.5, axis=1)
        if conv.any():
            dval = v[conv] + 0.5 * np.einsum("ni,ni->n", g[conv], off[conv])
            done_idx.append(np.stack([idx[conv], lv[conv], r[conv], c[conv]], axis=1))
            done_off.append(off[conv])
            done_val.append(dval)
        move = ok & ~conv & np.all(np.abs(off) < 1e6, axis=1)
        step = np.rint(off[move]).astype(int)
        idx, lv, r, c = idx[move], lv[move] + step[:, 2], r[move] + step[:, 1], c[move] + step[:, 0]
        inside = (lv >= 1) & (lv <= n_lv - 2) & (r >= border) & (r < h - border) & (c >= border) & (c < w - border)
        idx, lv, r, c = idx[inside], lv[inside], r[inside], c[inside]
    if not done_idx:
        return np.zeros((0, 4), int), np.zeros((0, 3)), np.zeros(0)
    pos = np.concatenate(done_idx)
    off = np.concatenate(done_off)
    val = np.concatenate(done_val)

    keep = np.abs(val) >= cfg.contrast_threshold
    pos, off, val = pos[keep], off[keep], val[keep]
    lv, r, c = pos[:, 1], pos[:, 2], pos[:, 3]
    d = dog
    dxx = d[lv, r, c + 1] + d[lv, r, c - 1] - 2 * d[lv, r, c]
    dyy = d[lv, r + 1, c] + d[lv, r - 1, c] - 2 * d[lv, r, c]
    dxy = 0.25 * (d[lv, r + 1, c + 1] - d[lv, r + 1, c - 1] - d[lv, r - 1, c + 1] + d[lv, r - 1, c - 1])
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    er = cfg.edge_ratio_threshold
    keep = (det > 0) & (tr * tr * er < (er + 1) ** 2 * det)
    pos, off, val = pos[keep], off[keep], val[keep]
    # A refinement path can land on an extremum already found from another seed.
    _, first = np.unique(pos[:, 1:], axis=0, return_index=True)
    first.sort()
    return pos[first], off[first], val[first]


def _orientation_histograms(space: ScaleSpace, octave: int, level: int, x, y, sigma):
    """36-bin gradient orientation histograms around octave-local positions."""
    gx, gy = space.gradient(octave, level)
    h, w = gx.shape
    radius = np.rint(3.0 * _ORI_SIGMA_FACTOR * sigma).astype(int)
    R = int(radius.max())
    off = np.arange(-R, R + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    oy, ox = oy.ravel(), ox.ravel()
    cy = np.rint(y).astype(int)[:, None]
    cx = np.rint(x).astype(int)[:, None]
    py, px = cy + oy[None, :], cx + ox[None, :]
    valid = (py >= 1) & (py < h - 1) & (px >= 1) & (px < w - 1)
    valid &= (np.abs(oy)[None, :] <= radius[:, None]) & (np.abs(ox)[None, :] <= radius[:, None])
    py = np.clip(py, 0, h - 1)
    px = np.clip(px, 0, w - 1)
    dx, dy = gx[py, px], gy[py, px]
    mag = np.sqrt(dx * dx + dy * dy)
    ang = np.arctan2(dy, dx)
    s2 = 2.0 * (_ORI_SIGMA_FACTOR * sigma) ** 2
    wgt = np.exp(-(oy[None, :] ** 2 + ox[None, :] ** 2) / s2[:, None]) * mag * valid
    b = np.rint(ang * (_ORI_BINS / TWO_PI)).astype(int) % _ORI_BINS
    n = len(x)
    flat = (np.arange(n)[:, None] * _ORI_BINS + b).ravel()
    hist = np.bincount(flat, weights=wgt.ravel(), minlength=n * _ORI_BINS).reshape(n, _ORI_BINS)
    # Circular [1 4 6 4 1] smoothing.
    sm = (
        6 * hist
        + 4 * (np.roll(hist, 1, axis=1) + np.roll(hist, -1, axis=1))
        + np.roll(hist, 2, axis=1)
        + np.roll(hist, -2, axis=1)
    ) / 16.0
    return sm


def _orientation_peaks(hist: np.ndarray):
    left = np.roll(hist, 1, axis=1)
    right = np.roll(hist, -1, axis=1)
    peak = (hist > left) & (hist > right) & (hist >= _ORI_PEAK_RATIO * hist.max(axis=1, keepdims=True))
    k, b = np.nonzero(peak)
    l, c, r = left[k, b], hist[k, b], right[k, b]
    denom = l - 2 * c + r
    frac = np.where(denom != 0, 0.5 * (l - r) / np.where(denom != 0, denom, 1.0), 0.0)
    ang = wrap_angle((b + frac) * (TWO_PI / _ORI_BINS))
    return k, ang


def detect(image, cfg: DetectorConfig | None = None) -> np.ndarray:
    """DoG keypoints of ``image`` as a :data:`KEYPOINT_DTYPE` record array.

    Coordinates and scales are in input-image pixels.  A keypoint with more
    than one dominant orientation is returned once per orientation.
    """
    space = image if isinstance(image, ScaleSpace) else ScaleSpace(image, cfg)
    return _detect(space)


def _detect(space: ScaleSpace) -> np.ndarray:
    cfg = space.cfg
    s = cfg.scales_per_octave
    pre = 0.5 * cfg.contrast_threshold
    parts = []
    for o in range(space.n_octaves):
        dog = space.dog[o]
        cand = _local_extrema(dog, pre, cfg.border)
        if len(cand) == 0:
            continue
        pos, off, val = _refine(dog, cand, cfg, cfg.border)
        if len(pos) == 0:
            continue
        level = pos[:, 1] + off[:, 2]
        x = pos[:, 3] + off[:, 0]
        y = pos[:, 2] + off[:, 1]
        sigma = cfg.base_sigma * 2.0 ** (level / s)
        glevel = np.clip(np.rint(level).astype(int), 1, s)
        for lvl in np.unique(glevel):
            sel = np.nonzero(glevel == lvl)[0]
            hist = _orientation_histograms(space, o, int(lvl), x[sel], y[sel], sigma[sel])
            k, ang = _orientation_peaks(hist)
            src = sel[k]
            kp = empty_keypoints(len(src))
            scale = 2.0**o
            kp["x"] = x[src] * scale
            kp["y"] = y[src] * scale
            kp["scale"] = sigma[src] * scale
            kp["orientation"] = ang
            kp["response"] = np.abs(val[src])
            kp["octave"] = o
            parts.append(kp)
    if not parts:
        return empty_keypoints()
    kps = np.concatenate(parts)
    order = np.lexsort((kps["orientation"], kps["x"], kps["y"], kps["octave"]))
    kps = kps[order]
    if cfg.max_features and len(kps) > cfg.max_features:
        top = np.argsort(-kps["response"], kind="stable")[: cfg.max_features]
        kps = kps[np.sort(top)]
    return kps


def normalize_descriptors(raw: np.ndarray, return_clamped: bool = False):
    """Unit-normalise, clamp entries at 0.2 and renormalise.

    Rows with no gradient energy come back as zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n = np.linalg.norm(raw, axis=1, keepdims=True)
    v = np.divide(raw, n, out=np.zeros_like(raw), where=n > 0)
    clamped = np.minimum(v, _DESC_CLAMP)
    n2 = np.linalg.norm(clamped, axis=1, keepdims=True)
    out = np.divide(clamped, n2, out=np.zeros_like(clamped), where=n2 > 0)
    if return_clamped:
        return out, clamped
    return out


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = (x - x0).astype(np.float32)
    fy = (y - y0).astype(np.float32)
    a = img[y0, x0]
    b = img[y0, x0 + 1]
    c = img[y0 + 1, x0]
    d = img[y0 + 1, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _descriptor_offsets():
    n = _DESC_CELLS * _DESC_SAMPLES_PER_CELL
    u = (np.arange(n) + 0.5) / _DESC_SAMPLES_PER_CELL - _DESC_CELLS / 2.0
    vv, uu = np.meshgrid(u, u, indexing="ij")
    return uu.ravel(), vv.ravel()


_DU, _DV = _descriptor_offsets()


def _raw_descriptors(space: ScaleSpace, octave: int, level: int, x, y, sigma, theta):
    gx, gy = space.gradient(octave, level)
    cw = _DESC_CELL_WIDTH * sigma
    c, s = np.cos(theta), np.sin(theta)
    du = _DU[None, :] * cw[:, None]
    dv = _DV[None, :] * cw[:, None]
    px = x[:, None] + c[:, None] * du - s[:, None] * dv
    py = y[:, None] + s[:, None] * du + c[:, None] * dv
    sx = _bilinear(gx, px, py)
    sy = _bilinear(gy, px, py)
    # Gradient expressed in the keypoint frame.
    rx = c[:, None] * sx + s[:, None] * sy
    ry = -s[:, None] * sx + c[:, None] * sy
    mag = np.sqrt(rx * rx + ry * ry)
    ang = np.mod(np.arctan2(ry, rx), TWO_PI)
    half = _DESC_CELLS / 2.0
    wgt = mag * np.exp(-(_DU**2 + _DV**2) / (2.0 * half**2))[None, :]

    cu = _DU + half - 0.5
    cv = _DV + half - 0.5
    u0 = np.floor(cu).astype(int)
    v0 = np.floor(cv).astype(int)
    fu = cu - u0
    fv = cv - v0
    ob = ang * (_DESC_BINS / TWO_PI)
    o0 = np.floor(ob).astype(int)
    fo = ob - o0
    n = len(x)
    base = np.arange(n)[:, None] * DESCRIPTOR_DIM
    hist = np.zeros(n * DESCRIPTOR_DIM)
    for du_, wu in ((0, 1 - fu), (1, fu)):
        uu = u0 + du_
        for dv_, wv in ((0, 1 - fv), (1, fv)):
            vv = v0 + dv_
            inside = (uu >= 0) & (uu < _DESC_CELLS) & (vv >= 0) & (vv < _DESC_CELLS)
            if not inside.any():
                continue
            cell = (vv * _DESC_CELLS + uu)[inside]
            ws = (wu * wv)[inside]
            for do_, wo in ((0, 1 - fo), (1, fo)):
                obin = (o0[:, inside] + do_) % _DESC_BINS
                idx = base + cell[None, :] * _DESC_BINS + obin
                hist += np.bincount(
                    idx.ravel(), weights=(wgt[:, inside] * ws[None, :] * wo[:, inside]).ravel(),
                    minlength=n * DESCRIPTOR_DIM,
                )
    return hist.reshape(n, DESCRIPTOR_DIM)


def _keypoint_level(cfg: DetectorConfig, kps: np.ndarray):
    o = kps["octave"].astype(int)
    sigma_oct = kps["scale"] / 2.0**o
    level = cfg.scales_per_octave * np.log2(sigma_oct / cfg.base_sigma)
    return o, sigma_oct, np.clip(np.rint(level).astype(int), 1, cfg.scales_per_octave)


def describe(image, keypoints: np.ndarray, cfg: DetectorConfig | None = None) -> FeatureSet:
    """Descriptors for ``keypoints``; keypoints whose window leaves the image are dropped."""
    space = image if isinstance(image, ScaleSpace) else ScaleSpace(image, cfg)
    cfg = space.cfg
    kps = np.asarray(keypoints, dtype=KEYPOINT_DTYPE)
    if len(kps) == 0:
        return FeatureSet(empty_keypoints(), np.zeros((0, DESCRIPTOR_DIM), np.float32))
    o, sigma_oct, glevel = _keypoint_level(cfg, kps)
    raw = np.zeros((len(kps), DESCRIPTOR_DIM))
    keep = np.zeros(len(kps), bool)
    reach = _DESC_CELL_WIDTH * sigma_oct * (_DESC_CELLS / 2.0) * math.sqrt(2.0) + 2.0
    for oo, lvl in sorted(set(zip(o.tolist(), glevel.tolist()))):
        if oo >= space.n_octaves:
            continue
        h, w = space.gauss[oo][lvl].shape
        scale = 2.0**oo
        sel = np.nonzero((o == oo) & (glevel == lvl))[0]
        x = kps["x"][sel] / scale
        y = kps["y"][sel] / scale
        ok = (x - reach[sel] >= 0) & (x + reach[sel] < w - 1) & (y - reach[sel] >= 0) & (y + reach[sel] < h - 1)
        sel, x, y = sel[ok], x[ok], y[ok]
        if len(sel) == 0:
            continue
        raw[sel] = _raw_descriptors(space, oo, lvl, x, y, sigma_oct[sel], kps["orientation"][sel])
        keep[sel] = True
    keep &= np.linalg.norm(raw, axis=1) > 0
    desc = normalize_descriptors(raw[keep]).astype(np.float32)
    return FeatureSet(kps[keep], desc)


def extract(image, cfg: DetectorConfig | None = None) -> FeatureSet:
    """Detect and describe with a single pyramid build."""
    space = ScaleSpace(image, cfg)
    return describe(space, _detect(space))


def write_feature_records(path, features: FeatureSet) -> None:
    """Write ``x y scale orientation d0..d127`` one feature per line."""
    kp = features.keypoints
    rows = np.column_stack([kp["x"], kp["y"], kp["scale"], kp["orientation"], features.descriptors])
    np.savetxt(path, rows, fmt="%.9g", delimiter=" ")


def read_feature_records(path) -> FeatureSet:
    """Read features computed elsewhere; descriptors are re-normalised to unit length."""
    rows = np.loadtxt(path, ndmin=2)
    if rows.size == 0:
        return FeatureSet(empty_keypoints(), np.zeros((0, DESCRIPTOR_DIM), np.float32))
    if rows.shape[1] != 4 + DESCRIPTOR_DIM:
        raise ValueError(f"expected {4 + DESCRIPTOR_DIM} columns per record, got {rows.shape[1]}")
    kp = empty_keypoints(len(rows))
    kp["x"], kp["y"], kp["scale"] = rows[:, 0], rows[:, 1], rows[:, 2]
    kp["orientation"] = wrap_angle(rows[:, 3])
    desc = rows[:, 4:]
    n = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = np.divide(desc, n, out=np.zeros_like(desc), where=n > 0)
    return FeatureSet(kp, desc.astype(np.float32))
