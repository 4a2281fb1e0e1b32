"""Planar rigid transforms and the feature containers shared by the pipeline.

Poses map points from a local frame (image, keypoint) into a parent frame
(world, image).  Image coordinates are ``x`` to the right and ``y`` down; the
same handedness is used for the world so that angles measured with
``atan2(gy, gx)`` in an image add directly to the image's rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

#: Ground distance covered by one map pixel.  Only used for reporting.
MM_PER_PIXEL = 0.16

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angles (scalar or array) into ``(-pi, pi]``."""
    if np.isscalar(a):
        if -math.pi < a <= math.pi:
            return float(a)
        w = math.pi - math.fmod(math.pi - a, TWO_PI)
        if w > math.pi:
            w -= TWO_PI
        elif w <= -math.pi:
            w += TWO_PI
        return float(w)
    a = np.asarray(a, dtype=np.float64)
    inside = (a > -math.pi) & (a <= math.pi)
    return np.where(inside, a, math.pi - np.mod(math.pi - a, TWO_PI))


@dataclass(frozen=True)
class Pose2:
    """Rigid 2D transform ``p -> R(theta) p + t``, stored as an angle."""

    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))

    @classmethod
    def identity(cls) -> Pose2:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose2:
        m = np.asarray(m, dtype=np.float64)
        return cls(math.atan2(m[1, 0], m[0, 0]), m[0, 2], m[1, 2])

    @classmethod
    def from_array(cls, a) -> Pose2:
        return cls(a[0], a[1], a[2])

    @property
    def t(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[:2, 2] = self.tx, self.ty
        return m

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.tx, self.ty])

    def __matmul__(self, other):
        if isinstance(other, Pose2):
            return compose(self, other)
        return apply(self, other)

    def inverse(self) -> Pose2:
        return inverse(self)

    def __repr__(self):
        return f"Pose2(theta={math.degrees(self.theta):.4f}deg, tx={self.tx:.4f}, ty={self.ty:.4f})"


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Pose that applies ``b`` first and then ``a``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.theta + b.theta,
        c * b.tx - s * b.ty + a.tx,
        s * b.tx + c * b.ty + a.ty,
    )


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-p.theta, -(c * p.tx + s * p.ty), -(-s * p.tx + c * p.ty))


def apply(p: Pose2, points) -> np.ndarray:
    """Map a point ``(x, y)`` or an ``(N, 2)`` array of points through ``p``."""
    pts = np.asarray(points, dtype=np.float64)
    c, s = math.cos(p.theta), math.sin(p.theta)
    x, y = pts[..., 0], pts[..., 1]
    return np.stack([c * x - s * y + p.tx, s * x + c * y + p.ty], axis=-1)


def relative(a: Pose2, b: Pose2) -> Pose2:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return compose(inverse(a), b)


def pose_error(a: Pose2, b: Pose2) -> tuple[float, float]:
    """Translation distance (pixels) and absolute rotation difference (degrees)."""
    dt = math.hypot(a.tx - b.tx, a.ty - b.ty)
    dth = abs(wrap_angle(a.theta - b.theta))
    return dt, math.degrees(dth)


# Vectorised forms on (N, 3) arrays of [theta, tx, ty].

def compose_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c, s = np.cos(a[..., 0]), np.sin(a[..., 0])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = wrap_angle(a[..., 0] + b[..., 0])
    out[..., 1] = c * b[..., 1] - s * b[..., 2] + a[..., 1]
    out[..., 2] = s * b[..., 1] + c * b[..., 2] + a[..., 2]
    return out


def inverse_many(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    c, s = np.cos(p[..., 0]), np.sin(p[..., 0])
    out = np.empty_like(p)
    out[..., 0] = wrap_angle(-p[..., 0])
    out[..., 1] = -(c * p[..., 1] + s * p[..., 2])
    out[..., 2] = -(-s * p[..., 1] + c * p[..., 2])
    return out


KEYPOINT_DTYPE = np.dtype(
    [
        ("x", np.float64),
        ("y", np.float64),
        ("scale", np.float64),
        ("orientation", np.float64),
        ("response", np.float64),
        ("octave", np.int32),
    ]
)


def empty_keypoints(n: int = 0) -> np.ndarray:
    return np.zeros(n, dtype=KEYPOINT_DTYPE)


def keypoint_poses(kps: np.ndarray) -> np.ndarray:
    """Image-frame poses ``[theta, x, y]`` of a keypoint record array."""
    return np.stack([kps["orientation"], kps["x"], kps["y"]], axis=-1)


@dataclass
class FeatureSet:
    """Keypoints of one image paired row-for-row with their descriptors."""

    keypoints: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoints and descriptors must pair up")

    def __len__(self):
        return len(self.keypoints)

    @property
    def xy(self) -> np.ndarray:
        return np.stack([self.keypoints["x"], self.keypoints["y"]], axis=-1)

    def subset(self, idx) -> FeatureSet:
        return FeatureSet(self.keypoints[idx], self.descriptors[idx])


@dataclass
class WorldFeatures:
    """Database features in world coordinates (struct of arrays).

    ``pose`` rows are ``[theta, x, y]`` mapping the feature frame into the
    world.  ``descriptors`` are already projected onto the database basis.
    """

    pose: np.ndarray
    scale: np.ndarray
    descriptors: np.ndarray
    image_id: np.ndarray
    response: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.pose)
        if self.response is None:
            self.response = np.zeros(n)
        for name in ("scale", "descriptors", "image_id", "response"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match pose count")

    def __len__(self):
        return len(self.pose)

    @property
    def xy(self) -> np.ndarray:
        return self.pose[:, 1:3]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]
