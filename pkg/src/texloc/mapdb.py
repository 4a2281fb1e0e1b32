"""Offline feature database and its ``TXDB`` file format.

Layout (all little-endian)::

    b"TXDB"  u32 version
    u32 n_images  u32 n_features  u32 k  u32 n_edges  u32 meta_len
    meta        JSON, utf-8, meta_len bytes
    images      n_images  x (i64 id, f64 theta, f64 tx, f64 ty, u32 width, u32 height)
    basis       f64[128] mean, f64[k*128] components, f64[k] eigenvalues
    edges       f64[n_edges]
    features    n_features x (f64 theta, f64 x, f64 y, f32 scale, f32 response, i32 image_id, f32[k] desc)
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import MM_PER_PIXEL, FeatureSet, Pose2, WorldFeatures, compose_many, keypoint_poses
from .features import DESCRIPTOR_DIM
from .index import DEFAULT_TREES, AnnIndex, ScaleBuckets
from .pca import DescriptorBasis, fit_basis, project

MAGIC = b"TXDB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")
_IMAGE_DTYPE = np.dtype([("id", "<i8"), ("theta", "<f8"), ("tx", "<f8"), ("ty", "<f8"),
                         ("width", "<u4"), ("height", "<u4")])


def _feature_dtype(k: int) -> np.dtype:
    return np.dtype([("theta", "<f8"), ("x", "<f8"), ("y", "<f8"), ("scale", "<f4"),
                     ("response", "<f4"), ("image_id", "<i4"), ("desc", "<f4", (k,))])


class DatabaseFormatError(ValueError):
    pass


class ChecksumError(DatabaseFormatError):
    pass


class VersionError(DatabaseFormatError):
    pass


class TruncatedError(DatabaseFormatError):
    pass


@dataclass(frozen=True)
class MapImage:
    image_id: int
    pose: Pose2
    width: int
    height: int
    source: str = ""

    def corners(self) -> np.ndarray:
        w, h = self.width, self.height
        return self.pose @ np.array([[0, 0], [w, 0], [w, h], [0, h]], float)

    def center(self) -> np.ndarray:
        return self.pose @ np.array([self.width / 2.0, self.height / 2.0])


@dataclass
class MapDatabase:
    images: list[MapImage]
    features: WorldFeatures
    basis: DescriptorBasis
    buckets: ScaleBuckets
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("map image ids must be unique")
        if len(self.features) and self.features.dim != self.basis.k:
            raise ValueError("feature descriptors must have dim == basis.k")

    @property
    def mm_per_pixel(self) -> float:
        return float(self.meta.get("mm_per_pixel", MM_PER_PIXEL))

    def image(self, image_id: int) -> MapImage:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    def extent(self) -> tuple[float, float, float, float]:
        """Bounding box ``(x0, y0, x1, y1)`` of all map image footprints."""
        pts = np.vstack([im.corners() for im in self.images])
        return float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max())

    def build_index(self, trees: int = DEFAULT_TREES, seed: int | None = None, **kw) -> AnnIndex:
        seed = int(self.meta.get("seed", 0)) if seed is None else seed
        return AnnIndex.build(self.features, self.buckets, trees=trees, seed=seed, **kw)

    def __eq__(self, other):
        if not isinstance(other, MapDatabase):
            return NotImplemented
        f, g = self.features, other.features
        return (self.images == other.images and self.basis == other.basis and self.buckets == other.buckets
                and self.meta == other.meta
                and all(np.array_equal(getattr(f, a), getattr(g, a))
                        for a in ("pose", "scale", "descriptors", "image_id", "response")))


def select_features(n: int, per_image: int, rng: np.random.Generator, policy: str = "random",
                    response: np.ndarray | None = None) -> np.ndarray:
    """Indices of the features to keep from an image with ``n`` features."""
    if n <= per_image:
        return np.arange(n)
    if policy == "random":
        return np.sort(rng.choice(n, size=per_image, replace=False))
    if policy == "response":
        return np.sort(np.argsort(-np.asarray(response), kind="stable")[:per_image])
    raise ValueError(f"unknown selection policy {policy!r}")


def build_database(map_images: list[MapImage], feature_sets, k: int = 16, features_per_image: int = 50,
                   seed: int = 0, basis: DescriptorBasis | None = None, selection: str = "random",
                   capture_date: str = "", mm_per_pixel: float = MM_PER_PIXEL, n_buckets: int = 10) -> MapDatabase:
    """Select, compress and place features of stitched map images.

    ``feature_sets`` maps image id to the image's full :class:`FeatureSet`
    (a list aligned with ``map_images`` also works).  Without an explicit
    ``basis`` one is fitted on every descriptor of every image.
    """
    if isinstance(feature_sets, dict):
        sets = [feature_sets.get(im.image_id) for im in map_images]
    else:
        sets = list(feature_sets)
    if len(sets) != len(map_images):
        raise ValueError("one feature set per map image required")
    for im, fs in zip(map_images, sets):
        if im.pose is None:
            raise ValueError(f"map image {im.image_id} has no stitched pose")
        if fs is None:
            raise ValueError(f"no features for map image {im.image_id}")
    if sum(len(fs) for fs in sets) == 0:
        raise ValueError("no features in any map image")

    if basis is None:
        basis = fit_basis(np.vstack([fs.descriptors for fs in sets if len(fs)]), k)
    elif basis.k != k:
        raise ValueError(f"supplied basis has k={basis.k}, expected {k}")

    rng = np.random.Generator(np.random.PCG64(seed))
    poses, scales, descs, ids, resp = [], [], [], [], []
    for im, fs in zip(map_images, sets):
        keep = select_features(len(fs), features_per_image, rng, selection, fs.keypoints["response"])
        if len(keep) == 0:
            continue
        sel = fs.subset(keep)
        poses.append(compose_many(im.pose.as_array()[None, :], keypoint_poses(sel.keypoints)))
        scales.append(sel.keypoints["scale"])
        resp.append(sel.keypoints["response"])
        descs.append(project(basis, sel.descriptors))
        ids.append(np.full(len(sel), im.image_id))
    scale = np.concatenate(scales).astype(np.float32).astype(np.float64)
    feats = WorldFeatures(
        pose=np.vstack(poses),
        scale=scale,
        descriptors=np.vstack(descs).astype(np.float32),
        image_id=np.concatenate(ids).astype(np.int64),
        response=np.concatenate(resp).astype(np.float32).astype(np.float64),
    )
    meta = {
        "mm_per_pixel": float(mm_per_pixel),
        "capture_date": capture_date,
        "seed": int(seed),
        "features_per_image": int(features_per_image),
        "k": int(k),
        "selection": selection,
        "sources": [im.source for im in map_images],
    }
    return MapDatabase(list(map_images), feats, basis, ScaleBuckets.from_scales(scale, n_buckets), meta)


def to_bytes(db: MapDatabase) -> bytes:
    k = db.basis.k
    meta = json.dumps(db.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, len(db.images), len(db.features), k, len(db.buckets.edges), len(meta)),
             meta]
    imgs = np.zeros(len(db.images), _IMAGE_DTYPE)
    for row, im in zip(imgs, db.images):
        row["id"], row["theta"], row["tx"], row["ty"] = im.image_id, im.pose.theta, im.pose.tx, im.pose.ty
        row["width"], row["height"] = im.width, im.height
    parts.append(imgs.tobytes())
    parts.append(np.asarray(db.basis.mean, "<f8").tobytes())
    parts.append(np.asarray(db.basis.components, "<f8").tobytes())
    parts.append(np.asarray(db.basis.eigenvalues, "<f8").tobytes())
    parts.append(np.asarray(db.buckets.edges, "<f8").tobytes())
    f = db.features
    rec = np.zeros(len(f), _feature_dtype(k))
    rec["theta"], rec["x"], rec["y"] = f.pose[:, 0], f.pose[:, 1], f.pose[:, 2]
    rec["scale"], rec["response"], rec["image_id"] = f.scale, f.response, f.image_id
    rec["desc"] = f.descriptors
    parts.append(rec.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _check(buf: bytes) -> tuple:
    """Validate size, magic, version and checksum; return the header fields."""
    if len(buf) < _HEADER.size + 4:
        raise TruncatedError("file too short for a TXDB header")
    magic, version, n_img, n_feat, k, n_edges, meta_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatabaseFormatError(f"bad magic {magic!r}, not a TXDB file")
    if version > VERSION:
        raise VersionError(f"TXDB version {version} is newer than supported version {VERSION}")
    if version < 1:
        raise VersionError(f"invalid TXDB version {version}")
    if not 1 <= k <= DESCRIPTOR_DIM:
        raise DatabaseFormatError(f"invalid descriptor dimension {k}")
    fdt = _feature_dtype(k)
    expected = (_HEADER.size + meta_len + n_img * _IMAGE_DTYPE.itemsize + 8 * (DESCRIPTOR_DIM + k * DESCRIPTOR_DIM + k)
                + 8 * n_edges + n_feat * fdt.itemsize + 4)
    if len(buf) < expected:
        raise TruncatedError(f"TXDB file truncated: {len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise DatabaseFormatError(f"TXDB file has {len(buf) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", buf, expected - 4)
    if zlib.crc32(buf[:expected - 4]) != crc:
        raise ChecksumError("TXDB checksum mismatch; file is corrupted")
    return magic, version, n_img, n_feat, k, n_edges, meta_len


def from_bytes(buf: bytes) -> MapDatabase:
    _, _, n_img, n_feat, k, n_edges, meta_len = _check(buf)
    fdt = _feature_dtype(k)
    off = _HEADER.size
    meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    imgs = take(_IMAGE_DTYPE, n_img)
    sources = meta.get("sources", [""] * n_img)
    images = [MapImage(int(r["id"]), Pose2(float(r["theta"]), float(r["tx"]), float(r["ty"])),
                       int(r["width"]), int(r["height"]), sources[i] if i < len(sources) else "")
              for i, r in enumerate(imgs)]
    mean = take("<f8", DESCRIPTOR_DIM).astype(np.float64)
    comps = take("<f8", k * DESCRIPTOR_DIM).reshape(k, DESCRIPTOR_DIM).astype(np.float64)
    evals = take("<f8", k).astype(np.float64)
    edges = take("<f8", n_edges).astype(np.float64)
    rec = take(fdt, n_feat)
    feats = WorldFeatures(
        pose=np.stack([rec["theta"], rec["x"], rec["y"]], axis=1).astype(np.float64),
        scale=rec["scale"].astype(np.float64),
        descriptors=np.ascontiguousarray(rec["desc"], dtype=np.float32),
        image_id=rec["image_id"].astype(np.int64),
        response=rec["response"].astype(np.float64),
    )
    return MapDatabase(images, feats, DescriptorBasis(mean, comps, evals), ScaleBuckets(edges), meta)


def save(db: MapDatabase, path) -> None:
    Path(path).write_bytes(to_bytes(db))


def load(path) -> MapDatabase:
    return from_bytes(Path(path).read_bytes())


def read_header(path) -> dict:
    """Header counts and meta of a verified TXDB file, without decoding the feature records."""
    buf = Path(path).read_bytes()
    _, version, n_img, n_feat, k, n_edges, meta_len = _check(buf)
    meta = json.loads(buf[_HEADER.size:_HEADER.size + meta_len].decode("utf-8"))
    meta.pop("sources", None)
    return {"version": version, "images": n_img, "features": n_feat, "k": k, "buckets": n_edges - 1,
            "bytes": len(buf), "meta": meta}
