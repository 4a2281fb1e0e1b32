"""Single-image global localization against a :class:`~texloc.mapdb.MapDatabase`.

Every query feature is matched to its nearest database feature in the same
scale bucket.  Assuming the pair is a true match with identical feature
frames, the query image origin in the world is::

    world_from_query = world_from_dbfeature * inverse(image_from_queryfeature)

and its translation is binned on a grid of ``cell_size`` pixels.  Votes in the
best cell and its 8 neighbours go to a rigid RANSAC whose inlier
least-squares fit is the reported pose.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import FeatureSet, Pose2, compose, compose_many, inverse, inverse_many, keypoint_poses
from .features import DetectorConfig, ScaleSpace, describe, detect
from .index import DEFAULT_CHECKS, AnnIndex
from .mapdb import MapDatabase
from .pca import project
from .rigid import ransac_rigid

DEFAULT_CELL_SIZE = 50.0
DEFAULT_MIN_INLIERS = 5
DEFAULT_INLIER_THRESHOLD = 3.0
JSON_SCHEMA_VERSION = 1


class FailureReason(str, enum.Enum):
    NO_FEATURES = "no_features"
    NO_MATCHES = "no_matches"
    WEAK_PEAK = "weak_peak"
    RANSAC_FAILURE = "ransac_failure"


class EmptyGridError(ValueError):
    pass


class RansacFailure(RuntimeError):
    def __init__(self, n_inliers: int, needed: int):
        super().__init__(f"RANSAC found {n_inliers} inliers, {needed} required")
        self.n_inliers = n_inliers


@dataclass(frozen=True)
class FeatureMatch:
    query_pose: Pose2  # keypoint frame -> query image frame
    db_pose: Pose2  # database feature frame -> world
    db_index: int = -1
    distance: float = 0.0

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("match distance must be non-negative")


@dataclass
class Matches:
    """Struct-of-arrays form of a list of :class:`FeatureMatch`."""

    query_index: np.ndarray
    query_pose: np.ndarray  # (n, 3) [theta, x, y] in the query image
    db_index: np.ndarray
    db_pose: np.ndarray  # (n, 3) in the world
    distance: np.ndarray

    def __len__(self):
        return len(self.query_index)

    def __getitem__(self, i: int) -> FeatureMatch:
        return FeatureMatch(Pose2.from_array(self.query_pose[i]), Pose2.from_array(self.db_pose[i]),
                            int(self.db_index[i]), float(self.distance[i]))

    def subset(self, idx) -> Matches:
        return Matches(self.query_index[idx], self.query_pose[idx], self.db_index[idx], self.db_pose[idx],
                       self.distance[idx])

    @classmethod
    def from_list(cls, matches: list[FeatureMatch]) -> Matches:
        n = len(matches)
        return cls(np.arange(n), np.array([m.query_pose.as_array() for m in matches]).reshape(n, 3),
                   np.array([m.db_index for m in matches], dtype=np.int64),
                   np.array([m.db_pose.as_array() for m in matches]).reshape(n, 3),
                   np.array([m.distance for m in matches], dtype=np.float64))


def vote_origin(match: FeatureMatch) -> Pose2:
    """Query-image pose implied by one match (its translation is the vote)."""
    return compose(match.db_pose, inverse(match.query_pose))


def origin_votes(matches: Matches) -> np.ndarray:
    """Vectorised :func:`vote_origin`; rows ``[theta, x, y]``."""
    return compose_many(matches.db_pose, inverse_many(matches.query_pose))


def location_votes(matches: Matches) -> np.ndarray:
    """The naive alternative: each match votes for its database feature position."""
    return matches.db_pose.copy()


@dataclass
class VoteGrid:
    cell_size: float
    origin: tuple[float, float]
    counts: np.ndarray  # (rows, cols)
    cell_of: np.ndarray  # flat cell per vote, -1 for the out-of-map sink
    votes: np.ndarray  # (n, 3) voted poses or (n, 2) positions

    @property
    def sink(self) -> int:
        return int(np.sum(self.cell_of < 0))

    @property
    def total(self) -> int:
        return len(self.cell_of)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def neighbourhood(self, row: int, col: int, radius: int = 1) -> np.ndarray:
        """Indices of votes in the ``(2r+1)^2`` block of cells around ``(row, col)``."""
        rows, cols = self.counts.shape
        valid = self.cell_of >= 0
        r = np.where(valid, self.cell_of // cols, -10**9)
        c = np.where(valid, self.cell_of % cols, -10**9)
        sel = valid & (np.abs(r - row) <= radius) & (np.abs(c - col) <= radius)
        return np.nonzero(sel)[0]


def accumulate(votes, extent: tuple[float, float, float, float], cell_size: float = DEFAULT_CELL_SIZE) -> VoteGrid:
    """Bin vote translations over the map ``extent = (x0, y0, x1, y1)``."""
    v = np.asarray(votes, dtype=np.float64)
    if v.ndim == 1:
        v = v.reshape(0, 3) if v.size == 0 else v[None, :]
    xy = v[:, -2:]
    x0, y0, x1, y1 = extent
    cols = max(int(math.ceil((x1 - x0) / cell_size)), 1)
    rows = max(int(math.ceil((y1 - y0) / cell_size)), 1)
    c = np.floor((xy[:, 0] - x0) / cell_size)
    r = np.floor((xy[:, 1] - y0) / cell_size)
    inside = (c >= 0) & (c < cols) & (r >= 0) & (r < rows)
    flat = np.where(inside, r * cols + c, -1).astype(np.int64)
    counts = np.bincount(flat[inside], minlength=rows * cols).reshape(rows, cols)
    return VoteGrid(float(cell_size), (float(x0), float(y0)), counts, flat, v)


def find_peak(grid: VoteGrid) -> tuple[tuple[int, int], np.ndarray]:
    """Highest cell (lowest row, then column, on ties) and the votes in its 3x3 block."""
    if grid.counts.sum() == 0:
        raise EmptyGridError("vote grid holds no in-map votes")
    flat = int(np.argmax(grid.counts))
    row, col = divmod(flat, grid.counts.shape[1])
    return (row, col), grid.neighbourhood(row, col)


def block_sums(counts: np.ndarray) -> np.ndarray:
    return ndimage.convolve(counts.astype(np.int64), np.ones((3, 3), np.int64), mode="constant", cval=0)


def second_peak(grid: VoteGrid, peak: tuple[int, int]) -> int:
    """Largest 3x3 block count whose block does not overlap the peak's block."""
    sums = block_sums(grid.counts)
    rows, cols = np.indices(sums.shape)
    far = np.maximum(np.abs(rows - peak[0]), np.abs(cols - peak[1])) >= 3
    return int(sums[far].max()) if far.any() else 0


def null_peak_quantile(n_votes: int, n_cells: int, q: float = 0.99, trials: int = 2000, seed: int = 0) -> float:
    """Monte-Carlo ``q``-quantile of the largest cell count when votes fall uniformly."""
    if n_votes <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    peaks = np.empty(trials)
    for t in range(trials):
        peaks[t] = np.bincount(rng.integers(0, n_cells, n_votes), minlength=n_cells).max()
    return float(np.quantile(peaks, q))


def ransac_pose(candidates: Matches, threshold: float = DEFAULT_INLIER_THRESHOLD,
                min_inliers: int = DEFAULT_MIN_INLIERS, max_iters: int = 1000,
                rng: np.random.Generator | None = None) -> tuple[Pose2, np.ndarray]:
    """Rigid query pose from candidate matches: query keypoints onto database positions.

    Raises ``ValueError`` with fewer than two candidates and
    :class:`RansacFailure` when fewer than ``min_inliers`` agree.
    """
    if len(candidates) < 2:
        raise ValueError("RANSAC needs at least two candidate matches")
    fit = ransac_rigid(candidates.query_pose[:, 1:], candidates.db_pose[:, 1:], threshold,
                       max_iters=max_iters, rng=rng)
    if fit.n_inliers < min_inliers:
        raise RansacFailure(fit.n_inliers, min_inliers)
    return fit.pose, fit.inliers


@dataclass(frozen=True)
class LocalizeConfig:
    detector: DetectorConfig = DetectorConfig()
    checks: int | None = DEFAULT_CHECKS
    cell_size: float = DEFAULT_CELL_SIZE
    min_inliers: int = DEFAULT_MIN_INLIERS
    inlier_threshold: float = DEFAULT_INLIER_THRESHOLD
    ransac_iters: int = 1000
    neighbors: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.min_inliers < 2:
            raise ValueError("min_inliers must be >= 2")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")


@dataclass
class LocalizationResult:
    success: bool
    pose: Pose2 | None = None
    failure: FailureReason | None = None
    inliers: Matches | None = None
    peak_votes: int = 0
    peak_cell_votes: int = 0
    second_peak_votes: int = 0
    total_matches: int = 0
    n_features: int = 0
    peak_cell: tuple[int, int] | None = None
    timings: dict[str, float] = field(default_factory=dict)  # milliseconds
    grid: VoteGrid | None = field(default=None, repr=False)
    matches: Matches | None = field(default=None, repr=False)

    @property
    def n_inliers(self) -> int:
        return 0 if self.inliers is None else len(self.inliers)

    def to_json(self, mm_per_pixel: float = 0.16) -> dict:
        out = {
            "schema_version": JSON_SCHEMA_VERSION,
            "success": self.success,
            "failure_reason": None if self.failure is None else self.failure.value,
            "pose": None,
            "pose_mm": None,
            "inliers": self.n_inliers,
            "peak_votes": self.peak_votes,
            "peak_cell_votes": self.peak_cell_votes,
            "second_peak_votes": self.second_peak_votes,
            "total_matches": self.total_matches,
            "features": self.n_features,
            "timings_ms": {k: round(v, 3) for k, v in self.timings.items()},
        }
        if self.pose is not None:
            out["pose"] = {"tx": self.pose.tx, "ty": self.pose.ty, "theta": math.degrees(self.pose.theta)}
            out["pose_mm"] = {"tx": self.pose.tx * mm_per_pixel, "ty": self.pose.ty * mm_per_pixel}
        return out


def match_features(db: MapDatabase, index: AnnIndex, features: FeatureSet, checks=DEFAULT_CHECKS,
                   neighbors: int = 1) -> Matches:
    """Nearest database feature(s) per query feature, within its scale bucket."""
    if len(features) == 0:
        return Matches(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0))
    z = project(db.basis, features.descriptors)
    ids, dist = index.query_batch(z, features.keypoints["scale"], checks, neighbors=neighbors)
    ids = ids.reshape(len(features), -1)
    dist = dist.reshape(len(features), -1)
    q, col = np.nonzero(ids >= 0)
    dbi = ids[q, col]
    return Matches(q, keypoint_poses(features.keypoints)[q], dbi, db.features.pose[dbi], dist[q, col])


class Localizer:
    """A database, its index and a config bundled for repeated queries."""

    def __init__(self, db: MapDatabase, config: LocalizeConfig | None = None, index: AnnIndex | None = None):
        self.db = db
        self.config = config or LocalizeConfig()
        self.index = index if index is not None else db.build_index()
        self.extent = db.extent()

    def extract(self, image) -> tuple[FeatureSet, dict[str, float]]:
        t0 = time.perf_counter()
        space = ScaleSpace(image, self.config.detector)
        kps = detect(space)
        t1 = time.perf_counter()
        fs = describe(space, kps)
        t2 = time.perf_counter()
        return fs, {"detect": (t1 - t0) * 1e3, "describe": (t2 - t1) * 1e3}

    def localize(self, image) -> LocalizationResult:
        fs, timings = self.extract(image)
        return self.localize_features(fs, timings)

    def localize_features(self, features: FeatureSet, timings: dict | None = None) -> LocalizationResult:
        cfg = self.config
        timings = dict(timings or {})
        res = LocalizationResult(False, n_features=len(features), timings=timings)
        if len(features) == 0:
            res.failure = FailureReason.NO_FEATURES
            return _finish(res)
        t = time.perf_counter()
        matches = match_features(self.db, self.index, features, cfg.checks, cfg.neighbors)
        timings["match"] = (time.perf_counter() - t) * 1e3
        res.total_matches = len(matches)
        res.matches = matches
        if len(matches) == 0:
            res.failure = FailureReason.NO_MATCHES
            return _finish(res)

        t = time.perf_counter()
        grid = accumulate(origin_votes(matches), self.extent, cfg.cell_size)
        res.grid = grid
        try:
            cell, cand = find_peak(grid)
        except EmptyGridError:
            timings["vote"] = (time.perf_counter() - t) * 1e3
            res.failure = FailureReason.NO_MATCHES
            return _finish(res)
        res.peak_cell = cell
        res.peak_cell_votes = int(grid.counts[cell])
        res.peak_votes = len(cand)
        res.second_peak_votes = second_peak(grid, cell)
        timings["vote"] = (time.perf_counter() - t) * 1e3
        if len(cand) < cfg.min_inliers:
            res.failure = FailureReason.WEAK_PEAK
            return _finish(res)

        t = time.perf_counter()
        try:
            pose, inl = ransac_pose(matches.subset(cand), cfg.inlier_threshold, cfg.min_inliers,
                                    cfg.ransac_iters, np.random.default_rng(cfg.seed))
        except RansacFailure:
            # The peak is not backed by a geometrically consistent cluster.
            timings["ransac"] = (time.perf_counter() - t) * 1e3
            res.failure = FailureReason.WEAK_PEAK
            return _finish(res)
        except (ValueError, np.linalg.LinAlgError):
            timings["ransac"] = (time.perf_counter() - t) * 1e3
            res.failure = FailureReason.RANSAC_FAILURE
            return _finish(res)
        timings["ransac"] = (time.perf_counter() - t) * 1e3
        res.success = True
        res.pose = pose
        res.inliers = matches.subset(cand[inl])
        return _finish(res)


def _finish(res: LocalizationResult) -> LocalizationResult:
    res.timings["total"] = sum(v for k, v in res.timings.items() if k != "total")
    return res


def localize(db: MapDatabase, index: AnnIndex, image, config: LocalizeConfig | None = None) -> LocalizationResult:
    """Locate one query image; failures come back as results, not exceptions."""
    return Localizer(db, config, index).localize(image)
