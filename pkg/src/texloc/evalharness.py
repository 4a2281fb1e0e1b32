"""Success criteria, pose verification and seeded robustness sweeps.

A :class:`Suite` is a synthetic texture, a zig-zag capture of it turned into
a map, and a fixed set of query poses.  Expensive products (frame features,
databases, query features per degradation) are cached so sweeps over
``k``, basis or selection policy reuse the same queries.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from .core import FeatureSet, Pose2, compose, inverse, pose_error
from .features import DetectorConfig, extract
from .mapdb import MapDatabase, MapImage, build_database
from .locate import LocalizationResult, LocalizeConfig, Localizer
from .pca import DescriptorBasis, fit_basis
from .stitch import register_pair, stitch_sequence
from .synth import (DEFAULT_QUERY_SIZE, Degradation, SyntheticTexture, generate_texture, grid_extent,
                    random_inside_pose, sample_query, zigzag_poses)

log = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 10
SWEEP_AXES = ("k", "occlusion", "blur", "selection", "basis")


@dataclass(frozen=True)
class SuccessCriterion:
    max_translation: float = 30.0  # pixels
    max_rotation: float = 1.5  # degrees

    def __post_init__(self):
        if self.max_translation <= 0 or self.max_rotation <= 0:
            raise ValueError("criterion bounds must be positive")

    @classmethod
    def parse(cls, text: str) -> SuccessCriterion:
        """Parse ``"30px:1.5deg"``."""
        m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*px\s*:\s*([0-9.eE+-]+)\s*deg\s*", text)
        if not m:
            raise ValueError(f"criterion must look like '30px:1.5deg', got {text!r}")
        return cls(float(m.group(1)), float(m.group(2)))

    def accepts(self, translation_error: float, rotation_error: float) -> bool:
        return translation_error <= self.max_translation and rotation_error <= self.max_rotation

    def __str__(self):
        return f"{self.max_translation:g}px:{self.max_rotation:g}deg"


@dataclass(frozen=True)
class Verdict:
    success: bool
    reason: str  # ok | localization_failed | few_correspondences | pose_mismatch
    translation_error: float = math.nan
    rotation_error: float = math.nan
    reference: Pose2 | None = None
    reference_image: int | None = None
    correspondences: int = 0


def judge_against_truth(result: LocalizationResult, truth: Pose2,
                        criterion: SuccessCriterion = SuccessCriterion()) -> Verdict:
    if not result.success:
        return Verdict(False, "localization_failed", reference=truth)
    dt, dr = pose_error(result.pose, truth)
    ok = criterion.accepts(dt, dr)
    return Verdict(ok, "ok" if ok else "pose_mismatch", dt, dr, truth)


def verify_pose(db: MapDatabase, result: LocalizationResult, query_features: FeatureSet,
                map_features, criterion: SuccessCriterion = SuccessCriterion(),
                min_correspondences: int = MIN_CORRESPONDENCES,
                query_size: tuple[int, int] = DEFAULT_QUERY_SIZE) -> Verdict:
    """Check a result against a reference pose re-fitted from full feature sets.

    The map image whose centre is nearest the predicted query centre is
    registered against the query using every feature of both images
    (``map_features[image_id]``), not the sparse database subset.
    """
    if not result.success:
        return Verdict(False, "localization_failed")
    centre = result.pose @ np.array([query_size[0] / 2.0, query_size[1] / 2.0])
    ref_img = min(db.images, key=lambda im: (float(np.linalg.norm(im.center() - centre)), im.image_id))
    fa = map_features[ref_img.image_id]
    pair = register_pair(fa, query_features, ref_img.image_id, -1, min_inliers=min_correspondences)
    if pair is None:
        return Verdict(False, "few_correspondences", reference_image=ref_img.image_id)
    reference = compose(ref_img.pose, pair.rel)
    dt, dr = pose_error(result.pose, reference)
    ok = criterion.accepts(dt, dr)
    return Verdict(ok, "ok" if ok else "pose_mismatch", dt, dr, reference, ref_img.image_id, pair.inlier_count)


def coherence_check(poses, min_bound: float = 1.0) -> list[bool]:
    """Flag frames that jump away from both temporal neighbours.

    ``poses`` is a capture-ordered sequence of :class:`Pose2`,
    :class:`LocalizationResult` or ``None`` (failed frames are skipped and
    never flagged).  The motion bound is twice the median displacement
    between consecutive valid frames, at least ``min_bound`` pixels.
    """
    pts, where = [], []
    for i, p in enumerate(poses):
        if isinstance(p, LocalizationResult):
            p = p.pose if p.success else None
        if p is not None:
            pts.append(p.t)
            where.append(i)
    flags = [False] * len(poses)
    n = len(pts)
    if n < 3:
        return flags
    step = [float(np.linalg.norm(pts[i + 1] - pts[i])) for i in range(n - 1)]
    bound = max(2.0 * median(step), min_bound)
    big = [s > bound for s in step]
    for j in range(n):
        if j == 0:
            bad = big[0] and not big[1]
        elif j == n - 1:
            bad = big[-1] and not big[-2]
        else:
            bad = big[j - 1] and big[j]
        flags[where[j]] = bad
    return flags


@dataclass(frozen=True)
class SuiteConfig:
    texture_seed: int = 0
    style: str = "scratchy"
    rows: int = 5
    cols: int = 5
    overlap: float = 0.4
    frame_size: tuple[int, int] = DEFAULT_QUERY_SIZE
    margin: int = 200
    jitter: float = 20.0
    jitter_deg: float = 3.0
    stitch: bool = True
    n_queries: int = 200
    query_seed: int = 1
    k: int = 16
    per_image: int = 50
    db_seed: int = 0
    selection: str = "random"
    union_seeds: tuple[int, ...] = ()
    occlusion: float = 0.0
    blur: float = 0.0
    noise: float = 0.0
    dust: float = 0.0  # specks per megapixel, drawn afresh for every map frame and query
    checks: int | None = 32
    cell_size: float = 50.0
    min_inliers: int = 5
    detector: DetectorConfig = DetectorConfig()
    criterion: SuccessCriterion = SuccessCriterion()
    threads: int = 1


@dataclass
class FrameRecord:
    index: int
    value: object
    success: bool
    reason: str
    failure: str | None
    translation_error: float
    rotation_error: float
    inliers: int
    peak_votes: int
    total_ms: float


@dataclass
class EvalReport:
    axis: str
    values: list
    criterion: SuccessCriterion
    frames: list[FrameRecord] = field(default_factory=list)

    def _of(self, value) -> list[FrameRecord]:
        return [f for f in self.frames if f.value == value]

    def success_rate(self, value=None) -> float:
        fr = self.frames if value is None else self._of(value)
        return sum(f.success for f in fr) / len(fr) if fr else math.nan

    @property
    def success_rates(self) -> dict:
        return {v: self.success_rate(v) for v in self.values}

    def failure_histogram(self, value=None) -> dict[str, int]:
        fr = self.frames if value is None else self._of(value)
        hist: dict[str, int] = {}
        for f in fr:
            if not f.success:
                key = f.failure or f.reason
                hist[key] = hist.get(key, 0) + 1
        return dict(sorted(hist.items()))

    def mean_translation_error(self, value=None) -> float:
        fr = self.frames if value is None else self._of(value)
        errs = [f.translation_error for f in fr if f.failure is None and not math.isnan(f.translation_error)]
        return float(np.mean(errs)) if errs else math.nan

    def timing_percentiles(self, value=None, q=(50, 90, 99)) -> dict[str, float]:
        fr = self.frames if value is None else self._of(value)
        t = np.array([f.total_ms for f in fr])
        return {f"p{p}": float(np.percentile(t, p)) for p in q} if len(t) else {}

    def to_json(self, include_timings: bool = True) -> dict:
        out = {
            "axis": self.axis,
            "criterion": str(self.criterion),
            "values": [_jsonable(v) for v in self.values],
            "success_rate": {str(v): self.success_rate(v) for v in self.values},
            "failures": {str(v): self.failure_histogram(v) for v in self.values},
            "frames": [],
        }
        for f in self.frames:
            d = dataclasses.asdict(f)
            d["value"] = _jsonable(f.value)
            if not include_timings:
                d.pop("total_ms")
            out["frames"].append(d)
        if include_timings:
            out["timing_ms"] = {str(v): self.timing_percentiles(v) for v in self.values}
        return out

    def to_tsv(self) -> str:
        buf = io.StringIO()
        cols = [f.name for f in dataclasses.fields(FrameRecord)]
        buf.write("\t".join(["axis"] + cols) + "\n")
        for f in self.frames:
            row = [self.axis] + [_cell(getattr(f, c)) for c in cols]
            buf.write("\t".join(row) + "\n")
        return buf.getvalue()

    def save(self, json_path, tsv_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        if tsv_path is not None:
            with open(tsv_path, "w") as fh:
                fh.write(self.to_tsv())


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


class Suite:
    """Synthetic map plus query set built lazily from a :class:`SuiteConfig`."""

    def __init__(self, config: SuiteConfig = SuiteConfig()):
        self.config = config
        c = config
        self.map_width, self.map_height = grid_extent(c.rows, c.cols, c.frame_size, c.overlap)
        self._texture: SyntheticTexture | None = None
        self._frames: list[FeatureSet] | None = None
        self._map_images: list[MapImage] | None = None
        self._dbs: dict = {}
        self._queries: dict = {}
        self.truth_poses = zigzag_poses(c.rows, c.cols, c.frame_size, c.overlap, origin=(c.margin, c.margin),
                                        jitter=c.jitter, jitter_deg=c.jitter_deg, seed=c.texture_seed + 1)
        # World frame = frame 0's image frame, as chosen by the stitcher gauge.
        self.align = inverse(self.truth_poses[0])

    def with_queries(self, n: int) -> Suite:
        """The same map with only the first ``n`` queries; built state and caches are shared."""
        if not 0 <= n <= self.config.n_queries:
            raise ValueError(f"n must be in [0, {self.config.n_queries}]")
        other = Suite(dataclasses.replace(self.config, n_queries=n))
        other._texture, other._frames, other._map_images = self._texture, self._frames, self._map_images
        other._dbs = self._dbs
        other._queries = {key: feats[:n] for key, feats in self._queries.items()}
        return other

    @property
    def texture(self) -> SyntheticTexture:
        if self._texture is None:
            c = self.config
            self._texture = generate_texture(c.texture_seed, int(math.ceil(self.map_width)) + 2 * c.margin,
                                             int(math.ceil(self.map_height)) + 2 * c.margin, c.style)
        return self._texture

    @property
    def frame_features(self) -> list[FeatureSet]:
        if self._frames is None:
            c = self.config
            deg = Degradation(dust=c.dust)
            imgs = [sample_query(self.texture, p, c.frame_size, deg, seed=10_000 + i).image
                    for i, p in enumerate(self.truth_poses)]
            self._frames = _parallel(lambda im: extract(im, c.detector), imgs, c.threads)
        return self._frames

    @property
    def map_images(self) -> list[MapImage]:
        if self._map_images is None:
            c = self.config
            if c.stitch:
                self._map_images = stitch_sequence(self.frame_features, [c.frame_size] * len(self.truth_poses),
                                                   threads=c.threads)
            else:
                self._map_images = [MapImage(i, compose(self.align, p), *c.frame_size)
                                    for i, p in enumerate(self.truth_poses)]
        return self._map_images

    def map_features(self) -> dict[int, FeatureSet]:
        return {im.image_id: fs for im, fs in zip(self.map_images, self.frame_features)}

    def all_descriptors(self) -> np.ndarray:
        return np.vstack([fs.descriptors for fs in self.frame_features])

    def query_region(self) -> tuple[float, float, float, float]:
        """Texture-frame box covered by every jittered map frame."""
        c = self.config
        j = c.jitter + 0.5 * math.hypot(*c.frame_size) * math.sin(math.radians(c.jitter_deg)) + 2.0
        return (c.margin + j, c.margin + j, c.margin + self.map_width - j, c.margin + self.map_height - j)

    def query_poses(self) -> list[Pose2]:
        """Texture-frame poses of the queries (fixed by ``query_seed``)."""
        c = self.config
        rng = np.random.default_rng([c.query_seed, c.texture_seed])
        return [random_inside_pose(rng, self.query_region(), c.frame_size) for _ in range(c.n_queries)]

    def truths(self) -> list[Pose2]:
        """Query poses in the map (world) frame."""
        return [compose(self.align, p) for p in self.query_poses()]

    def query_features(self, degradation: Degradation | None = None, texture: SyntheticTexture | None = None):
        c = self.config
        degradation = degradation or Degradation(c.occlusion, c.blur, c.noise, dust=c.dust)
        tex = texture or self.texture
        key = (degradation, tex.seed, tex.style)
        if key not in self._queries:
            poses = self.query_poses()

            def job(i):
                q = sample_query(tex, poses[i], c.frame_size, degradation, seed=c.query_seed * 100_003 + i)
                return extract(q.image, c.detector)

            self._queries[key] = _parallel(job, list(range(len(poses))), c.threads)
        return self._queries[key]

    def database(self, k: int | None = None, selection: str | None = None,
                 basis: DescriptorBasis | None = None, basis_tag: str = "specific") -> MapDatabase:
        c = self.config
        k = c.k if k is None else k
        selection = c.selection if selection is None else selection
        key = (k, selection, basis_tag)
        if key not in self._dbs:
            self._dbs[key] = build_database(self.map_images, self.map_features(), k=k, features_per_image=c.per_image,
                                            seed=c.db_seed, basis=basis, selection=selection)
        return self._dbs[key]

    def localizer(self, db: MapDatabase) -> Localizer:
        c = self.config
        cfg = LocalizeConfig(detector=c.detector, checks=c.checks, cell_size=c.cell_size,
                             min_inliers=c.min_inliers, seed=c.db_seed)
        return Localizer(db, cfg)

    def run(self, db: MapDatabase, features: list[FeatureSet], value=None, axis: str = "none",
            report: EvalReport | None = None) -> EvalReport:
        """Localize every query feature set and judge it against ground truth."""
        c = self.config
        report = report or EvalReport(axis, [value], c.criterion)
        loc = self.localizer(db)
        truths = self.truths()
        results = _parallel(loc.localize_features, features, c.threads)
        for i, (res, truth) in enumerate(zip(results, truths)):
            report.frames.append(_record(i, value, res, judge_against_truth(res, truth, c.criterion)))
        return report


def _record(i: int, value, res: LocalizationResult, v: Verdict) -> FrameRecord:
    return FrameRecord(i, value, v.success, v.reason, None if res.failure is None else res.failure.value,
                       float(v.translation_error), float(v.rotation_error), res.n_inliers, res.peak_votes,
                       float(res.timings.get("total", math.nan)))


def _parallel(fn, items, threads: int):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def union_basis(suites: list[Suite], k: int) -> DescriptorBasis:
    """PCA basis fitted on the pooled map descriptors of several suites."""
    return fit_basis(np.vstack([s.all_descriptors() for s in suites]), k)


def run_sweep(axis: str, values, suite: Suite | SuiteConfig) -> EvalReport:
    """Success over ``values`` of one axis, all else fixed by the suite config.

    Axes: ``k`` (descriptor dims), ``occlusion`` (fraction), ``blur``
    (kernel length in pixels), ``selection`` (``random`` | ``response``) and
    ``basis`` (``specific`` | ``union``; the union pools the textures in
    ``config.union_seeds`` with this one).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    suite = suite if isinstance(suite, Suite) else Suite(suite)
    c = suite.config
    values = list(values)
    report = EvalReport(axis, values, c.criterion)
    for v in values:
        log.info("sweep %s = %s", axis, v)
        if axis == "k":
            suite.run(suite.database(k=int(v)), suite.query_features(), v, axis, report)
        elif axis == "selection":
            suite.run(suite.database(selection=v), suite.query_features(), v, axis, report)
        elif axis == "occlusion":
            suite.run(suite.database(), suite.query_features(Degradation(v, c.blur, c.noise, dust=c.dust)), v, axis, report)
        elif axis == "blur":
            suite.run(suite.database(), suite.query_features(Degradation(c.occlusion, v, c.noise, dust=c.dust)), v, axis, report)
        else:
            if v == "specific":
                db = suite.database()
            elif v == "union":
                others = [Suite(dataclasses.replace(c, texture_seed=s)) for s in c.union_seeds]
                db = suite.database(basis=union_basis([suite] + others, c.k), basis_tag="union")
            else:
                raise ValueError(f"basis sweep values are 'specific' or 'union', got {v!r}")
            suite.run(db, suite.query_features(), v, axis, report)
    return report
