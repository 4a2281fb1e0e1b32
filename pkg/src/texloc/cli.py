"""``texloc`` command line: synth, build-map, build-db, localize, evaluate, db-info.

Exit codes: 0 success, 1 localization failure (``localize``), 2 usage error,
3 I/O or file-format error.  Results go to stdout, logs to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from .core import Pose2, compose, inverse
from .evalharness import EvalReport, SuccessCriterion, _record, judge_against_truth, verify_pose
from .features import DESCRIPTOR_DIM, DetectorConfig, extract
from .io import list_images, read_image, write_image
from .locate import DEFAULT_CELL_SIZE, DEFAULT_MIN_INLIERS, LocalizeConfig, Localizer
from .mapdb import DatabaseFormatError, MapImage, build_database, load, read_header, save
from .stitch import BrokenChainError, stitch_sequence
from .synth import STYLES, Degradation, generate_texture, grid_extent, random_inside_pose, sample_query, zigzag_poses

log = logging.getLogger("texloc")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
MAP_TSV = "map.tsv"
MANIFEST = "manifest.tsv"


class UsageError(Exception):
    pass


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("TEXLOC_THREADS")
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            raise UsageError(f"TEXLOC_THREADS must be an integer, got {env!r}")
    return 1


def _pose_row(p: Pose2) -> list[str]:
    return [repr(p.tx), repr(p.ty), repr(p.theta)]


# synth

def cmd_synth(args) -> int:
    if args.style not in STYLES:
        raise UsageError(f"--style must be one of {STYLES}")
    if not 0.0 <= args.overlap < 1.0:
        raise UsageError("--overlap must be in [0, 1)")
    size = (args.frame_width, args.frame_height)
    mw, mh = grid_extent(args.rows, args.cols, size, args.overlap)
    m = args.margin
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    tex = generate_texture(args.seed, int(math.ceil(mw)) + 2 * m, int(math.ceil(mh)) + 2 * m, args.style)
    write_image(out / "texture.png", tex.pixels)
    poses = zigzag_poses(args.rows, args.cols, size, args.overlap, origin=(m, m), jitter=args.jitter,
                         jitter_deg=args.jitter_deg, seed=args.seed + 1)
    with open(out / "frames" / "truth.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["file", "tx", "ty", "theta"])
        for i, p in enumerate(poses):
            name = f"frame_{i:03d}.png"
            write_image(out / "frames" / name, sample_query(tex, p, size, seed=10_000 + i).image)
            w.writerow([name] + _pose_row(p))
    # Query truth is written in the map frame, whose origin is frame 0.
    align = inverse(poses[0])
    if args.queries > 0:
        qdir = out / "queries"
        qdir.mkdir(exist_ok=True)
        deg = Degradation(args.occlusion, args.blur, args.noise, math.radians(args.blur_angle))
        rng = np.random.default_rng([args.seed, 7])
        j = args.jitter + 0.5 * math.hypot(*size) * math.sin(math.radians(args.jitter_deg)) + 2.0
        region = (m + j, m + j, m + mw - j, m + mh - j)
        with open(qdir / MANIFEST, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["file", "tx", "ty", "theta"])
            for i in range(args.queries):
                p = random_inside_pose(rng, region, size)
                q = sample_query(tex, p, size, deg, seed=20_000 + i)
                name = f"query_{i:03d}.png"
                write_image(qdir / name, q.image)
                w.writerow([name] + _pose_row(compose(align, p)))
    print(json.dumps({"texture": str(out / "texture.png"), "frames": len(poses), "queries": args.queries}))
    return EXIT_OK


# build-map

def cmd_build_map(args) -> int:
    frames_dir = Path(args.frames)
    files = list_images(frames_dir)
    if len(files) < 1:
        raise OSError(f"no images found in {frames_dir}")
    threads = _threads(args)
    imgs = [read_image(f) for f in files]
    feats = [extract(im) for im in imgs]
    sizes = [(im.shape[1], im.shape[0]) for im in imgs]
    log.info("extracted %d frames, %.0f features each on average", len(feats), np.mean([len(f) for f in feats]))
    try:
        mapped = stitch_sequence(feats, sizes, sources=[f.name for f in files],
                                 loop_closures=not args.no_loop_closures, threads=threads)
    except BrokenChainError as e:
        log.error("%s", e)
        return EXIT_FAILURE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / MAP_TSV, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["image_id", "tx", "ty", "theta", "file"])
        for im, f in zip(mapped, files):
            if f.resolve() != (out / f.name).resolve():
                shutil.copyfile(f, out / f.name)
            w.writerow([im.image_id] + _pose_row(im.pose) + [f.name])
    print(json.dumps({"map": str(out), "images": len(mapped)}))
    return EXIT_OK


def read_map_dir(path) -> list[MapImage]:
    path = Path(path)
    rows = list(csv.DictReader(open(path / MAP_TSV, newline=""), delimiter="\t"))
    images = []
    for r in rows:
        src = path / r["file"]
        h, w = read_image(src).shape
        images.append(MapImage(int(r["image_id"]), Pose2(float(r["theta"]), float(r["tx"]), float(r["ty"])),
                               w, h, str(src.resolve())))
    return images


# build-db

def cmd_build_db(args) -> int:
    if not 1 <= args.k <= DESCRIPTOR_DIM:
        raise UsageError(f"--k must be in [1, {DESCRIPTOR_DIM}]")
    if args.per_image < 1:
        raise UsageError("--per-image must be >= 1")
    images = read_map_dir(args.map)
    feats = {im.image_id: extract(read_image(im.source)) for im in images}
    db = build_database(images, feats, k=args.k, features_per_image=args.per_image, seed=args.seed,
                        selection=args.selection, capture_date=args.capture_date)
    save(db, args.out)
    print(json.dumps({"db": args.out, "images": len(images), "features": len(db.features), "k": args.k}))
    return EXIT_OK


# localize / evaluate

def _localize_config(args) -> LocalizeConfig:
    if args.cell_size <= 0:
        raise UsageError("--cell-size must be positive")
    if args.min_inliers < 2:
        raise UsageError("--min-inliers must be >= 2")
    checks = None if args.checks <= 0 else args.checks
    return LocalizeConfig(DetectorConfig(), checks, args.cell_size, args.min_inliers, seed=args.seed)


def cmd_localize(args) -> int:
    cfg = _localize_config(args)
    db = load(args.db)
    image = read_image(args.image)
    res = Localizer(db, cfg).localize(image)
    doc = res.to_json(db.mm_per_pixel)
    if args.json:
        print(json.dumps(doc, indent=2))
    elif res.success:
        p = doc["pose"]
        print(f"tx={p['tx']:.3f} ty={p['ty']:.3f} theta={p['theta']:.4f}deg inliers={res.n_inliers}")
    else:
        print(f"failure: {res.failure.value}")
    return EXIT_OK if res.success else EXIT_FAILURE


def _read_queries(source: str):
    """``(image path, truth pose or None)`` pairs from a directory or manifest."""
    p = Path(source)
    if p.is_dir():
        if (p / MANIFEST).exists():
            p = p / MANIFEST
        else:
            return [(f, None) for f in list_images(p)]
    out = []
    for r in csv.DictReader(open(p, newline=""), delimiter="\t"):
        truth = None
        if r.get("tx") not in (None, ""):
            truth = Pose2(float(r["theta"]), float(r["tx"]), float(r["ty"]))
        out.append((p.parent / r["file"], truth))
    return out


def cmd_evaluate(args) -> int:
    try:
        criterion = SuccessCriterion.parse(args.criterion)
    except ValueError as e:
        raise UsageError(str(e))
    cfg = _localize_config(args)
    db = load(args.db)
    queries = _read_queries(args.queries)
    if not queries:
        raise OSError(f"no queries found in {args.queries}")
    loc = Localizer(db, cfg)
    map_feats = None
    report = EvalReport("query", [args.queries], criterion)
    for i, (path, truth) in enumerate(queries):
        image = read_image(path)
        fs, timings = loc.extract(image)
        res = loc.localize_features(fs, timings)
        if truth is not None:
            verdict = judge_against_truth(res, truth, criterion)
        else:
            if map_feats is None:
                map_feats = {im.image_id: extract(read_image(im.source)) for im in db.images}
            size = (image.shape[1], image.shape[0])
            verdict = verify_pose(db, res, fs, map_feats, criterion, args.min_correspondences, size)
        report.frames.append(_record(i, args.queries, res, verdict))
        log.info("%s: %s", path.name, verdict.reason)
    tsv = args.tsv or str(Path(args.out).with_suffix(".tsv"))
    report.save(args.out, tsv)
    summary = {"queries": len(queries), "success_rate": report.success_rate(),
               "failures": report.failure_histogram(), "report": args.out, "tsv": tsv}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_db_info(args) -> int:
    info = read_header(args.db)
    if args.json:
        print(json.dumps(info, indent=2))
    else:
        for key in ("version", "images", "features", "k", "buckets", "bytes"):
            print(f"{key}\t{info[key]}")
        for key, val in sorted(info["meta"].items()):
            print(f"meta.{key}\t{val}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="texloc", description="Ground-texture mapping and global localization.")
    p.add_argument("--version", action="version", version=f"texloc {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    p.add_argument("--threads", type=int, default=None,
                   help="parallelism cap (default: $TEXLOC_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic texture, zig-zag map frames and queries")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--style", default="scratchy", help=f"one of {', '.join(STYLES)}")
    s.add_argument("--rows", type=int, default=5)
    s.add_argument("--cols", type=int, default=5)
    s.add_argument("--overlap", type=float, default=0.4, help="fractional overlap of adjacent frames")
    s.add_argument("--frame-width", type=int, default=1280)
    s.add_argument("--frame-height", type=int, default=960)
    s.add_argument("--margin", type=int, default=200, help="texture border around the map, pixels")
    s.add_argument("--jitter", type=float, default=20.0, help="frame position jitter, pixels")
    s.add_argument("--jitter-deg", type=float, default=3.0, help="frame rotation jitter, degrees")
    s.add_argument("--queries", type=int, default=0, help="number of random in-map queries")
    s.add_argument("--occlusion", type=float, default=0.0, help="occluded fraction of each query")
    s.add_argument("--blur", type=float, default=0.0, help="motion blur length, pixels")
    s.add_argument("--blur-angle", type=float, default=0.0, help="motion blur direction, degrees")
    s.add_argument("--noise", type=float, default=0.0, help="additive Gaussian noise sigma")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-map", help="stitch capture-ordered frames into a map directory")
    s.add_argument("--frames", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-loop-closures", action="store_true")
    s.set_defaults(func=cmd_build_map)

    s = sub.add_parser("build-db", help="build a TXDB feature database from a map directory")
    s.add_argument("--map", required=True)
    s.add_argument("--k", type=int, default=16, help="descriptor dimensions after PCA")
    s.add_argument("--per-image", type=int, default=50, help="features kept per map image")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--selection", choices=("random", "response"), default="random")
    s.add_argument("--capture-date", default="")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_db)

    for name, fn, helptext in (("localize", cmd_localize, "localize one query image"),
                               ("evaluate", cmd_evaluate, "localize and judge a query set")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--db", required=True)
        s.add_argument("--checks", type=int, default=32, help="kd-forest leaves visited; <= 0 for exact search")
        s.add_argument("--seed", type=int, default=0, help="RANSAC seed")
        s.add_argument("--cell-size", type=float, default=DEFAULT_CELL_SIZE)
        s.add_argument("--min-inliers", type=int, default=DEFAULT_MIN_INLIERS)
        s.set_defaults(func=fn)
        if name == "localize":
            s.add_argument("--image", required=True)
            s.add_argument("--json", action="store_true")
        else:
            s.add_argument("--queries", required=True, help="image directory or manifest.tsv")
            s.add_argument("--criterion", default="30px:1.5deg")
            s.add_argument("--min-correspondences", type=int, default=10)
            s.add_argument("--out", required=True, help="JSON report path")
            s.add_argument("--tsv", default=None, help="TSV report path (default: next to --out)")

    s = sub.add_parser("db-info", help="print header and meta of a TXDB file")
    s.add_argument("--db", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_db_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cv2.setNumThreads(_threads(args))
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"texloc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatabaseFormatError, KeyError, csv.Error) as e:
        print(f"texloc: error: {e}", file=sys.stderr)
        return EXIT_IO
