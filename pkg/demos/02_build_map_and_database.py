"""
Stitching a map and building the feature database
=================================================

Frames captured along a zig-zag path are registered pairwise, chained, and
refined with loop closures.  A sparse random subset of each frame's features
is projected onto a 16-d PCA basis and saved as a TXDB file.
"""

from pathlib import Path

import numpy as np

from texloc.core import compose, pose_error
from texloc.features import extract
from texloc.mapdb import build_database, load, save
from texloc.stitch import stitch_sequence
from texloc.synth import generate_texture, grid_extent, sample_query, zigzag_poses

out = Path("demo_output")
out.mkdir(exist_ok=True)

rows, cols, margin = 3, 3, 200
w, h = grid_extent(rows, cols)
tex = generate_texture(seed=7, width=int(w) + 2 * margin, height=int(h) + 2 * margin)
truth = zigzag_poses(rows, cols, origin=(margin, margin), jitter=20.0, jitter_deg=3.0, seed=8)
frames = [extract(sample_query(tex, p).image) for p in truth]
print("keypoints per frame:", [len(f) for f in frames])

# The first frame is the gauge, so compare after mapping truth into its frame.
images = stitch_sequence(frames)
align = truth[0].inverse()
errs = [pose_error(im.pose, compose(align, t)) for im, t in zip(images, truth)]
print(f"stitch: max translation error {max(e[0] for e in errs):.3f} px, "
      f"max rotation error {max(e[1] for e in errs):.4f} deg")

# Keep 50 random features per image, each reduced to 16 dims.
db = build_database(images, frames, k=16, features_per_image=50, seed=0)
save(db, out / "demo_map.txdb")
size = (out / "demo_map.txdb").stat().st_size
total_var = np.vstack([f.descriptors for f in frames]).var(axis=0, ddof=1).sum()
print(f"database: {len(db.features)} features, {size} bytes, "
      f"{db.basis.eigenvalues.sum() / total_var:.1%} of descriptor variance kept")
print("scale bucket sizes:", np.bincount(db.buckets.bucket_of(db.features.scale), minlength=db.buckets.n))
assert load(out / "demo_map.txdb") == db
