"""
Localizing one query image
==========================

Every query feature is matched to its nearest database feature in the same
scale bucket.  Each match votes for where the query image's origin lies in
the map; true matches agree on one cell, wrong ones scatter.  RANSAC on the
votes around the peak gives the pose.

Run ``02_build_map_and_database.py`` first.
"""

import json
import math
from pathlib import Path

import numpy as np

from texloc.core import Pose2, compose, pose_error
from texloc.locate import Localizer, accumulate, location_votes
from texloc.mapdb import load
from texloc.synth import Degradation, generate_texture, grid_extent, sample_query, zigzag_poses

out = Path("demo_output")
db = load(out / "demo_map.txdb")
loc = Localizer(db)

# Rebuild the same texture and truth frame the map was made from.
margin = 200
w, h = grid_extent(3, 3)
tex = generate_texture(seed=7, width=int(w) + 2 * margin, height=int(h) + 2 * margin)
align = zigzag_poses(3, 3, origin=(margin, margin), jitter=20.0, jitter_deg=3.0, seed=8)[0].inverse()

query_pose = Pose2(math.radians(-120), 2300.0, 2000.0)
q = sample_query(tex, query_pose, degradation=Degradation(occlusion=0.3, noise=0.02), seed=3)
res = loc.localize(q.image)
truth = compose(align, query_pose)

print(json.dumps(res.to_json(db.mm_per_pixel), indent=2))
dt, dr = pose_error(res.pose, truth)
print(f"error vs truth: {dt:.2f} px ({dt * db.mm_per_pixel:.2f} mm), {dr:.3f} deg")

# Compare the grid made by origin votes with one where each match votes for
# its database feature's own position.
naive = accumulate(location_votes(res.matches), loc.extent, loc.config.cell_size)
print(f"peak cell: origin votes {res.peak_cell_votes}, location votes {naive.counts.max()}, "
      f"of {res.total_matches} matches over {res.grid.counts.size} cells")
print("second-best 3x3 block:", res.second_peak_votes)

# A crop from an unmapped texture leaves only a flat vote grid.
elsewhere = generate_texture(seed=99, width=1400, height=1100)
miss = loc.localize(sample_query(elsewhere, Pose2(0.0, 50.0, 50.0)).image)
print(f"unmapped query: success={miss.success}, failure={miss.failure.value}, "
      f"peak cell {miss.peak_cell_votes}, cell mean {np.mean(miss.grid.counts):.2f}")
