"""
Synthetic ground texture and query crops
========================================

A texture is band-limited noise with sparse marks on top.  A query is a
rotated camera-sized crop with known pose, optionally degraded.
"""

import math
from pathlib import Path

import numpy as np

from texloc.core import Pose2
from texloc.features import extract
from texloc.io import write_image
from texloc.synth import STYLES, Degradation, generate_texture, sample_query

out = Path("demo_output")
out.mkdir(exist_ok=True)

# One texture per style; the keypoint count is what the localizer feeds on.
for i, style in enumerate(STYLES):
    tex = generate_texture(seed=i, width=1600, height=1200, style=style)
    write_image(out / f"texture_{style}.png", tex.pixels)
    n = len(extract(tex.pixels[:960, :1280]))
    print(f"{style:9s} std {tex.pixels.std():.3f}  keypoints in a 1280x960 window: {n}")

# Pose2 maps query pixels into texture pixels: rotate by theta, then translate.
tex = generate_texture(seed=0, width=2400, height=1800)
pose = Pose2(math.radians(30), 900.0, 200.0)

# Degradations run in a fixed order: occlusion, dust, blur, noise.
for name, deg in [("clean", Degradation()),
                  ("occluded", Degradation(occlusion=0.4)),
                  ("blurred", Degradation(blur=9.0, blur_angle=45.0)),
                  ("noisy", Degradation(noise=0.05)),
                  ("dusty", Degradation(dust=300.0))]:
    q = sample_query(tex, pose, degradation=deg, seed=1)
    write_image(out / f"query_{name}.png", q.image)
    print(f"{name:9s} occluded {q.occluded_fraction:.2f}  keypoints {len(extract(q.image))}")

# The crop is exact: the texture pixel under query pixel (640, 480) is the same
# one the pose predicts.
centre = pose @ np.array([640.0, 480.0])
print("query centre lies at texture pixel", np.round(centre, 1))
