"""Inflate a 2D backbone to 3D and feed it a video that never changes.

Each inflated kernel is the 2D kernel repeated over time and divided by the
temporal extent, so on a constant clip the 3D network reproduces the 2D
scores for the repeated frame.
"""
import numpy as np

from edgetsn import backbone as bb

spec2d = bb.default_spec(num_classes=4)
w2d = bb.init_weights(spec2d, seed=0)
spec3d, w3d = bb.inflate_backbone(spec2d, w2d, bb.default_temporal_sizes(spec2d))

frame = np.random.default_rng(0).uniform(size=(3, 32, 32))
t = bb.min_clip_length(spec3d)
clip = np.repeat(frame[:, None], t, axis=1)

s2 = bb.forward(w2d, frame)
s3 = bb.forward(w3d, clip)
print(f"shortest valid clip: {t} frames")
print("2D scores:", np.round(s2, 6))
print("3D scores:", np.round(s3, 6))
print(f"max difference: {np.max(np.abs(s2 - s3)):.1e}")
