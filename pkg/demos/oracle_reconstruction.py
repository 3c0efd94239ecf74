"""
Reconstructing a hidden scene with oracle guidance
==================================================

An oracle noise predictor knows a target scene and returns a residual that
points at it from any pose.  That makes the whole two-stage loop testable on
a laptop: reconstruct from one reference image, then score novel views.

Takes a few minutes with the default 2000 steps; pass a smaller count as the
first argument for a quick look.
"""

import sys

import numpy as np

from c123.boundary import detection_views
from c123.cases import case_from_scene, synthetic_target
from c123.embedding import DownsampleEmbedding
from c123.evalkit import psnr
from c123.guidance import OracleBackend
from c123.scene import render
from c123.trainer import Backends, TrainConfig, run

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
target = synthetic_target(16)
cfg = TrainConfig(total_iterations=steps, lr=0.01, resolution=32, grid_size=16, checkpoint_every=0)
case = case_from_scene(target, cfg.reference_pose(), 32, prompt="hidden target")

backends = Backends(OracleBackend(target), OracleBackend(target), DownsampleEmbedding(case.image))
result = run(case, cfg, backends)
print("transition at", result.transition_iteration)

truth = lambda pose: render(target, pose, 32, keep_tape=False).rgb
print(f"reference view: {psnr(result.renders['reference'].rgb, truth(cfg.reference_pose())):.2f} dB")
scores = [psnr(result.renders[f"view_{int(p.azimuth):03d}"].rgb, truth(p)) for p in detection_views()]
for pose, s in zip(detection_views(), scores):
    print(f"azimuth {pose.azimuth:5.1f}: {s:.2f} dB")
print(f"mean novel view: {np.mean(scores):.2f} dB")
