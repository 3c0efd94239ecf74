"""
Rendering a voxel scene and pulling gradients back
===================================================

Build a small scene, look at it from a few cameras, then check the analytic
gradient of a pixel sum against finite differences.
"""

import numpy as np

from c123.cases import synthetic_target
from c123.scene import pose_from_spherical, render

scene = synthetic_target(16)
print("grid", scene.density.shape, "voxel width", round(scene.voxel_width, 4))

# azimuth 0 sits on +x, elevation 0 on the equator
for az in (0, 90, 180, 270):
    view = render(scene, pose_from_spherical(az, 15, 3.0), 32, keep_tape=False)
    covered = view.alpha > 0.5
    print(f"azimuth {az:3d}: coverage {covered.mean():.3f}, mean depth {view.depth[covered].mean():.3f}")

# gradient of sum(rgb) wrt one density voxel
pose = pose_from_spherical(30, 10, 3.0)
view = render(scene, pose, 24)
grad = view.backward(grad_rgb=np.ones_like(view.rgb))
idx = tuple(int(i) for i in np.unravel_index(np.argmax(np.abs(grad.density)), grad.density.shape))

eps = 1e-4
old = scene.density[idx]
scene.density[idx] = old + eps
plus = render(scene, pose, 24, keep_tape=False).rgb.sum()
scene.density[idx] = old - eps
minus = render(scene, pose, 24, keep_tape=False).rgb.sum()
scene.density[idx] = old
print("voxel", idx, "analytic", grad.density[idx], "numeric", (plus - minus) / (2 * eps))
