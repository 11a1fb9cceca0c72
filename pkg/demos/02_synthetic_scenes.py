"""The synthetic scene oracle: exact geometry for training and evaluation.

Generates a deterministic scene of flat-shaded cuboids, saves the PPM
render, and verifies the analytic depth map against the labels: the depth
at an object's projected center is its front surface, strictly nearer than
the box center.
"""

from pathlib import Path

import numpy as np

from monopgc import data
from monopgc import geometry as geo

out_dir = Path("demo_output")
out_dir.mkdir(exist_ok=True)

scene = data.generate_synthetic_scene(seed=7)
h, w = scene.image.shape[1:]
print(f"scene seed=7: {len(scene.objects)} objects in a {w}x{h} image")
print(f"camera: f={scene.calib.fx:.1f}, principal point ({scene.calib.cx}, {scene.calib.cy})")

data.save_image(out_dir / "scene_0007.ppm", scene.image)
print(f"wrote {out_dir / 'scene_0007.ppm'}")

print("\nKITTI-format labels:")
for obj in scene.objects:
    print(" ", data.format_kitti_label(obj))

spec = geo.DepthBinSpec(2.0, 46.8, 64)
print("\ndepth map vs labels:")
for obj in scene.objects:
    uv, _ = scene.calib.project(np.array([obj.center3d()]))
    u, v = int(uv[0, 0]), int(uv[0, 1])
    surface = scene.depth_map.data[v, u]
    print(f"  center depth {obj.location[2]:6.2f} m, surface at projected center "
          f"{surface:6.2f} m, bin {geo.depth_to_lid_bin(spec, surface)}")

fg = scene.foreground
print(f"\nforeground coverage: {fg.mean() * 100:.1f}% of pixels")
print(f"depth range on objects: [{scene.depth_map.data[fg].min():.2f}, "
      f"{scene.depth_map.data[fg].max():.2f}] m")

print("\ndeterminism: regenerating with the same seed is bit-identical:",
      bool(np.array_equal(scene.image.data,
                          data.generate_synthetic_scene(seed=7).image.data)))

# round trip through the file formats
data.scene_to_files(scene, "0007", out_dir / "image_2", out_dir / "label_2", out_dir / "calib")
sample = data.load_kitti_sample("0007", out_dir / "image_2", out_dir / "label_2", out_dir / "calib")
print(f"file round trip: {len(sample.objects)} objects, "
      f"fx={sample.calib.fx:.1f}, image {sample.image.shape}")
