"""Render one procedural object, cut its patch and look at the planes.

Run: python demos/01_render_and_patch.py [out_dir]
Writes the rendered RGB/depth pair (PPM/PGM) and prints per-plane statistics.
"""
import sys
from pathlib import Path

import numpy as np

from tripose.geometry import look_at_pose, subdivide_icosahedron
from tripose.imaging import extract_patch
from tripose.renderer import dump_view, make_procedural_mesh, render

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# Viewpoints come from a subdivided icosahedron; we take one vertex and roll the camera.
sphere = subdivide_icosahedron(1)
direction = sphere.vertices[5]
pose = look_at_pose(direction, radius_m=0.6, in_plane_deg=30)
print(f"{len(sphere)} hemisphere viewpoints at level 1; using {np.round(direction, 3)}")

mesh = make_procedural_mesh("torus", 0.14, color_seed=4)
view = render(mesh, pose, image_size=64, focal_px=90.0)
dump_view(view, out / "torus")
print(f"foreground pixels: {view.foreground.sum()}, depth range "
      f"{view.depth[view.foreground].min():.3f}..{view.depth[view.foreground].max():.3f} m")

# The patch covers a 40 cm cube around the object; depth maps into [0, 1].
patch = extract_patch(view, cube_side_m=0.4, out_size=32)
for name, plane in zip(patch.channels, patch.planes):
    fg = plane[patch.mask]
    print(f"  {name:>2}: object mean {fg.mean():+.3f}  background mean {plane[~patch.mask].mean():+.3f}")
print(f"wrote {out / 'torus.ppm'} and {out / 'torus.pgm'}")
