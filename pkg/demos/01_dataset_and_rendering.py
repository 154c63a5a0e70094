"""Generate procedural shapes and render them from the view sphere.

Writes a small dataset plus PPM images of one sample from all 11 viewpoints.
Run:  python3 demos/01_dataset_and_rendering.py [out_dir]
"""

import os
import sys

from nvs3d.render import augment, render_view, save_ppm
from nvs3d.shapes import CLASS_NAMES, DatasetConfig, build_dataset, \
    load_samples
from nvs3d.viewsphere import canonical_sphere, chord_distance, farthest_view

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out/dataset"
manifest = build_dataset(DatasetConfig(out_dir=out, samples_per_class=4,
                                       classes=CLASS_NAMES, seed=0,
                                       resolution=16))
samples = load_samples(manifest)
print(f"dataset: {len(samples)} samples -> {manifest}")
for cls in CLASS_NAMES:
    fills = [s.truth.bits.mean() for s in samples if s.class_name == cls]
    print(f"  {cls:8s} fill {min(fills):.3f}..{max(fills):.3f}")

sphere = canonical_sphere()
sample = samples[0]
img_dir = os.path.join(out, "views")
os.makedirs(img_dir, exist_ok=True)
for view in sphere:
    img = render_view(sample.truth, view, size=64)
    save_ppm(os.path.join(img_dir, f"view{view.id:02d}.ppm"), img)
    if view.id == 0:
        save_ppm(os.path.join(img_dir, "view00_augmented.ppm"),
                 augment(img, rng_seed=7))
print(f"rendered {len(sphere)} views of {sample.sample_id} -> {img_dir}")

base = sphere.by_id(7)
far = farthest_view(base, sphere)
print(f"farthest view from id {base.id} (elev {base.elevation_deg:.0f}, "
      f"azim {base.azimuth_deg:.0f}) is id {far.id} "
      f"(chord {chord_distance(base, far):.4f})")
