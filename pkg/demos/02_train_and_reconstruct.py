"""Train a small joint selection + reconstruction model and inspect it.

Uses a reduced configuration (8^3 grids, 16px views, a few epochs) so the
whole script runs in a couple of minutes on a laptop.
Run:  python3 demos/02_train_and_reconstruct.py [out_dir]
"""

import os
import sys

import numpy as np

from nvs3d import model as mdl
from nvs3d.model import ModelConfig
from nvs3d.render import render_all
from nvs3d.shapes import DatasetConfig, build_dataset, load_samples
from nvs3d.train import TrainConfig, train
from nvs3d.viewsphere import canonical_sphere
from nvs3d.voxel import binarize, binary_iou

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out/train"
manifest = build_dataset(DatasetConfig(out_dir=os.path.join(out, "data"),
                                       samples_per_class=8, seed=0,
                                       resolution=8))

model_cfg = ModelConfig(image_size=16, resolution=8, trunk_channels=(4, 8, 8),
                        head_hidden=32, decoder_seed_channels=32,
                        fusion_hidden=4, refiner_hidden=4)
cfg = TrainConfig(manifest=manifest,
                  checkpoint=os.path.join(out, "model.nvsm"),
                  log=os.path.join(out, "train_log.tsv"),
                  epochs=4, batch_size=8, lr=1e-3, model=model_cfg)
means = train(cfg)
print("epoch mean losses:", " ".join(f"{m:.4f}" for m in means))

params, model_cfg, _, _ = mdl.load_checkpoint(cfg.checkpoint, model_cfg)
params = {n: mdl.Tensor(p.data) for n, p in params.items()}
sphere = canonical_sphere()

sample = load_samples(manifest, split="test")[0]
views = render_all(sample.truth, sphere, model_cfg.image_size)
imgs = mdl.images_to_tensor(views)
probs, vols = mdl.candidate_volumes(imgs, base_idx=8, params=params,
                                    cfg=model_cfg)
print(f"\nsample {sample.sample_id}, base view 8")
print("selection distribution:",
      " ".join(f"{p:.3f}" for p in np.asarray(probs.data)))
for i in (int(np.argmax(probs.data)), int(np.argmin(probs.data))):
    pred = binarize(mdl.volume_to_grid(vols[i]), 0.3)
    print(f"  candidate {i:2d}: IoU {binary_iou(pred, sample.truth):.4f} "
          f"(p = {float(probs.data[i]):.3f})")
