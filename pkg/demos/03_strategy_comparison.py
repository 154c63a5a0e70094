"""Compare next-view strategies (learned, random, farthest, oracle).

Trains the same reduced model as demo 02 if its checkpoint is missing, then
evaluates every strategy on the test split and prints the comparison table.
Run:  python3 demos/03_strategy_comparison.py [out_dir]
"""

import os
import sys

from nvs3d import evaluate as ev
from nvs3d import model as mdl
from nvs3d.model import ModelConfig
from nvs3d.shapes import DatasetConfig, build_dataset
from nvs3d.train import TrainConfig, train

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out/train"
model_cfg = ModelConfig(image_size=16, resolution=8, trunk_channels=(4, 8, 8),
                        head_hidden=32, decoder_seed_channels=32,
                        fusion_hidden=4, refiner_hidden=4)
manifest = os.path.join(out, "data", "manifest.json")
checkpoint = os.path.join(out, "model.nvsm")
if not os.path.exists(checkpoint):
    manifest = build_dataset(DatasetConfig(out_dir=os.path.join(out, "data"),
                                           samples_per_class=8, seed=0,
                                           resolution=8))
    train(TrainConfig(manifest=manifest, checkpoint=checkpoint,
                      log=os.path.join(out, "train_log.tsv"),
                      epochs=4, batch_size=8, lr=1e-3, model=model_cfg))

params, model_cfg, _, _ = mdl.load_checkpoint(checkpoint, model_cfg)
cfg = ev.EvalConfig(
    manifest=manifest, checkpoint=checkpoint,
    strategies=("learned_best", "learned_kth:2", "learned_kth:6",
                "random:0", "farthest", "masked:0", "oracle"))
report = ev.evaluate(params, model_cfg, cfg)
print(ev.report_table(report))
print("learned-best selection histogram per class (view ids 0..10):")
for cls, hist in sorted(report.histograms.items()):
    print(f"  {cls:8s} {hist}")
print(f"\nmean eval BCE of the learned-best reconstruction: "
      f"{report.mean_eval_loss:.4f}")
