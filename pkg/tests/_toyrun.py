"""Shared toy-run cache for the slow end-to-end tests.

The full pipeline (dataset -> 20-epoch training -> per-sample scoring) takes
tens of minutes, so it runs once and is cached under tests/_cache keyed by a
digest of the configuration. Several acceptance checks read the same run.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from nvs3d import evaluate as ev
from nvs3d import model as mdl
from nvs3d.shapes import CLASS_NAMES, DatasetConfig, build_dataset, \
    load_samples
from nvs3d.train import TrainConfig, train
from nvs3d.viewsphere import canonical_sphere

TOY = {
    "samples_per_class": 40,
    "classes": list(CLASS_NAMES),
    "split_ratio": 0.8,
    "data_seed": 0,
    "resolution": 16,
    "image_size": 32,
    "epochs": 20,
    "batch_size": 8,
    "lr": 1e-4,
    "optimizer": "adam",
    "train_seed": 0,
    "base_view_id": 8,
    "v_t": 0.3,
}

RANDOM_SEEDS = (0, 1, 2, 3, 4)
STRATEGIES = (("learned_best",)
              + tuple(f"learned_kth:{k}" for k in range(2, 12))
              + tuple(f"random:{s}" for s in RANDOM_SEEDS)
              + ("farthest", "oracle", "masked:0"))


def cache_dir() -> str:
    key = hashlib.sha256(
        json.dumps(TOY, sort_keys=True).encode()).hexdigest()[:12]
    return os.path.join(os.path.dirname(os.path.abspath(__file__)),
                        "_cache", f"toy-{key}")


def ensure_toy_run() -> str:
    """Build dataset, train, score and evaluate once; return the cache dir."""
    root = cache_dir()
    done = os.path.join(root, "DONE")
    if os.path.exists(done):
        return root
    os.makedirs(root, exist_ok=True)

    data_dir = os.path.join(root, "data")
    manifest = build_dataset(DatasetConfig(
        out_dir=data_dir, samples_per_class=TOY["samples_per_class"],
        classes=tuple(TOY["classes"]), split_ratio=TOY["split_ratio"],
        seed=TOY["data_seed"], resolution=TOY["resolution"]))

    model_cfg = mdl.ModelConfig(image_size=TOY["image_size"],
                                resolution=TOY["resolution"])
    tcfg = TrainConfig(manifest=manifest,
                       checkpoint=os.path.join(root, "model.nvsm"),
                       log=os.path.join(root, "train_log.tsv"),
                       epochs=TOY["epochs"], batch_size=TOY["batch_size"],
                       lr=TOY["lr"], optimizer=TOY["optimizer"],
                       seed=TOY["train_seed"], model=model_cfg)
    train(tcfg)

    params, model_cfg, _, _ = mdl.load_checkpoint(tcfg.checkpoint, model_cfg)
    params = {n: mdl.Tensor(p.data) for n, p in params.items()}
    sphere = canonical_sphere()
    samples = load_samples(manifest, split="test")
    probs, ious, ids, classes = [], [], [], []
    for s in samples:
        sc = ev.score_sample(s, params, model_cfg, sphere,
                             TOY["base_view_id"], TOY["v_t"])
        probs.append(sc.probs)
        ious.append(sc.ious)
        ids.append(sc.sample_id)
        classes.append(sc.class_name)
    np.savez(os.path.join(root, "scored.npz"),
             probs=np.array(probs), ious=np.array(ious),
             sample_ids=np.array(ids), classes=np.array(classes))

    ecfg = ev.EvalConfig(manifest=manifest, checkpoint=tcfg.checkpoint,
                         strategies=STRATEGIES, v_t=TOY["v_t"],
                         base_view_id=TOY["base_view_id"])
    report = ev.evaluate(params, model_cfg, ecfg)
    with open(os.path.join(root, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(ev.report_to_json(report))

    with open(done, "w", encoding="utf-8") as fh:
        fh.write("ok\n")
    return root


if __name__ == "__main__":
    print(ensure_toy_run())
