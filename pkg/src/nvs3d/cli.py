"""Command-line entry point: gen-data | train | eval | oracle | render | report."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evaluate as ev
from . import model as mdl
from . import render as rnd
from .errors import NvsError
from .model import ModelConfig
from .shapes import CLASS_NAMES, DatasetConfig, build_dataset, load_samples
from .train import TrainConfig, train
from .viewsphere import load_sphere


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise NvsError("config file must hold a JSON object")
    return data


def _resolve(defaults: dict, file_cfg: dict, args, keys) -> dict:
    """defaults <- config file <- explicit flags (flags win)."""
    out = dict(defaults)
    for k in keys:
        if k in file_cfg:
            out[k] = file_cfg[k]
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _write_resolved(out_dir: str, command: str, resolved: dict):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"command": command, **resolved}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")


_MODEL_KEYS = ("image_size", "resolution", "fusion_mode",
               "include_base_in_candidates", "dtype")


def _model_config(resolved: dict) -> ModelConfig:
    return ModelConfig(**{k: resolved[k] for k in _MODEL_KEYS
                          if k in resolved})


def _cmd_gen_data(args) -> int:
    file_cfg = _load_config_file(args.config)
    keys = ("samples_per_class", "classes", "split_ratio", "seed",
            "resolution", "out")
    resolved = _resolve({"samples_per_class": 40, "classes": list(CLASS_NAMES),
                         "split_ratio": 0.8, "seed": 0, "resolution": 16},
                        file_cfg, args, keys)
    if isinstance(resolved["classes"], str):
        resolved["classes"] = resolved["classes"].split(",")
    out_dir = resolved["out"]
    cfg = DatasetConfig(out_dir=out_dir,
                        samples_per_class=int(resolved["samples_per_class"]),
                        classes=tuple(resolved["classes"]),
                        split_ratio=float(resolved["split_ratio"]),
                        seed=int(resolved["seed"]),
                        resolution=int(resolved["resolution"]))
    manifest = build_dataset(cfg)
    _write_resolved(out_dir, "gen-data", resolved)
    print(f"wrote {manifest}")
    return 0


def _cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    keys = ("manifest", "epochs", "batch_size", "lr", "optimizer", "seed",
            "base_view_policy", "augment", "sphere", "out") + _MODEL_KEYS
    resolved = _resolve({"epochs": 20, "batch_size": 8, "lr": 1e-4,
                         "optimizer": "adam", "seed": 0,
                         "base_view_policy": "random_per_sample",
                         "augment": True, "sphere": None,
                         "image_size": 32, "resolution": 16},
                        file_cfg, args, keys)
    if "manifest" not in resolved:
        raise NvsError("train needs --manifest")
    out_dir = resolved["out"]
    os.makedirs(out_dir, exist_ok=True)
    cfg = TrainConfig(manifest=resolved["manifest"],
                      checkpoint=os.path.join(out_dir, "model.nvsm"),
                      log=os.path.join(out_dir, "train_log.tsv"),
                      epochs=int(resolved["epochs"]),
                      batch_size=int(resolved["batch_size"]),
                      lr=float(resolved["lr"]),
                      optimizer=resolved["optimizer"],
                      seed=int(resolved["seed"]),
                      base_view_policy=resolved["base_view_policy"],
                      augment=bool(resolved["augment"]),
                      sphere_path=resolved["sphere"],
                      model=_model_config(resolved))
    _write_resolved(out_dir, "train", resolved)
    means = train(cfg, resume=bool(getattr(args, "resume", False)))
    print(f"trained {len(means)} epochs; final mean loss {means[-1]:.6f}"
          if means else "nothing to train (already complete)")
    return 0


def _load_params(path, model_cfg):
    if not os.path.exists(path):
        raise NvsError("checkpoint not found")
    return mdl.load_checkpoint(path, model_cfg)


def _cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    keys = ("manifest", "checkpoint", "strategies", "v_t", "base_view_id",
            "sweep_bases", "mask_drop", "sphere", "out") + _MODEL_KEYS
    resolved = _resolve({"strategies": "learned_best,random:0,farthest,oracle",
                         "v_t": 0.3, "base_view_id": 8, "sweep_bases": False,
                         "mask_drop": 0.4, "sphere": None,
                         "image_size": 32, "resolution": 16},
                        file_cfg, args, keys)
    for key in ("manifest", "checkpoint"):
        if key not in resolved:
            raise NvsError(f"eval needs --{key.replace('_', '-')}")
    strategies = resolved["strategies"]
    if isinstance(strategies, str):
        strategies = strategies.split(",")
    model_cfg = _model_config(resolved)
    params, model_cfg, _, _ = _load_params(resolved["checkpoint"], model_cfg)
    cfg = ev.EvalConfig(manifest=resolved["manifest"],
                        checkpoint=resolved["checkpoint"],
                        strategies=tuple(strategies),
                        v_t=float(resolved["v_t"]),
                        base_view_id=int(resolved["base_view_id"]),
                        sweep_bases=bool(resolved["sweep_bases"]),
                        mask_drop=float(resolved["mask_drop"]),
                        sphere_path=resolved["sphere"])
    report = ev.evaluate(params, model_cfg, cfg)
    out_dir = resolved["out"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w",
              encoding="utf-8") as fh:
        fh.write(ev.report_to_json(report))
    table = ev.report_table(report)
    with open(os.path.join(out_dir, "report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table)
    _write_resolved(out_dir, "eval", resolved)
    print(table, end="")
    return 0


def _cmd_oracle(args) -> int:
    file_cfg = _load_config_file(args.config)
    keys = ("manifest", "checkpoint", "v_t", "base_view_id", "sphere",
            "out") + _MODEL_KEYS
    resolved = _resolve({"v_t": 0.3, "base_view_id": 8, "sphere": None,
                         "image_size": 32, "resolution": 16},
                        file_cfg, args, keys)
    for key in ("manifest", "checkpoint"):
        if key not in resolved:
            raise NvsError(f"oracle needs --{key.replace('_', '-')}")
    model_cfg = _model_config(resolved)
    params, model_cfg, _, _ = _load_params(resolved["checkpoint"], model_cfg)
    params = {n: mdl.Tensor(p.data) for n, p in params.items()}
    sphere = load_sphere(resolved["sphere"])
    samples = load_samples(resolved["manifest"], split="test")
    rows = []
    for sample in samples:
        sc = ev.score_sample(sample, params, model_cfg, sphere,
                             int(resolved["base_view_id"]),
                             float(resolved["v_t"]))
        oracle_id = int(np.argmax(sc.ious))
        rows.append({"sample_id": sc.sample_id, "class": sc.class_name,
                     "base_id": sc.base_id, "oracle_id": oracle_id,
                     "oracle_iou": float(sc.ious[oracle_id]),
                     "ious": [float(x) for x in sc.ious]})
    out_dir = resolved["out"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "oracle.json"), "w",
              encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_resolved(out_dir, "oracle", resolved)
    print(f"wrote oracle choices for {len(rows)} samples")
    return 0


def _cmd_render(args) -> int:
    file_cfg = _load_config_file(args.config)
    keys = ("manifest", "sample_id", "image_size", "sphere", "out")
    resolved = _resolve({"image_size": 32, "sphere": None, "sample_id": None},
                        file_cfg, args, keys)
    if "manifest" not in resolved:
        raise NvsError("render needs --manifest")
    sphere = load_sphere(resolved["sphere"])
    samples = load_samples(resolved["manifest"])
    wanted = resolved["sample_id"]
    if wanted is not None:
        samples = [s for s in samples if s.sample_id == wanted]
        if not samples:
            raise NvsError(f"sample {wanted} not found in manifest")
    sample = samples[0]
    out_dir = resolved["out"]
    os.makedirs(out_dir, exist_ok=True)
    for view in sorted(sphere, key=lambda v: v.id):
        img = rnd.render_view(sample.truth, view, int(resolved["image_size"]))
        rnd.save_ppm(os.path.join(
            out_dir, f"{sample.sample_id}_view{view.id:02d}.ppm"), img)
    _write_resolved(out_dir, "render", resolved)
    print(f"wrote {len(sphere)} views of {sample.sample_id}")
    return 0


def _cmd_report(args) -> int:
    if not args.inputs:
        raise NvsError("report needs at least one eval report JSON")
    merged_rows, merged_overall = [], []
    digests = []
    for path in args.inputs:
        with open(path, "r", encoding="utf-8") as fh:
            rep = ev.report_from_json(fh.read())
        merged_rows.extend(rep.rows)
        merged_overall.extend(rep.overall)
        digests.append(rep.config_digest)
    merged = ev.EvalReport(config_digest={"merged_from": digests},
                           rows=merged_rows, overall=merged_overall,
                           histograms={})
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    table = ev.report_table(merged)
    with open(os.path.join(out_dir, "comparison.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "comparison.json"), "w",
              encoding="utf-8") as fh:
        fh.write(ev.report_to_json(merged))
    print(table, end="")
    return 0


def _add_common(sp):
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvs3d",
        description="Next-view selection and voxel reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the procedural dataset")
    _add_common(p)
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.add_argument("--classes")
    p.add_argument("--split-ratio", type=float, dest="split_ratio")
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the joint model")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--base-view-policy", dest="base_view_policy")
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--no-augment", action="store_false", dest="augment",
                   default=None)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--resolution", type=int)
    p.add_argument("--sphere")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate selection strategies")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--strategies")
    p.add_argument("--v-t", type=float, dest="v_t")
    p.add_argument("--base-view-id", type=int, dest="base_view_id")
    p.add_argument("--sweep-bases", action="store_true", dest="sweep_bases",
                   default=None)
    p.add_argument("--mask-drop", type=float, dest="mask_drop")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--resolution", type=int)
    p.add_argument("--sphere")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("oracle", help="per-sample oracle choices and IoUs")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--v-t", type=float, dest="v_t")
    p.add_argument("--base-view-id", type=int, dest="base_view_id")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--resolution", type=int)
    p.add_argument("--sphere")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("render", help="dump a sample's views as PPM images")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--sample-id", dest="sample_id")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--sphere")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("report", help="merge eval reports into one table")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NvsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
