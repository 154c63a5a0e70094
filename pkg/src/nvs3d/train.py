"""End-to-end training loop: all-candidate forwards, mixture loss, updates."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import render
from .autodiff import Tensor, make_optimizer
from .errors import ConfigError, TrainingDivergedError
from .loss import bce
from .model import ModelConfig
from .shapes import Sample, load_samples
from .viewsphere import load_sphere


@dataclass(frozen=True)
class TrainConfig:
    manifest: str = ""
    checkpoint: str = "model.nvsm"
    log: str = "train_log.tsv"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    base_view_policy: str = "random_per_sample"
    augment: bool = True
    sphere_path: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 1, batch >= 1, lr > 0 required")
        pol = self.base_view_policy
        if pol != "random_per_sample" and not pol.startswith("fixed:"):
            raise ConfigError(f"unknown base view policy {pol!r}")


def _fixed_base(policy: str) -> int | None:
    if policy.startswith("fixed:"):
        return int(policy.split(":", 1)[1])
    return None


def render_sample_views(sample: Sample, sphere, size: int):
    if sample.views is None:
        sample.views = render.render_all(sample.truth, sphere, size)
    return sample.views


def _sample_inputs(sample, base_id, cfg: TrainConfig, epoch, step_rng):
    views = sample.views
    if cfg.augment:
        seeds = step_rng.integers(0, 2 ** 62, size=len(views))
        views = [render.augment(v, int(s)) for v, s in zip(views, seeds)]
    return mdl.images_to_tensor(views, dtype=cfg.model.np_dtype)


def _batch_forward(batch, params, cfg: TrainConfig, base_ids, epoch,
                   step_rng):
    """Batched mixture loss over [B, K] candidate volumes."""
    stacked = np.stack([_sample_inputs(s, b, cfg, epoch, step_rng).data
                        for s, b in zip(batch, base_ids)])
    imgs = Tensor(stacked)
    p, vols = mdl.batched_candidate_volumes(imgs, base_ids, params, cfg.model)
    b, k = p.shape
    n = cfg.model.resolution ** 3
    # per-sample mixture r_b = sum_k p_bk * v_bk, then BCE over all voxels
    r = ad.tsum(ad.mul(ad.reshape(p, (b, k, 1)),
                       ad.reshape(vols, (b, k, n))), axis=1)
    truth = np.stack([s.truth.flat for s in batch])
    return bce(r, truth)


def train_step(batch, params, opt, cfg: TrainConfig, base_ids,
               epoch: int = 0, step_rng=None) -> float:
    """One optimizer update over a batch; returns the pre-step loss."""
    if not batch:
        raise ConfigError("empty batch")
    if step_rng is None:
        step_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    loss = _batch_forward(batch, params, cfg, base_ids, epoch, step_rng)
    value = float(loss.data)
    loss.backward()
    opt.step()
    return value


def batch_loss(batch, params, cfg: TrainConfig, base_ids, epoch: int,
               step_rng) -> float:
    """Forward-only recomputation of the train_step loss (no update)."""
    frozen = {name: Tensor(p.data) for name, p in params.items()}
    return float(_batch_forward(batch, frozen, cfg, base_ids, epoch,
                                step_rng).data)


def train(cfg: TrainConfig, resume: bool = False):
    """Run the full loop; writes a checkpoint per epoch and a step log.

    Returns per-epoch mean losses.
    """
    sphere = load_sphere(cfg.sphere_path)
    if len(sphere) != cfg.model.num_views:
        raise ConfigError(
            f"sphere has {len(sphere)} views, model expects "
            f"{cfg.model.num_views}")
    samples = load_samples(cfg.manifest, split="train")
    if not samples:
        raise ConfigError("manifest has no training samples")
    for s in samples:
        render_sample_views(s, sphere, cfg.model.image_size)

    start_epoch = 0
    if resume and os.path.exists(cfg.checkpoint):
        params, _, opt_state, last_epoch = mdl.load_checkpoint(
            cfg.checkpoint, cfg.model)
        if opt_state is None:
            raise ConfigError("checkpoint has no optimizer state to resume")
        opt = mdl.restore_optimizer(opt_state, params)
        start_epoch = last_epoch + 1
    else:
        params = mdl.init_params(cfg.model, cfg.seed)
        opt = make_optimizer(cfg.optimizer, params, cfg.lr)

    fixed = _fixed_base(cfg.base_view_policy)
    k = cfg.model.num_views
    n_batches = math.ceil(len(samples) / cfg.batch_size)
    epoch_means = []
    log_mode = "a" if (resume and start_epoch > 0) else "w"
    os.makedirs(os.path.dirname(os.path.abspath(cfg.log)), exist_ok=True)
    with open(cfg.log, log_mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng(np.random.SeedSequence(
                [cfg.seed, 0x657063, epoch])).permutation(len(samples))
            epoch_losses = []
            for bi in range(n_batches):
                idxs = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                batch = [samples[i] for i in idxs]
                step_rng = np.random.default_rng(np.random.SeedSequence(
                    [cfg.seed, 0x737470, epoch, bi]))
                if fixed is None:
                    base_ids = step_rng.integers(0, k, size=len(batch))
                else:
                    base_ids = [fixed] * len(batch)
                loss = train_step(batch, params, opt, cfg,
                                  [int(b) for b in base_ids],
                                  epoch=epoch, step_rng=step_rng)
                step = epoch * n_batches + bi
                if not math.isfinite(loss):
                    ids = ",".join(s.sample_id for s in batch)
                    raise TrainingDivergedError(
                        f"non-finite loss {loss} at step {step} "
                        f"(samples {ids})")
                log.write(f"{step}\t{epoch}\t{loss!r}\n")
                epoch_losses.append(loss)
            log.flush()
            epoch_means.append(float(np.mean(epoch_losses)))
            mdl.save_checkpoint(cfg.checkpoint, params, cfg.model,
                                optimizer=opt, epoch=epoch)
    return epoch_means
