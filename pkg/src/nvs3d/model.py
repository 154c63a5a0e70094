"""The five sub-networks and their composition.

The view classifier ("selector") and the image encoder share one conv trunk:
the encoder output is literally an intermediate activation of the selector.
Per-view coarse volumes come from a transposed-conv decoder; a score-map
fusion combines a pair of coarse volumes and a small residual refiner
corrects the result.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (CheckpointMismatchError, ConfigError,
                     DimensionMismatchError, FormatError)
from .voxel import VoxelGrid

NVSM_MAGIC = b"NVSM"
NVSM_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    resolution: int = 16
    num_views: int = 11
    trunk_channels: tuple = (12, 24, 48)
    head_hidden: int = 64
    decoder_seed_channels: int = 64
    fusion_hidden: int = 8
    refiner_hidden: int = 8
    fusion_mode: str = "context_aware"
    include_base_in_candidates: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "trunk_channels", tuple(self.trunk_channels))
        down = 2 ** len(self.trunk_channels)
        if self.image_size < 8 or self.image_size % down:
            raise ConfigError(
                f"image size {self.image_size} must be a multiple of {down}")
        d = self.resolution
        if d < 8 or d & (d - 1) or d > 64:
            raise ConfigError(
                f"resolution {d} must be a power of two in [8, 64]")
        if self.fusion_mode not in ("context_aware", "simple_average"):
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        # decoder doubles a 2^3 seed once per stage; it must land on D exactly
        if 2 * 2 ** len(self.decoder_channels) != d:
            raise ConfigError("decoder stage count does not reach resolution")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def encoder_spatial(self) -> int:
        return self.image_size // 2 ** len(self.trunk_channels)

    @property
    def encoder_shape(self) -> tuple:
        s = self.encoder_spatial
        return (self.trunk_channels[-1], s, s)

    @property
    def decoder_channels(self) -> tuple:
        """Per-stage output channels; each stage doubles 2^3 up to D^3."""
        stages = int(np.log2(self.resolution // 2))
        chans = []
        c = self.decoder_seed_channels
        for _ in range(stages - 1):
            c //= 2
            chans.append(max(c, 1))
        chans.append(1)
        return tuple(chans)

    def digest(self) -> dict:
        d = asdict(self)
        d["trunk_channels"] = list(self.trunk_channels)
        return d


def _uniform(rng, shape, fan_in, dtype):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """He-style fan-in uniform init; deterministic in (cfg, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6F64]))
    dt = cfg.np_dtype
    p: dict[str, np.ndarray] = {}

    c_in = 3
    for i, c_out in enumerate(cfg.trunk_channels):
        p[f"trunk.conv{i}.w"] = _uniform(rng, (c_out, c_in, 3, 3),
                                         c_in * 9, dt)
        p[f"trunk.conv{i}.b"] = np.zeros(c_out, dtype=dt)
        c_in = c_out

    enc_flat = int(np.prod(cfg.encoder_shape))
    p["head.fc0.w"] = _uniform(rng, (enc_flat, cfg.head_hidden), enc_flat, dt)
    p["head.fc0.b"] = np.zeros(cfg.head_hidden, dtype=dt)
    p["head.fc1.w"] = _uniform(rng, (cfg.head_hidden, cfg.num_views),
                               cfg.head_hidden, dt)
    p["head.fc1.b"] = np.zeros(cfg.num_views, dtype=dt)

    seed_flat = cfg.decoder_seed_channels * 8
    p["dec.proj.w"] = _uniform(rng, (enc_flat, seed_flat), enc_flat, dt)
    p["dec.proj.b"] = np.zeros(seed_flat, dtype=dt)
    c_in = cfg.decoder_seed_channels
    for i, c_out in enumerate(cfg.decoder_channels):
        p[f"dec.tconv{i}.w"] = _uniform(rng, (c_in, c_out, 4, 4, 4),
                                        c_in * 64, dt)
        p[f"dec.tconv{i}.b"] = np.zeros(c_out, dtype=dt)
        c_in = c_out

    fh = cfg.fusion_hidden
    p["fuse.conv0.w"] = _uniform(rng, (fh, 1, 3, 3, 3), 27, dt)
    p["fuse.conv0.b"] = np.zeros(fh, dtype=dt)
    p["fuse.conv1.w"] = _uniform(rng, (1, fh, 3, 3, 3), fh * 27, dt)
    p["fuse.conv1.b"] = np.zeros(1, dtype=dt)

    rh = cfg.refiner_hidden
    p["ref.down.w"] = _uniform(rng, (rh, 1, 3, 3, 3), 27, dt)
    p["ref.down.b"] = np.zeros(rh, dtype=dt)
    p["ref.up.w"] = _uniform(rng, (rh, 1, 4, 4, 4), rh * 64, dt)
    p["ref.up.b"] = np.zeros(1, dtype=dt)
    p["ref.skip.w"] = _uniform(rng, (1, 1, 3, 3, 3), 27, dt)
    p["ref.skip.b"] = np.zeros(1, dtype=dt)

    return {name: Tensor(arr, requires_grad=True) for name, arr in p.items()}


def _bias2d(b: Tensor) -> Tensor:
    return ad.reshape(b, (1, b.shape[0], 1, 1))


def _bias3d(b: Tensor) -> Tensor:
    return ad.reshape(b, (1, b.shape[0], 1, 1, 1))


def images_to_tensor(images, dtype=np.float32) -> Tensor:
    """Stack H x W x 3 images into a [B, 3, H, W] input tensor."""
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(arr, dtype=dtype))


def encode(x: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Shared trunk; its output doubles as the reconstruction feature map."""
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise DimensionMismatchError(
            f"expected {cfg.image_size}px input, got {x.shape}")
    h = x
    for i in range(len(cfg.trunk_channels)):
        h = ad.elu(ad.conv2d(h, params[f"trunk.conv{i}.w"], stride=2)
                   + _bias2d(params[f"trunk.conv{i}.b"]))
    return h


def head(feat: Tensor, params, cfg: ModelConfig) -> Tensor:
    flat = ad.reshape(feat, (feat.shape[0], -1))
    h = ad.elu(ad.dense(flat, params["head.fc0.w"], params["head.fc0.b"]))
    logits = ad.dense(h, params["head.fc1.w"], params["head.fc1.b"])
    return ad.softmax(logits, axis=-1)


def nvs_forward(img: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Selection distribution over the next views, [B, K]."""
    return head(encode(img, params, cfg), params, cfg)


def decode(feat: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Feature map -> coarse occupancy volume [B, 1, D, D, D] in (0, 1)."""
    b = feat.shape[0]
    flat = ad.reshape(feat, (b, -1))
    seed = ad.elu(ad.dense(flat, params["dec.proj.w"], params["dec.proj.b"]))
    h = ad.reshape(seed, (b, cfg.decoder_seed_channels, 2, 2, 2))
    n = len(cfg.decoder_channels)
    for i in range(n):
        h = ad.tconv3d(h, params[f"dec.tconv{i}.w"]) + _bias3d(
            params[f"dec.tconv{i}.b"])
        h = ad.sigmoid(h) if i == n - 1 else ad.elu(h)
    return h


def fuse(volumes, params, cfg: ModelConfig, mode=None) -> Tensor:
    """Combine coarse volumes [each B,1,D,D,D] into one fused volume.

    context_aware: per-voxel softmax over learned score maps across views;
    simple_average: plain mean.
    """
    vols = list(volumes)
    if not vols:
        raise DimensionMismatchError("fuse: empty volume list")
    shapes = {v.shape for v in vols}
    if len(shapes) != 1:
        raise DimensionMismatchError(f"fuse: mixed shapes {shapes}")
    return fuse_stacked(ad.stack(vols, axis=0), params, cfg, mode)


def _score_net(flat: Tensor, params) -> Tensor:
    """Per-voxel fusion score for a flat stack of volumes [N, 1, D, D, D]."""
    s1 = ad.elu(ad.conv3d(flat, params["fuse.conv0.w"], stride=1)
                + _bias3d(params["fuse.conv0.b"]))
    return ad.conv3d(s1, params["fuse.conv1.w"], stride=1) + _bias3d(
        params["fuse.conv1.b"])


def fuse_stacked(st: Tensor, params, cfg: ModelConfig, mode=None) -> Tensor:
    """st is [V, B, 1, D, D, D]; result is [B, 1, D, D, D]."""
    mode = mode or cfg.fusion_mode
    v, b = st.shape[0], st.shape[1]
    if mode == "simple_average":
        return ad.tmean(st, axis=0)
    flat = ad.reshape(st, (v * b,) + st.shape[2:])
    scores = ad.reshape(_score_net(flat, params), st.shape)
    weights = ad.softmax(scores, axis=0)
    return ad.tsum(ad.mul(weights, st), axis=0)


def fusion_weights(st: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Per-view per-voxel softmax weights (diagnostic twin of fuse_stacked)."""
    v, b = st.shape[0], st.shape[1]
    flat = ad.reshape(st, (v * b,) + st.shape[2:])
    return ad.softmax(ad.reshape(_score_net(flat, params), st.shape), axis=0)


def refine(fused: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Residual correction on pre-sigmoid logits of the fused volume."""
    eps = 1e-6
    c = ad.clip(fused, eps, 1.0 - eps)
    logits = ad.log(c) - ad.log(1.0 - c)
    down = ad.elu(ad.conv3d(fused, params["ref.down.w"], stride=2)
                  + _bias3d(params["ref.down.b"]))
    up = ad.tconv3d(down, params["ref.up.w"]) + _bias3d(params["ref.up.b"])
    skip = ad.conv3d(fused, params["ref.skip.w"], stride=1) + _bias3d(
        params["ref.skip.b"])
    return ad.sigmoid(logits + up + skip)


def reconstruct_pair(base_img: Tensor, cand_img: Tensor, params,
                     cfg: ModelConfig) -> Tensor:
    """Full stage-2 pipeline for one (base, candidate) pair; [1,1,D,D,D]."""
    both = ad.stack([ad.reshape(base_img, base_img.shape[1:]),
                     ad.reshape(cand_img, cand_img.shape[1:])], axis=0)
    coarse = decode(encode(both, params, cfg), params, cfg)
    st = ad.stack([coarse[0:1], coarse[1:2]], axis=0)
    return refine(fuse_stacked(st, params, cfg), params, cfg)


def candidate_volumes(imgs: Tensor, base_idx: int, params,
                      cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """All-pairs training forward for one sample.

    imgs is [K, 3, S, S] ordered by view id. Returns the selection
    distribution p [K] conditioned on the base view, and the K refined
    candidate volumes [K, 1, D, D, D] (pair = base + candidate i).
    """
    k = imgs.shape[0]
    if k != cfg.num_views:
        raise DimensionMismatchError(
            f"expected {cfg.num_views} views, got {k}")
    feats = encode(imgs, params, cfg)
    p = ad.reshape(head(feats[base_idx:base_idx + 1], params, cfg), (k,))
    coarse = decode(feats, params, cfg)
    base_rep = coarse[np.full(k, base_idx)]
    st = ad.stack([base_rep, coarse], axis=0)
    vols = refine(fuse_stacked(st, params, cfg), params, cfg)
    if not cfg.include_base_in_candidates:
        mask = np.ones(k, dtype=p.dtype)
        mask[base_idx] = 0.0
        masked = ad.mul(p, Tensor(mask))
        p = ad.mul(masked, _reciprocal(ad.tsum(masked)))
    return p, vols


def batched_candidate_volumes(imgs: Tensor, base_ids, params,
                              cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """candidate_volumes over a whole batch in one graph.

    imgs is [B, K, 3, S, S]; base_ids has length B. Returns p [B, K] and
    refined volumes [B, K, 1, D, D, D].
    """
    b, k = imgs.shape[0], imgs.shape[1]
    if k != cfg.num_views:
        raise DimensionMismatchError(
            f"expected {cfg.num_views} views, got {k}")
    base_ids = np.asarray(base_ids, dtype=np.int64)
    if base_ids.shape != (b,):
        raise DimensionMismatchError("one base id per batch entry required")
    flat = ad.reshape(imgs, (b * k,) + imgs.shape[2:])
    feats = encode(flat, params, cfg)
    base_flat = np.arange(b) * k + base_ids
    p = head(feats[base_flat], params, cfg)
    coarse = decode(feats, params, cfg)
    rep = np.repeat(base_flat, k)
    st = ad.stack([coarse[rep], coarse], axis=0)
    if cfg.fusion_mode == "simple_average":
        fused = ad.tmean(st, axis=0)
    else:
        # The score of a volume does not depend on its fusion partner, so
        # score each decoded volume once and gather instead of re-running
        # the score net on the repeated base volumes.
        scores = _score_net(coarse, params)
        sc = ad.stack([scores[rep], scores], axis=0)
        fused = ad.tsum(ad.mul(ad.softmax(sc, axis=0), st), axis=0)
    vols = refine(fused, params, cfg)
    vols = ad.reshape(vols, (b, k) + vols.shape[1:])
    if not cfg.include_base_in_candidates:
        mask = np.ones((b, k), dtype=p.dtype)
        mask[np.arange(b), base_ids] = 0.0
        masked = ad.mul(p, Tensor(mask))
        p = ad.mul(masked, _reciprocal(ad.tsum(masked, axis=1,
                                               keepdims=True)))
    return p, vols


def _reciprocal(total: Tensor) -> Tensor:
    def backward(g):
        total._accum(-g / (total.data * total.data))

    return Tensor(1.0 / total.data, parents=(total,), backward_fn=backward)


def volume_to_grid(t: Tensor) -> VoxelGrid:
    arr = np.asarray(t.data).reshape(-1)
    d = round(arr.size ** (1 / 3))
    return VoxelGrid(d, np.clip(arr, 0.0, 1.0))


def param_count(params) -> int:
    return sum(p.size for p in params.values())


# -- checkpoint I/O ---------------------------------------------------------

_SHAPE_KEYS = ("image_size", "resolution", "num_views", "trunk_channels",
               "head_hidden", "decoder_seed_channels", "fusion_hidden",
               "refiner_hidden")


def _write_record(out, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    out.append(struct.pack("<H", len(nb)))
    out.append(nb)
    out.append(struct.pack("<B", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(arr.astype("<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("nvsm: truncated payload")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def _read_record(r: _Reader):
    (nlen,) = r.unpack("<H")
    name = r.read(nlen).decode("utf-8")
    (rank,) = r.unpack("<B")
    dims = r.unpack(f"<{rank}I")
    n = int(np.prod(dims)) if rank else 1
    if n > 1 << 28:
        raise FormatError(f"nvsm: implausible tensor size for {name}")
    data = np.frombuffer(r.read(4 * n), dtype="<f4").reshape(dims)
    return name, data


def checkpoint_to_bytes(params, cfg: ModelConfig, optimizer=None,
                        epoch: int = 0) -> bytes:
    digest = {"config": cfg.digest(), "epoch": int(epoch)}
    dj = json.dumps(digest, sort_keys=True).encode("utf-8")
    out = [NVSM_MAGIC, struct.pack("<H", NVSM_VERSION),
           struct.pack("<I", len(dj)), dj,
           struct.pack("<I", len(params))]
    for name in sorted(params):
        _write_record(out, name, params[name].data)
    if optimizer is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        kind = 1 if optimizer.kind == "adam" else 0
        out.append(struct.pack("<BQd", kind, optimizer.step_count,
                               optimizer.lr))
        if kind:
            out.append(struct.pack("<ddd", optimizer.beta1, optimizer.beta2,
                                   optimizer.eps))
            state = []
            for prefix, table in (("m", optimizer.m), ("v", optimizer.v)):
                for name in sorted(table):
                    state.append((f"{prefix}.{name}", table[name]))
            out.append(struct.pack("<I", len(state)))
            tmp = []
            for name, arr in state:
                _write_record(tmp, name, arr)
            out.extend(tmp)
        else:
            out.append(struct.pack("<I", 0))
    return b"".join(out)


def checkpoint_from_bytes(blob: bytes, cfg: ModelConfig | None = None):
    """Returns (params, cfg, optimizer_state_or_None, epoch).

    optimizer_state is a dict ready for restore_optimizer().
    """
    r = _Reader(blob)
    if r.read(4) != NVSM_MAGIC:
        raise FormatError("nvsm: bad magic")
    (version,) = r.unpack("<H")
    if version != NVSM_VERSION:
        raise FormatError(f"nvsm: unsupported version {version}")
    (dlen,) = r.unpack("<I")
    try:
        digest = json.loads(r.read(dlen).decode("utf-8"))
        stored_cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in digest["config"].items()})
        epoch = int(digest["epoch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"nvsm: bad config digest: {exc}") from exc
    if cfg is not None:
        for key in _SHAPE_KEYS:
            if getattr(cfg, key) != getattr(stored_cfg, key):
                raise CheckpointMismatchError(
                    f"nvsm: checkpoint {key}={getattr(stored_cfg, key)} "
                    f"!= config {key}={getattr(cfg, key)}")
    else:
        cfg = stored_cfg
    (n,) = r.unpack("<I")
    expected = init_params(cfg, 0)
    params = {}
    for _ in range(n):
        name, data = _read_record(r)
        params[name] = Tensor(data.astype(cfg.np_dtype), requires_grad=True)
    if set(params) != set(expected):
        raise CheckpointMismatchError(
            "nvsm: parameter name set does not match config")
    for name, ref in expected.items():
        if params[name].shape != ref.shape:
            raise CheckpointMismatchError(
                f"nvsm: {name} has shape {params[name].shape}, "
                f"expected {ref.shape}")
    (flag,) = r.unpack("<B")
    opt_state = None
    if flag == 1:
        kind, step, lr = r.unpack("<BQd")
        opt_state = {"kind": "adam" if kind else "sgd", "step": step, "lr": lr}
        if kind:
            beta1, beta2, eps = r.unpack("<ddd")
            opt_state.update(beta1=beta1, beta2=beta2, eps=eps)
        (ns,) = r.unpack("<I")
        moments = {}
        for _ in range(ns):
            name, data = _read_record(r)
            moments[name] = data.astype(cfg.np_dtype)
        opt_state["moments"] = moments
    elif flag != 0:
        raise FormatError(f"nvsm: bad optimizer flag {flag}")
    if r.pos != len(blob):
        raise FormatError("nvsm: trailing bytes")
    return params, cfg, opt_state, epoch


def restore_optimizer(state, params):
    from .autodiff import Adam, SGD
    if state["kind"] == "sgd":
        opt = SGD(params, state["lr"])
        opt.step_count = state["step"]
        return opt
    opt = Adam(params, state["lr"], state["beta1"], state["beta2"],
               state["eps"])
    opt.step_count = state["step"]
    for name in params:
        opt.m[name] = state["moments"][f"m.{name}"]
        opt.v[name] = state["moments"][f"v.{name}"]
    return opt


def save_checkpoint(path, params, cfg, optimizer=None, epoch=0):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(params, cfg, optimizer, epoch))


def load_checkpoint(path, cfg=None):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), cfg)
