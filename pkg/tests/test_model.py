"""Model configuration, forward paths, fusion, refinement, checkpoint I/O."""

import numpy as np
import pytest

from nvs3d import autodiff as ad
from nvs3d import model as mdl
from nvs3d.autodiff import Adam, Tensor
from nvs3d.errors import (CheckpointMismatchError, ConfigError,
                          DimensionMismatchError, FormatError)
from nvs3d.model import (ModelConfig, batched_candidate_volumes,
                         candidate_volumes, checkpoint_from_bytes,
                         checkpoint_to_bytes, decode, encode, fuse,
                         fusion_weights, init_params, load_checkpoint,
                         nvs_forward, param_count, refine, restore_optimizer,
                         save_checkpoint, volume_to_grid)

RNG = np.random.default_rng(31)

SMALL = ModelConfig(image_size=16, resolution=8, num_views=4,
                    trunk_channels=(4, 8, 8), head_hidden=16,
                    decoder_seed_channels=16, fusion_hidden=4,
                    refiner_hidden=4)


def rand_images(cfg, n):
    return Tensor(RNG.uniform(0, 1, size=(n, 3, cfg.image_size,
                                          cfg.image_size)).astype(np.float32))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=20)          # not divisible by 8
    with pytest.raises(ConfigError):
        ModelConfig(resolution=12)          # not a power of two
    with pytest.raises(ConfigError):
        ModelConfig(resolution=128)
    with pytest.raises(ConfigError):
        ModelConfig(fusion_mode="mean")
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16")


def test_decoder_channel_plan():
    assert ModelConfig().decoder_channels == (32, 16, 1)
    assert ModelConfig(resolution=8, decoder_seed_channels=16,
                       image_size=16).decoder_channels == (8, 1)


def test_default_param_count_is_stable():
    assert param_count(init_params(ModelConfig(), 0)) == 623146


def test_init_is_deterministic_and_seed_sensitive():
    a = init_params(SMALL, 5)
    b = init_params(SMALL, 5)
    c = init_params(SMALL, 6)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)


def test_encode_and_head_shapes():
    params = init_params(SMALL, 0)
    feat = encode(rand_images(SMALL, 2), params, SMALL)
    assert feat.shape == (2,) + SMALL.encoder_shape
    p = nvs_forward(rand_images(SMALL, 2), params, SMALL)
    assert p.shape == (2, 4)
    assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p.data > 0)
    with pytest.raises(DimensionMismatchError):
        encode(Tensor(np.zeros((1, 3, 8, 8), np.float32)), params, SMALL)


def test_decode_output_is_probability_volume():
    params = init_params(SMALL, 0)
    feat = encode(rand_images(SMALL, 2), params, SMALL)
    vol = decode(feat, params, SMALL)
    assert vol.shape == (2, 1, 8, 8, 8)
    assert np.all((vol.data > 0) & (vol.data < 1))


def test_fusion_weights_normalize_across_views():
    params = init_params(SMALL, 0)
    vols = [Tensor(RNG.uniform(0.1, 0.9, size=(2, 1, 8, 8, 8))
                   .astype(np.float32)) for _ in range(3)]
    st = ad.stack(vols, axis=0)
    w = fusion_weights(st, params, SMALL)
    assert w.shape == (3, 2, 1, 8, 8, 8)
    assert np.allclose(w.data.sum(axis=0), 1.0, atol=1e-6)


def test_fuse_simple_average_is_mean():
    params = init_params(SMALL, 0)
    vols = [Tensor(RNG.uniform(0.1, 0.9, size=(1, 1, 8, 8, 8))
                   .astype(np.float32)) for _ in range(3)]
    fused = fuse(vols, params, SMALL, mode="simple_average")
    want = np.mean([v.data for v in vols], axis=0)
    assert np.allclose(fused.data, want, atol=1e-7)


def test_fuse_context_aware_is_convex_combination():
    params = init_params(SMALL, 0)
    vols = [Tensor(RNG.uniform(0.1, 0.9, size=(1, 1, 8, 8, 8))
                   .astype(np.float32)) for _ in range(3)]
    fused = fuse(vols, params, SMALL)
    lo = np.min([v.data for v in vols], axis=0)
    hi = np.max([v.data for v in vols], axis=0)
    assert np.all(fused.data >= lo - 1e-6)
    assert np.all(fused.data <= hi + 1e-6)
    with pytest.raises(DimensionMismatchError):
        fuse([], params, SMALL)


def test_refine_outputs_probabilities_near_identity_at_zero_residual():
    params = init_params(SMALL, 0)
    fused = Tensor(RNG.uniform(0.2, 0.8, size=(2, 1, 8, 8, 8))
                   .astype(np.float32))
    out = refine(fused, params, SMALL)
    assert out.shape == fused.shape
    assert np.all((out.data > 0) & (out.data < 1))
    # with zeroed refiner weights the residual path vanishes exactly
    zeroed = dict(params)
    for name in ("ref.down.w", "ref.down.b", "ref.up.w", "ref.up.b",
                 "ref.skip.w", "ref.skip.b"):
        zeroed[name] = Tensor(np.zeros_like(params[name].data))
    ident = refine(fused, zeroed, SMALL)
    assert np.allclose(ident.data, fused.data, atol=1e-5)


def test_candidate_volumes_shapes_and_simplex():
    params = init_params(SMALL, 0)
    imgs = rand_images(SMALL, 4)
    p, vols = candidate_volumes(imgs, 1, params, SMALL)
    assert p.shape == (4,)
    assert np.isclose(p.data.sum(), 1.0, atol=1e-6)
    assert vols.shape == (4, 1, 8, 8, 8)


def test_candidate_volumes_base_exclusion():
    cfg = ModelConfig(image_size=16, resolution=8, num_views=4,
                      trunk_channels=(4, 8, 8), head_hidden=16,
                      decoder_seed_channels=16, fusion_hidden=4,
                      refiner_hidden=4, include_base_in_candidates=False)
    params = init_params(cfg, 0)
    p, _ = candidate_volumes(rand_images(cfg, 4), 2, params, cfg)
    assert p.data[2] == 0.0
    assert np.isclose(p.data.sum(), 1.0, atol=1e-6)


def test_batched_matches_per_sample_path():
    params = init_params(SMALL, 1)
    imgs_a, imgs_b = rand_images(SMALL, 4), rand_images(SMALL, 4)
    pa, va = candidate_volumes(imgs_a, 0, params, SMALL)
    pb, vb = candidate_volumes(imgs_b, 3, params, SMALL)
    batch = Tensor(np.stack([imgs_a.data, imgs_b.data]))
    p, v = batched_candidate_volumes(batch, [0, 3], params, SMALL)
    assert np.allclose(p.data[0], pa.data, atol=1e-6)
    assert np.allclose(p.data[1], pb.data, atol=1e-6)
    assert np.allclose(v.data[0], va.data, atol=1e-5)
    assert np.allclose(v.data[1], vb.data, atol=1e-5)
    with pytest.raises(DimensionMismatchError):
        batched_candidate_volumes(batch, [0], params, SMALL)
    with pytest.raises(DimensionMismatchError):
        candidate_volumes(rand_images(SMALL, 3), 0, params, SMALL)


def test_volume_to_grid_clips_and_shapes():
    t = Tensor(RNG.uniform(0, 1, size=(1, 1, 8, 8, 8)))
    g = volume_to_grid(t)
    assert g.resolution == 8
    assert np.allclose(g.values.reshape(-1), t.data.reshape(-1), atol=1e-7)


def test_checkpoint_roundtrip_bytes_identical():
    params = init_params(SMALL, 2)
    blob = checkpoint_to_bytes(params, SMALL, epoch=3)
    got, cfg2, opt_state, epoch = checkpoint_from_bytes(blob, SMALL)
    assert epoch == 3 and opt_state is None
    for name in params:
        assert np.array_equal(got[name].data, params[name].data)
    # serialization is canonical: same params -> same bytes
    assert checkpoint_to_bytes(got, SMALL, epoch=3) == blob


def test_checkpoint_roundtrip_with_optimizer_state():
    params = init_params(SMALL, 2)
    opt = Adam(params, lr=1e-3)
    for p in params.values():
        p.grad = RNG.standard_normal(p.shape).astype(p.dtype)
    opt.step()
    blob = checkpoint_to_bytes(params, SMALL, optimizer=opt, epoch=0)
    got, _, opt_state, _ = checkpoint_from_bytes(blob, SMALL)
    opt2 = restore_optimizer(opt_state, got)
    assert opt2.step_count == opt.step_count
    assert np.isclose(opt2.lr, opt.lr)
    for name in params:
        assert np.array_equal(opt2.m[name], opt.m[name])
        assert np.array_equal(opt2.v[name], opt.v[name])


def test_checkpoint_file_roundtrip(tmp_path):
    params = init_params(SMALL, 7)
    path = tmp_path / "m.nvsm"
    save_checkpoint(path, params, SMALL, epoch=1)
    got, cfg, _, epoch = load_checkpoint(path, SMALL)
    assert epoch == 1
    assert param_count(got) == param_count(params)


def test_checkpoint_rejects_config_mismatch():
    params = init_params(SMALL, 0)
    blob = checkpoint_to_bytes(params, SMALL)
    other = ModelConfig(image_size=16, resolution=8, num_views=5,
                        trunk_channels=(4, 8, 8), head_hidden=16,
                        decoder_seed_channels=16, fusion_hidden=4,
                        refiner_hidden=4)
    with pytest.raises(CheckpointMismatchError):
        checkpoint_from_bytes(blob, other)


def test_checkpoint_rejects_malformed():
    params = init_params(SMALL, 0)
    blob = checkpoint_to_bytes(params, SMALL)
    with pytest.raises(FormatError):
        checkpoint_from_bytes(b"")
    with pytest.raises(FormatError):
        checkpoint_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(blob[:len(blob) // 2])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(blob + b"\x00")
    bad_version = blob[:4] + b"\xff\xff" + blob[6:]
    with pytest.raises(FormatError):
        checkpoint_from_bytes(bad_version)
