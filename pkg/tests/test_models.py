"""Codecs and the three predictors: round-trips, shape/null-context
contracts, gradient paths, overfit sanity, and checkpoint round-trips."""

import numpy as np
import pytest

from voxelworld import flow, grad
from voxelworld.grad import AdamW, Tensor
from voxelworld.geometry import CameraState, plucker_map
from voxelworld.models import (
    CameraPredictor,
    ModelConfig,
    ModelError,
    PixelCodec,
    PixelContext,
    PixelDenoiser,
    VoxelCodec,
    WorldContext,
    WorldDenoiser,
    load_model,
    save_model,
    tau_features,
    velocity_scale,
)
from voxelworld.worldsim import PALETTE_SIZE

CFG = ModelConfig(S=8, m=4, l=4, h=8, w=8, k_world=2, k_camera=2, k_pixel=2,
                  hidden=32, cond_dim=32, c_w=8, seed=0)


def rand_labels(rng, S=8):
    return rng.integers(0, PALETTE_SIZE, size=(S, S, S)).astype(np.uint16)


def rand_camera(rng):
    return CameraState.from_euler(rng.uniform(3, 5, size=3),
                                  rng.uniform(-1, 1), rng.uniform(-3, 3), 1.2)


# --------------------------------------------------------------------------
# codecs


def test_voxel_codec_round_trip():
    codec = VoxelCodec(4)
    rng = np.random.default_rng(0)
    labels = rand_labels(rng)
    assert np.array_equal(codec.decode(codec.encode(labels)), labels)


def test_voxel_codec_all_air():
    codec = VoxelCodec(4)
    labels = np.zeros((8, 8, 8), dtype=np.uint16)
    feats = codec.encode(labels)
    assert np.allclose(feats, codec.table[0])


def test_voxel_codec_min_gap():
    codec = VoxelCodec(4)
    t = codec.table
    gaps = [np.linalg.norm(t[i] - t[j])
            for i in range(len(t)) for j in range(i + 1, len(t))]
    assert min(gaps) > 0.5


def test_voxel_codec_noise_robust_decode():
    codec = VoxelCodec(4)
    rng = np.random.default_rng(1)
    labels = rand_labels(rng)
    feats = codec.encode(labels)
    t = codec.table
    min_gap = min(np.linalg.norm(t[i] - t[j])
                  for i in range(len(t)) for j in range(i + 1, len(t)))
    # L2 ball of radius min_gap/2 never changes the nearest row; an
    # inf-ball inside it has radius min_gap/(2*sqrt(m))
    radius = 0.9 * min_gap / (2 * np.sqrt(t.shape[1]))
    noise = rng.uniform(-radius, radius, size=feats.shape).astype(np.float32)
    assert np.array_equal(codec.decode(feats + noise), labels)


def test_voxel_codec_deterministic_per_seed():
    assert np.array_equal(VoxelCodec(4, seed=1234).table,
                          VoxelCodec(4, seed=1234).table)


def test_pixel_codec_identity():
    codec = PixelCodec()
    rng = np.random.default_rng(2)
    o = rng.uniform(0, 1, size=(8, 8, 3)).astype(np.float32)
    assert np.array_equal(codec.decode(codec.encode(o)), o)
    assert np.all(codec.decode(np.float32([[[2.0, -1.0, 0.5]]])) <= 1.0)


# --------------------------------------------------------------------------
# shared pieces


def test_tau_features_floor():
    f = tau_features(np.array([0.01, 0.5]))
    assert f.shape == (2, 4)
    assert f[0, 2] == pytest.approx(1.0 / 0.05)   # reciprocal floored
    assert f[1, 2] == pytest.approx(2.0)


def test_velocity_scale_matches_linear_path():
    # v = (x0 - x_tau)/tau on the linear path for tau above the floor
    s = velocity_scale(np.array([0.5]))
    assert s[0] == pytest.approx(2.0)


# --------------------------------------------------------------------------
# world denoiser


def full_world_ctx(rng, cfg=CFG, k=None):
    k = cfg.k_world if k is None else k
    codec = VoxelCodec(cfg.m)
    world = np.stack([codec.encode(rand_labels(rng, cfg.S)) for _ in range(k)])
    cams = np.stack([rand_camera(rng).to_vector() for _ in range(k + 1)])
    pixels = rng.uniform(0, 1, size=(k + 1, cfg.h, cfg.w, 3)).astype(np.float32)
    pluckers = np.stack([
        plucker_map(CameraState.from_vector(c), cfg.h, cfg.w).astype(np.float32)
        for c in cams])
    actions = np.zeros((k + 1, 23), dtype=np.float32)
    actions[:, 9] = actions[:, 18] = 1.0
    return WorldContext(world=world[None], actions=actions[None],
                        cameras=cams[None], pixels=pixels[None],
                        pluckers=pluckers[None])


def test_world_forward_shape():
    model = WorldDenoiser(CFG)
    rng = np.random.default_rng(3)
    ctx = full_world_ctx(rng)
    w_tau = rng.normal(size=(1, 8, 8, 8, 4)).astype(np.float32)
    out = model.forward(w_tau, np.array([0.5]), ctx)
    assert out.data.shape == (1, 8, 8, 8, 4)
    assert np.all(np.isfinite(out.data))


def test_world_empty_context_mode():
    model = WorldDenoiser(CFG)
    rng = np.random.default_rng(4)
    w_tau = rng.normal(size=(1, 8, 8, 8, 4)).astype(np.float32)
    ctx = WorldContext(world=None, actions=None, cameras=None,
                       pixels=None, pluckers=None)
    out = model.forward(w_tau, np.array([0.9]), ctx)
    assert out.data.shape == (1, 8, 8, 8, 4)
    assert np.all(np.isfinite(out.data))


@pytest.mark.parametrize("prefix", [0, 1, 2])
def test_world_context_prefix_lengths(prefix):
    model = WorldDenoiser(CFG)
    rng = np.random.default_rng(5)
    full = full_world_ctx(rng)
    ctx = WorldContext(
        world=full.world[:, -prefix:] if prefix else None,
        actions=full.actions[:, -(prefix + 1):],
        cameras=full.cameras[:, -(prefix + 1):],
        pixels=full.pixels[:, -prefix:] if prefix else None,
        pluckers=full.pluckers[:, -prefix:] if prefix else None)
    w_tau = rng.normal(size=(1, 8, 8, 8, 4)).astype(np.float32)
    out = model.forward(w_tau, np.array([0.5]), ctx)
    assert np.all(np.isfinite(out.data))


def test_world_overfit_single_transition():
    rng = np.random.default_rng(6)
    model = WorldDenoiser(CFG)
    codec = VoxelCodec(CFG.m)
    ctx = full_world_ctx(rng)
    x0 = codec.encode(rand_labels(rng, CFG.S))[None]
    # a single fixed transition: one noise draw, one noise level
    tau = 0.5
    x1 = rng.standard_normal(x0.shape).astype(np.float32)
    xt = flow.noise_sample(x0, x1, tau)
    opt = AdamW(model.params(), lr=3e-3)
    losses = []
    for step in range(200):
        v = model.forward(xt, np.array([tau]), ctx)
        loss = flow.cfm_loss(v, x0, x1)
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    assert np.mean(losses[-10:]) < 0.1 * np.mean(losses[:10])


def test_embed_action_camera_zero_inputs_bias_only():
    model = WorldDenoiser(CFG)
    k = CFG.k_world + 1
    a = np.zeros((2, k, 23), dtype=np.float32)
    c = np.zeros((2, k, 10), dtype=np.float32)
    out = model.embed_action_camera(a, c, 2)
    assert np.array_equal(out.data[0], out.data[1])   # batch-constant


def test_embed_action_camera_batch_permutation():
    model = WorldDenoiser(CFG)
    rng = np.random.default_rng(7)
    k = CFG.k_world + 1
    a = rng.uniform(0, 1, size=(2, k, 23)).astype(np.float32)
    c = rng.uniform(-1, 1, size=(2, k, 10)).astype(np.float32)
    fwd = model.embed_action_camera(a, c, 2).data
    rev = model.embed_action_camera(a[::-1].copy(), c[::-1].copy(), 2).data
    assert np.allclose(fwd, rev[::-1])


def test_embed_action_camera_gradient_fd():
    model = WorldDenoiser(CFG)
    rng = np.random.default_rng(8)
    k = CFG.k_world + 1
    a = rng.uniform(0, 1, size=(1, k, 23)).astype(np.float32)
    c = rng.uniform(-1, 1, size=(1, k, 10)).astype(np.float32)
    w = model.ac_embed.w

    def loss_value():
        return grad.sum_of_squares(model.embed_action_camera(a, c, 1)).item()

    base = grad.sum_of_squares(model.embed_action_camera(a, c, 1))
    base.backward()
    g = w.grad.copy()
    eps = 1e-2
    idx = (3, 5)
    orig = w.data[idx]
    w.data[idx] = orig + eps
    hi = loss_value()
    w.data[idx] = orig - eps
    lo = loss_value()
    w.data[idx] = orig
    fd = (hi - lo) / (2 * eps)
    assert abs(g[idx] - fd) / max(abs(fd), 1e-3) < 1e-3


# --------------------------------------------------------------------------
# camera predictor


def test_camera_head_dimensionality():
    model = CameraPredictor(CFG, VoxelCodec(CFG.m))
    rng = np.random.default_rng(9)
    k = CFG.k_camera
    cams = np.stack([rand_camera(rng).to_vector() for _ in range(k)])[None]
    worlds = np.stack([rand_labels(rng, CFG.S) for _ in range(k + 1)])[None]
    actions = np.zeros((1, k + 1, 23), dtype=np.float32)
    actions[:, :, 9] = actions[:, :, 18] = 1.0
    out = model.forward(cams.astype(np.float32), model.crop_inner(worlds),
                        actions, 1)
    assert out.data.shape == (1, 6)
    r = model.predict(cams.astype(np.float32), model.crop_inner(worlds), actions)
    assert r.pos.shape == (3,)


def test_camera_empty_windows_finite():
    model = CameraPredictor(CFG, VoxelCodec(CFG.m))
    out = model.forward(None, None, None, 2)
    assert out.data.shape == (2, 6)
    assert np.all(np.isfinite(out.data))


# --------------------------------------------------------------------------
# pixel denoiser


def pixel_ctx(rng, cfg=CFG, with_w2d=True):
    z = cfg.l * (cfg.m + 1)
    k = cfg.k_pixel
    w2d = rng.normal(size=(1, cfg.h, cfg.w, z)).astype(np.float32)
    w2d_past = rng.normal(size=(1, k, cfg.h, cfg.w, z)).astype(np.float32)
    actions = np.zeros((1, k + 1, 23), dtype=np.float32)
    actions[:, :, 9] = actions[:, :, 18] = 1.0
    pixels = rng.uniform(0, 1, size=(1, k, cfg.h, cfg.w, 3)).astype(np.float32)
    return PixelContext(w2d=w2d if with_w2d else None,
                        w2d_past=w2d_past if with_w2d else None,
                        actions=actions, pixels=pixels)


def test_pixel_forward_shape():
    model = PixelDenoiser(CFG)
    rng = np.random.default_rng(10)
    ctx = pixel_ctx(rng)
    o_tau = rng.normal(size=(1, CFG.h, CFG.w, 3)).astype(np.float32)
    out = model.forward(o_tau, np.array([0.4]), ctx)
    assert out.data.shape == (1, CFG.h, CFG.w, 3)


def test_pixel_requires_wide_embedding():
    with pytest.raises(ModelError):
        PixelDenoiser(ModelConfig(c_w=3))


def test_pixel_misaligned_projection():
    model = PixelDenoiser(CFG)
    rng = np.random.default_rng(11)
    ctx = pixel_ctx(rng)
    ctx.w2d = ctx.w2d[:, :, :, :-1]     # wrong channel count
    o_tau = rng.normal(size=(1, CFG.h, CFG.w, 3)).astype(np.float32)
    with pytest.raises(ModelError, match="misaligned-projection"):
        model.forward(o_tau, np.array([0.4]), ctx)


def test_pixel_missing_w2d_rejected():
    model = PixelDenoiser(CFG)
    rng = np.random.default_rng(12)
    ctx = pixel_ctx(rng, with_w2d=False)
    o_tau = rng.normal(size=(1, CFG.h, CFG.w, 3)).astype(np.float32)
    with pytest.raises(ModelError, match="misaligned-projection"):
        model.forward(o_tau, np.array([0.4]), ctx)


def test_pixel_overfit_single_frame():
    rng = np.random.default_rng(13)
    model = PixelDenoiser(CFG)
    ctx = pixel_ctx(rng)
    x0 = rng.uniform(0, 1, size=(1, CFG.h, CFG.w, 3)).astype(np.float32)
    tau = 0.5
    x1 = rng.standard_normal(x0.shape).astype(np.float32)
    xt = flow.noise_sample(x0, x1, tau)
    opt = AdamW(model.params(), lr=3e-3)
    losses = []
    for step in range(200):
        loss = flow.cfm_loss(model.forward(xt, np.array([tau]), ctx), x0, x1)
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    assert np.mean(losses[-10:]) < 0.1 * np.mean(losses[:10])


# --------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("kind", ["world", "camera", "pixel"])
def test_checkpoint_round_trip(tmp_path, kind):
    codec = VoxelCodec(CFG.m)
    model = {
        "world": lambda: WorldDenoiser(CFG),
        "camera": lambda: CameraPredictor(CFG, codec),
        "pixel": lambda: PixelDenoiser(CFG),
    }[kind]()
    out = save_model(model, tmp_path / kind)
    again = load_model(out, codec)
    assert again.kind == kind
    for (na, ta), (nb, tb) in zip(model.named_params(), again.named_params()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)


def test_checkpoint_rejects_wrong_shapes(tmp_path):
    model = WorldDenoiser(CFG)
    out = save_model(model, tmp_path / "w")
    import json
    meta = json.loads((out / "model.json").read_text())
    meta["hidden"] = 128
    (out / "model.json").write_text(json.dumps(meta))
    with pytest.raises(ModelError):
        load_model(out)
