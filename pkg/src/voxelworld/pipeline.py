"""Training loops for the three predictors and the autoregressive rollout.

The rollout keeps aligned append-only buffers of actions, cameras, pixel
frames/latents, world frames/latents, and fused projections. Each step runs
world generation, then the camera, then projection, then pixel generation,
so the camera always sees the just-generated world frame. Context latents
entering a denoiser at inference are noised at the fixed tau_ctx levels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import flow, grad, projection, worldsim
from .geometry import CameraState, apply_residual, plucker_map, residual_between
from .grad import AdamW, Tensor
from .models import (
    CameraPredictor,
    ModelConfig,
    PixelCodec,
    PixelContext,
    PixelDenoiser,
    VoxelCodec,
    WorldContext,
    WorldDenoiser,
    load_model,
    save_model,
)
from .projection import FeatureGrid, fuse, project
from .worldsim import AIR, NO_OP, PALETTE_SIZE, Trajectory, load_dataset

P0_DROP = 0.2              # world-context dropout rate (trains the w0 mode)
CODEC_SEED = 1234          # every component shares one frozen voxel codec


class PipelineError(ValueError):
    pass


# --------------------------------------------------------------------------
# rollout state


@dataclass
class EpisodeInit:
    o_init: np.ndarray                    # (h, w, 3) float32
    c_init: CameraState                   # frame-local camera
    w_init: np.ndarray | None = None      # (S, S, S) uint16


@dataclass
class RolloutBuffers:
    """Aligned per-step records; entry t is fully consistent (W2D_t projects
    W_t through C_t)."""

    actions: list = field(default_factory=list)        # (23,) uint8
    cameras: list = field(default_factory=list)        # CameraState
    frames: list = field(default_factory=list)         # (h, w, 3) f32
    frame_latents: list = field(default_factory=list)  # (h, w, 3) f32
    worlds: list = field(default_factory=list)         # (S, S, S) uint16
    world_latents: list = field(default_factory=list)  # (S, S, S, m) f32
    w2d: list = field(default_factory=list)            # (h, w, l*(m+1)) f32
    ctx_noise_log: list = field(default_factory=list)  # (step, tau_w, tau_p)
    edit_log: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return len(self.actions)

    def check_aligned(self):
        n = self.step
        for name in ("cameras", "frames", "frame_latents", "worlds",
                     "world_latents", "w2d"):
            if len(getattr(self, name)) != n:
                raise PipelineError(f"buffer {name} out of alignment")


@dataclass
class RolloutConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    flow_steps: int = flow.DEFAULT_STEPS
    flow_eta: float = flow.DEFAULT_ETA
    tau_ctx_world: float = flow.TAU_CTX_WORLD
    tau_ctx_pixel: float = flow.TAU_CTX_PIXEL
    seed: int = 0


# --------------------------------------------------------------------------
# learned-model adapters (oracle counterparts live in the evaluate module)


class LearnedWorld:
    def __init__(self, model: WorldDenoiser, schedule: flow.NoiseSchedule):
        self.model = model
        self.schedule = schedule

    def generate_world(self, ctx: WorldContext, rng: np.random.Generator) -> np.ndarray:
        cfg = self.model.cfg
        x1 = rng.standard_normal((cfg.S, cfg.S, cfg.S, cfg.m)).astype(np.float32)

        def vel(x, tau, _):
            with grad.no_grad():
                return self.model.forward(x[None], np.array([tau]), ctx).data[0]

        return flow.sample(vel, self.schedule, x1)


class LearnedCamera:
    def __init__(self, model: CameraPredictor):
        self.model = model

    def next_camera(self, prev: CameraState, cam_window: np.ndarray,
                    world_window: np.ndarray, action_window: np.ndarray) -> CameraState:
        crops = self.model.crop_inner(world_window[None])
        residual = self.model.predict(
            cam_window[None].astype(np.float32), crops,
            action_window[None].astype(np.float32))
        cam = apply_residual(prev, residual)
        # re-anchor: frame-local positions live in [S/2, S/2 + 1)
        half = self.model.cfg.S // 2
        cam.pos = (cam.pos - half) % 1.0 + half
        return cam


class LearnedPixel:
    def __init__(self, model: PixelDenoiser, schedule: flow.NoiseSchedule):
        self.model = model
        self.schedule = schedule

    def generate_pixel(self, ctx: PixelContext, camera: CameraState,
                 rng: np.random.Generator) -> np.ndarray:
        cfg = self.model.cfg
        x1 = rng.standard_normal((cfg.h, cfg.w, 3)).astype(np.float32)

        def vel(x, tau, _):
            with grad.no_grad():
                return self.model.forward(x[None], np.array([tau]), ctx).data[0]

        return flow.sample(vel, self.schedule, x1)


@dataclass
class ModelBundle:
    """World/camera/pixel generators plus the shared codecs. The generator
    objects are duck-typed; oracle stand-ins implement the same methods."""

    world: object
    camera: object
    pixel: object
    codec: VoxelCodec
    pixel_codec: PixelCodec

    @classmethod
    def learned(cls, world: WorldDenoiser, camera: CameraPredictor,
                pixel: PixelDenoiser, cfg: RolloutConfig) -> "ModelBundle":
        schedule = flow.make_schedule(cfg.flow_steps, cfg.flow_eta)
        return cls(
            world=LearnedWorld(world, schedule),
            camera=LearnedCamera(camera),
            pixel=LearnedPixel(pixel, schedule),
            codec=VoxelCodec(cfg.model.m, seed=CODEC_SEED),
            pixel_codec=PixelCodec(),
        )


# --------------------------------------------------------------------------
# window assembly


def _window(seq: list, k: int, end: int) -> np.ndarray | None:
    """Last k entries of seq[:end] stacked with a leading slot axis, or None."""
    lo = max(0, end - k)
    if lo >= end:
        return None
    return np.stack(seq[lo:end])[None].astype(np.float32)


def _project_frame(labels: np.ndarray, camera: CameraState,
                   codec: VoxelCodec, cfg: ModelConfig) -> np.ndarray:
    fg = FeatureGrid(features=codec.encode(labels), occupancy=labels != AIR)
    stack = project(camera, fg, cfg.h, cfg.w, cfg.l)
    return fuse(stack)


def _world_ctx(buffers: RolloutBuffers, a_t: np.ndarray, cfg: RolloutConfig,
               rng: np.random.Generator, drop_world: bool = False) -> WorldContext:
    mc = cfg.model
    t = buffers.step
    k = mc.k_world

    world = None
    if not drop_world:
        world = _window(buffers.world_latents, k, t)
        if world is not None:
            world = flow.noise_context(world, cfg.tau_ctx_world, rng)

    act_list = buffers.actions[max(0, t - k):t] + [a_t]
    actions = np.stack(act_list)[None].astype(np.float32)
    cam_win = _window([c.to_vector() for c in buffers.cameras], k + 1, t)

    pixels = _window(buffers.frame_latents, k + 1, t)
    pluckers = None
    if pixels is not None:
        pixels = flow.noise_context(pixels, cfg.tau_ctx_pixel, rng)
        cams = buffers.cameras[max(0, t - (k + 1)):t]
        pluckers = np.stack([plucker_map(c, mc.h, mc.w) for c in cams])[None]
        pluckers = pluckers.astype(np.float32)

    buffers.ctx_noise_log.append((t, cfg.tau_ctx_world, cfg.tau_ctx_pixel))
    return WorldContext(world=world, actions=actions, cameras=cam_win,
                        pixels=pixels, pluckers=pluckers)


def _pixel_ctx(buffers: RolloutBuffers, w2d_t: np.ndarray, a_t: np.ndarray,
               cfg: RolloutConfig, rng: np.random.Generator) -> PixelContext:
    k = cfg.model.k_pixel
    t = buffers.step
    pixels = _window(buffers.frame_latents, k, t)
    if pixels is not None:
        pixels = flow.noise_context(pixels, cfg.tau_ctx_pixel, rng)
    act_list = buffers.actions[max(0, t - k):t] + [a_t]
    actions = np.stack(act_list)[None].astype(np.float32)
    w2d_past = _window(buffers.w2d, k, t)
    return PixelContext(w2d=w2d_t[None], w2d_past=w2d_past,
                        actions=actions, pixels=pixels)


# --------------------------------------------------------------------------
# rollout


def _append_step(buffers: RolloutBuffers, a, camera, o_lat, o_frame,
                 w_labels, w_lat, w2d):
    buffers.actions.append(np.asarray(a, dtype=np.uint8).copy())
    buffers.cameras.append(camera)
    buffers.frames.append(np.asarray(o_frame, dtype=np.float32))
    buffers.frame_latents.append(np.asarray(o_lat, dtype=np.float32))
    buffers.worlds.append(np.asarray(w_labels, dtype=np.uint16))
    buffers.world_latents.append(np.asarray(w_lat, dtype=np.float32))
    buffers.w2d.append(np.asarray(w2d, dtype=np.float32))
    buffers.check_aligned()


def rollout_init(init: EpisodeInit, bundle: ModelBundle, cfg: RolloutConfig,
                 rng: np.random.Generator) -> RolloutBuffers:
    """Step-0 initialisation, always under a NO-OP action.

    Without w_init, the world frame is sampled conditioned on the initial
    observation and the observation is then regenerated from it; with w_init
    the provided frame is encoded and o_init is used directly.
    """
    mc = cfg.model
    buffers = RolloutBuffers()
    a0 = NO_OP.copy()
    c0 = init.c_init
    o0_lat = bundle.pixel_codec.encode(init.o_init)
    if o0_lat.shape != (mc.h, mc.w, 3):
        raise PipelineError("init frame shape mismatch")

    if init.w_init is not None:
        if init.w_init.shape != (mc.S, mc.S, mc.S):
            raise PipelineError("init world shape mismatch")
        w0 = np.asarray(init.w_init, dtype=np.uint16).copy()
        w0_lat = bundle.codec.encode(w0)
        w2d0 = _project_frame(w0, c0, bundle.codec, mc)
        o0_frame = np.asarray(init.o_init, dtype=np.float32).copy()
        _append_step(buffers, a0, c0, o0_lat, o0_frame, w0, w0_lat, w2d0)
        return buffers

    pluck0 = plucker_map(c0, mc.h, mc.w).astype(np.float32)
    ctx = WorldContext(
        world=None,
        actions=a0[None, None].astype(np.float32),
        cameras=c0.to_vector()[None, None].astype(np.float32),
        pixels=flow.noise_context(o0_lat[None, None], cfg.tau_ctx_pixel, rng),
        pluckers=pluck0[None, None],
    )
    buffers.ctx_noise_log.append((0, cfg.tau_ctx_world, cfg.tau_ctx_pixel))
    w0_lat = bundle.world.generate_world(ctx, rng)
    w0 = bundle.codec.decode(w0_lat)
    w2d0 = _project_frame(w0, c0, bundle.codec, mc)
    pctx = PixelContext(w2d=w2d0[None], w2d_past=None,
                        actions=a0[None, None].astype(np.float32), pixels=None)
    o0_lat = bundle.pixel.generate_pixel(pctx, c0, rng)
    o0_frame = bundle.pixel_codec.decode(o0_lat)
    _append_step(buffers, a0, c0, o0_lat, o0_frame, w0, w0_lat, w2d0)
    return buffers


def rollout_step(buffers: RolloutBuffers, a_t: np.ndarray, bundle: ModelBundle,
                 cfg: RolloutConfig, rng: np.random.Generator) -> None:
    """One autoregressive step: world, camera, projection, pixels."""
    if buffers.step < 1:
        raise PipelineError("rollout not initialised")
    a_t = worldsim.validate_action(a_t)
    mc = cfg.model
    t = buffers.step

    ctx = _world_ctx(buffers, a_t, cfg, rng)
    w_lat = bundle.world.generate_world(ctx, rng)
    w_labels = bundle.codec.decode(w_lat)

    kc = mc.k_camera
    cam_window = np.stack(
        [c.to_vector() for c in buffers.cameras[max(0, t - kc):t]])
    world_window = np.stack(
        buffers.worlds[max(0, t - kc):t] + [w_labels]).astype(np.uint16)
    action_window = np.stack(
        buffers.actions[max(0, t - kc):t] + [a_t]).astype(np.float32)
    c_t = bundle.camera.next_camera(buffers.cameras[-1], cam_window,
                                    world_window, action_window)

    w2d_t = _project_frame(w_labels, c_t, bundle.codec, mc)
    pctx = _pixel_ctx(buffers, w2d_t, a_t, cfg, rng)
    o_lat = bundle.pixel.generate_pixel(pctx, c_t, rng)
    o_frame = bundle.pixel_codec.decode(o_lat)
    _append_step(buffers, a_t, c_t, o_lat, o_frame, w_labels, w_lat, w2d_t)


def rollout(init: EpisodeInit, actions: np.ndarray, bundle: ModelBundle,
            cfg: RolloutConfig, edits: dict | None = None) -> RolloutBuffers:
    """Full episode: NO-OP initialisation plus one step per action row.

    `edits` maps a step index to a list of (cell, class) patches applied to
    that step's world frame right after it is generated.
    """
    actions = np.asarray(actions, dtype=np.uint8)
    if actions.ndim != 2 or actions.shape[0] < 1:
        raise PipelineError("need at least one action step")
    edits = edits or {}
    rng = np.random.default_rng(np.uint64(cfg.seed))
    if hasattr(bundle.world, "begin_episode"):
        bundle.world.begin_episode(init)
    buffers = rollout_init(init, bundle, cfg, rng)
    if 0 in edits:
        edit_world(buffers, edits[0], bundle, cfg)
    for t in range(actions.shape[0]):
        rollout_step(buffers, actions[t], bundle, cfg, rng)
        if t + 1 in edits:
            edit_world(buffers, edits[t + 1], bundle, cfg)
    return buffers


def edit_world(buffers: RolloutBuffers, edits, bundle: ModelBundle,
               cfg: RolloutConfig) -> RolloutBuffers:
    """Patch the latest world frame in place and recompute its latent and
    projection so subsequent steps continue from the edited state."""
    if buffers.step < 1:
        raise PipelineError("empty buffers")
    mc = cfg.model
    if not edits:
        return buffers
    labels = buffers.worlds[-1].copy()
    for cell, cls in edits:
        cell = tuple(int(v) for v in cell)
        if len(cell) != 3 or any(v < 0 or v >= mc.S for v in cell):
            raise PipelineError(f"edit cell out of range: {cell}")
        if not 0 <= int(cls) < PALETTE_SIZE:
            raise PipelineError(f"edit class out of range: {cls}")
        labels[cell] = int(cls)
    buffers.worlds[-1] = labels
    buffers.world_latents[-1] = bundle.codec.encode(labels)
    buffers.w2d[-1] = _project_frame(labels, buffers.cameras[-1], bundle.codec, mc)
    buffers.edit_log.append(
        {"step": buffers.step - 1,
         "cells": [[list(map(int, c)), int(k)] for c, k in edits]})
    if hasattr(bundle.world, "apply_edit"):
        bundle.world.apply_edit(edits)
    buffers.check_aligned()
    return buffers


# --------------------------------------------------------------------------
# rollout persistence


def save_rollout(buffers: RolloutBuffers, out_dir, meta: dict) -> Path:
    """Trajectory-format arrays plus rollout.json provenance."""
    out_dir = Path(out_dir)
    traj = Trajectory(
        actions=np.stack(buffers.actions),
        cameras=np.stack([c.to_vector() for c in buffers.cameras]).astype(np.float32),
        frames=np.stack(buffers.frames),
        world=np.stack(buffers.worlds),
        seed=int(meta.get("seed", 0)),
        policy_mode=str(meta.get("policy_mode", "external")),
    )
    worldsim.save_trajectory(traj, out_dir)
    payload = dict(meta)
    payload["edit_log"] = buffers.edit_log
    payload["steps"] = buffers.step
    (out_dir / "rollout.json").write_text(json.dumps(payload, indent=1),
                                          encoding="utf-8")
    return out_dir


def checkpoint_hash(model_dir) -> str:
    h = hashlib.sha256()
    for name in ("model.json", "model.bin"):
        h.update((Path(model_dir) / name).read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    component: str                         # world | camera | pixel
    dataset: str
    batch_size: int = 8
    steps: int = 1000
    lr: float = 3e-3
    weight_decay: float = 0.01
    seed: int = 0
    p0_drop: float = P0_DROP
    cross_aug: float = flow.CROSS_AUG
    ctx_noise_max: float = 0.1             # training-time world-context noise cap
    drop_w2d: bool = False                 # pixel ablation: zero the projection
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.component not in ("world", "camera", "pixel"):
            raise PipelineError(f"unknown component: {self.component}")
        if self.batch_size < 1:
            raise PipelineError("batch size must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        return d


def _check_dataset(trajs: list[Trajectory], cfg: TrainConfig):
    if not trajs:
        raise PipelineError("empty dataset")
    mc = cfg.model
    t0 = trajs[0]
    if t0.world.shape[1:] != (mc.S, mc.S, mc.S):
        raise PipelineError("dataset world side does not match model config")
    if t0.frames.shape[1:3] != (mc.h, mc.w):
        raise PipelineError("dataset frame size does not match model config")


def _sample_index(rng, trajs, min_t: int):
    j = int(rng.integers(len(trajs)))
    n = trajs[j].n
    if n <= min_t:
        raise PipelineError("trajectories too short for the context window")
    t = int(rng.integers(min_t, n))
    return j, t


def _save_training_artifacts(model, losses, out_dir, cfg: TrainConfig,
                             extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    save_model(model, out_dir)
    payload = {"losses": [float(x) for x in losses], "config": cfg.to_json()}
    if extra:
        payload.update(extra)
    (out_dir / "train.json").write_text(json.dumps(payload, indent=1),
                                        encoding="utf-8")
    return out_dir


def train_world(cfg: TrainConfig, out_dir) -> Path:
    """CFM training of the world denoiser with teacher-forced context.

    The target frame carries a uniform per-frame noise level; world-context
    frames are independently noised up to ctx_noise_max so the fixed inference
    noising level is in-distribution; pixel conditioning always carries the
    fixed cross-modal augmentation noise. The whole world context is dropped
    with probability p0_drop to train the from-scratch generation mode.
    """
    trajs = load_dataset(Path(cfg.dataset))
    _check_dataset(trajs, cfg)
    mc = cfg.model
    rng = np.random.default_rng(np.uint64(cfg.seed))
    codec = VoxelCodec(mc.m, seed=CODEC_SEED)
    model = WorldDenoiser(mc)
    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    latents = [codec.encode(t.world) for t in trajs]
    pluckers_cache: dict[tuple[int, int], np.ndarray] = {}

    def pluck(j: int, t: int) -> np.ndarray:
        key = (j, t)
        if key not in pluckers_cache:
            cam = CameraState.from_vector(trajs[j].cameras[t])
            pluckers_cache[key] = plucker_map(cam, mc.h, mc.w).astype(np.float32)
        return pluckers_cache[key]

    k = mc.k_world
    B = cfg.batch_size
    losses = []
    for _ in range(cfg.steps):
        idx = [_sample_index(rng, trajs, k + 1) for _ in range(B)]
        tau = rng.uniform(flow.SIGMA_MIN, 1.0, B)
        x0 = np.stack([latents[j][t] for j, t in idx])
        x1 = rng.standard_normal(x0.shape).astype(np.float32)
        w_tau = ((1.0 - tau)[:, None, None, None, None] * x0
                 + tau[:, None, None, None, None] * x1).astype(np.float32)

        drop = rng.uniform() < cfg.p0_drop
        world_ctx = None
        if not drop:
            world_ctx = np.stack([latents[j][t - k:t] for j, t in idx])
            ctx_tau = rng.uniform(0.0, cfg.ctx_noise_max, (B, k))
            eps = rng.standard_normal(world_ctx.shape).astype(np.float32)
            ctx_tau = ctx_tau[..., None, None, None, None]
            world_ctx = ((1.0 - ctx_tau) * world_ctx + ctx_tau * eps).astype(np.float32)

        actions = np.stack([trajs[j].actions[t - k:t + 1] for j, t in idx])
        cameras = np.stack([trajs[j].cameras[t - k - 1:t] for j, t in idx])
        pixels = np.stack([trajs[j].frames[t - k - 1:t] for j, t in idx])
        eps_p = rng.standard_normal(pixels.shape).astype(np.float32)
        pixels = flow.noise_sample(pixels, eps_p, cfg.cross_aug).astype(np.float32)
        plk = np.stack([
            np.stack([pluck(j, u) for u in range(t - k - 1, t)])
            for j, t in idx])

        ctx = WorldContext(world=world_ctx, actions=actions.astype(np.float32),
                           cameras=cameras.astype(np.float32),
                           pixels=pixels, pluckers=plk)
        v = model.forward(w_tau, tau, ctx)
        loss = flow.cfm_loss(v, x0, x1)
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())

    return _save_training_artifacts(model, losses, out_dir, cfg)


def _camera_targets(traj: Trajectory, t: int) -> np.ndarray:
    prev = CameraState.from_vector(traj.cameras[t - 1])
    cur = CameraState.from_vector(traj.cameras[t])
    r = residual_between(prev, cur)
    # frame-local positions wrap mod 1 at anchor shifts; regress the
    # continuous position so the target is smooth across cell boundaries
    d = cur.pos - prev.pos
    d -= np.round(d)
    r.pos = prev.pos + d
    return r.to_vector().astype(np.float32)


def train_camera(cfg: TrainConfig, out_dir) -> Path:
    """Supervised regression of the next camera residual; the loss is the
    unweighted sum of the four head MSEs, each logged separately."""
    trajs = load_dataset(Path(cfg.dataset))
    _check_dataset(trajs, cfg)
    mc = cfg.model
    rng = np.random.default_rng(np.uint64(cfg.seed))
    codec = VoxelCodec(mc.m, seed=CODEC_SEED)
    model = CameraPredictor(mc, codec)
    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    k = mc.k_camera
    B = cfg.batch_size
    losses = []
    head_log = {"pos": [], "d_pitch": [], "d_yaw": [], "d_fov": []}
    for _ in range(cfg.steps):
        idx = [_sample_index(rng, trajs, k) for _ in range(B)]
        cams = np.stack([trajs[j].cameras[t - k:t] for j, t in idx])
        worlds = np.stack([trajs[j].world[t - k:t + 1] for j, t in idx])
        actions = np.stack([trajs[j].actions[t - k:t + 1] for j, t in idx])
        target = np.stack([_camera_targets(trajs[j], t) for j, t in idx])

        out = model.forward(cams.astype(np.float32), model.crop_inner(worlds),
                            actions.astype(np.float32), B)
        diff = grad.sub(out, Tensor(target))
        heads = {
            "pos": grad.mean(grad.mul(diff[:, :3], diff[:, :3])),
            "d_pitch": grad.mean(grad.mul(diff[:, 3:4], diff[:, 3:4])),
            "d_yaw": grad.mean(grad.mul(diff[:, 4:5], diff[:, 4:5])),
            "d_fov": grad.mean(grad.mul(diff[:, 5:6], diff[:, 5:6])),
        }
        loss = heads["pos"]
        for name in ("d_pitch", "d_yaw", "d_fov"):
            loss = grad.add(loss, heads[name])
        for name, h in heads.items():
            head_log[name].append(h.item())
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())

    return _save_training_artifacts(model, losses, out_dir, cfg,
                                    extra={"head_mse": head_log})


def train_pixel(cfg: TrainConfig, out_dir) -> Path:
    """CFM training of the pixel denoiser. The conditioning projection is
    built from ground-truth worlds and cameras, with cross-modal augmentation
    noise applied to the world latents before projecting. drop_w2d trains the
    projection-withheld ablation on the identical sampling stream."""
    trajs = load_dataset(Path(cfg.dataset))
    _check_dataset(trajs, cfg)
    mc = cfg.model
    rng = np.random.default_rng(np.uint64(cfg.seed))
    codec = VoxelCodec(mc.m, seed=CODEC_SEED)
    pixel_codec = PixelCodec()
    model = PixelDenoiser(mc)
    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    z = mc.l * (mc.m + 1)

    def build_w2d(j: int, t: int) -> np.ndarray:
        labels = trajs[j].world[t]
        feats = codec.encode(labels)
        eps = rng.standard_normal(feats.shape).astype(np.float32)
        feats = flow.noise_sample(feats, eps, cfg.cross_aug).astype(np.float32)
        cam = CameraState.from_vector(trajs[j].cameras[t])
        fg = FeatureGrid(features=feats, occupancy=labels != AIR)
        return fuse(project(cam, fg, mc.h, mc.w, mc.l))

    k = mc.k_pixel
    B = cfg.batch_size
    losses = []
    for _ in range(cfg.steps):
        idx = [_sample_index(rng, trajs, k) for _ in range(B)]
        tau = rng.uniform(flow.SIGMA_MIN, 1.0, B)
        x0 = np.stack([pixel_codec.encode(trajs[j].frames[t]) for j, t in idx])
        x1 = rng.standard_normal(x0.shape).astype(np.float32)
        o_tau = ((1.0 - tau)[:, None, None, None] * x0
                 + tau[:, None, None, None] * x1).astype(np.float32)

        w2d = np.stack([build_w2d(j, t) for j, t in idx])
        w2d_past = np.stack([
            np.stack([build_w2d(j, u) for u in range(t - k, t)]) for j, t in idx])
        if cfg.drop_w2d:
            w2d = np.zeros_like(w2d)
            w2d_past = np.zeros_like(w2d_past)

        pixels = np.stack([trajs[j].frames[t - k:t] for j, t in idx])
        eps_p = rng.standard_normal(pixels.shape).astype(np.float32)
        pixels = flow.noise_sample(pixels, eps_p, flow.TAU_CTX_PIXEL).astype(np.float32)
        actions = np.stack([trajs[j].actions[t - k:t + 1] for j, t in idx])

        ctx = PixelContext(w2d=w2d, w2d_past=w2d_past,
                           actions=actions.astype(np.float32), pixels=pixels)
        v = model.forward(o_tau, tau, ctx)
        loss = flow.cfm_loss(v, x0, x1)
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())

    return _save_training_artifacts(model, losses, out_dir, cfg)


def train(cfg: TrainConfig, out_dir) -> Path:
    return {"world": train_world, "camera": train_camera,
            "pixel": train_pixel}[cfg.component](cfg, out_dir)
