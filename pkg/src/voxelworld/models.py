"""Desk-scale learned components.

Fixed, exactly-invertible codecs stand in for learned autoencoders, and the
three predictors (world denoiser, camera regressor, pixel denoiser) are
FiLM-conditioned channel-mixing MLPs. The denoisers internally predict the
clean sample and emit velocity as (x0_hat - x_tau) / max(tau, tau_floor),
which is exact on the linear noising path and keeps training well-scaled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import grad
from .grad import Tensor
from .geometry import CameraResidual, CameraState, euler_from_rot6, wrap_angle
from .worldsim import N_ACTION_BITS, PALETTE_SIZE

TAU_FLOOR = 0.05  # velocity reparametrization clamp; below the smallest sampled tau


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by the predictors."""

    S: int = 16
    m: int = 4
    l: int = 8
    h: int = 32
    w: int = 32
    k_world: int = 4
    k_camera: int = 4
    k_pixel: int = 4
    hidden: int = 64
    cond_dim: int = 64
    c_w: int = 16          # channels given to embedded w2D inside the pixel model
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# codecs


class VoxelCodec:
    """Frozen per-class embedding table; decode is nearest-row classification."""

    def __init__(self, m: int = 4, palette_size: int = PALETTE_SIZE, seed: int = 1234):
        rng = np.random.default_rng(seed)
        for _ in range(64):
            table = rng.standard_normal((palette_size, m)).astype(np.float32)
            if self._min_gap(table) > 0.5:
                break
        else:
            raise ModelError("could not initialize codec table with min gap > 0.5")
        self.table = table
        self.m = m
        self.palette_size = palette_size

    @staticmethod
    def _min_gap(table: np.ndarray) -> float:
        d = np.linalg.norm(table[:, None, :] - table[None, :, :], axis=-1)
        d[np.diag_indices(len(table))] = np.inf
        return float(d.min())

    @property
    def min_gap(self) -> float:
        return self._min_gap(self.table)

    def encode(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.max(initial=0) >= self.palette_size:
            raise ModelError("label out of palette range")
        return self.table[labels]

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float32)
        flat = latent.reshape(-1, self.m)
        d2 = (
            np.square(flat).sum(axis=1, keepdims=True)
            - 2.0 * flat @ self.table.T
            + np.square(self.table).sum(axis=1)[None, :]
        )
        return d2.argmin(axis=1).astype(np.uint16).reshape(latent.shape[:-1])


class PixelCodec:
    """Identity pixel codec; decode clips into the valid frame range."""

    def encode(self, frame: np.ndarray) -> np.ndarray:
        return np.asarray(frame, dtype=np.float32)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(latent, dtype=np.float32), 0.0, 1.0)


# --------------------------------------------------------------------------
# building blocks


class Linear:
    def __init__(self, rng, fan_in: int, fan_out: int, scale: float | None = None):
        s = scale if scale is not None else 1.0 / math.sqrt(fan_in)
        self.w = Tensor(rng.standard_normal((fan_in, fan_out)) * s, requires_grad=True)
        self.b = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return grad.affine(x, self.w, self.b)

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def tau_features(tau: np.ndarray) -> np.ndarray:
    """(B, 4) basis for the noise level, including a clamped 1/tau term."""
    tau = np.asarray(tau, dtype=np.float32).reshape(-1)
    inv = 1.0 / np.maximum(tau, TAU_FLOOR)
    return np.stack([tau, 1.0 - tau, inv, np.sqrt(tau)], axis=1).astype(np.float32)


def velocity_scale(tau: np.ndarray) -> np.ndarray:
    return (1.0 / np.maximum(np.asarray(tau, dtype=np.float32), TAU_FLOOR)).reshape(-1)


def _pad_slots(window: np.ndarray | None, k: int, width: int, null_token: Tensor,
               batch: int) -> list[Tensor]:
    """Per-slot tensors for a context window, left-padding missing slots with
    the learned null token (broadcast over the batch)."""
    slots: list[Tensor] = []
    have = 0 if window is None else window.shape[1]
    if have > k:
        window = window[:, -k:]
        have = k
    for _ in range(k - have):
        slots.append(grad.broadcast_to(null_token, (batch, width)))
    for i in range(have):
        slots.append(Tensor(window[:, i].reshape(batch, width)))
    return slots


def _neighborhood7(grid: np.ndarray) -> np.ndarray:
    """Center + 6 axis neighbors of every cell; (..., S,S,S,c) -> (..., S,S,S,7c).

    Out-of-frame neighbors are zero, matching the air-fill convention.
    """
    pads = [(0, 0)] * (grid.ndim - 4) + [(1, 1), (1, 1), (1, 1), (0, 0)]
    p = np.pad(grid, pads)
    sl = slice(1, -1)
    views = [
        p[..., sl, sl, sl, :],
        p[..., 2:, sl, sl, :], p[..., :-2, sl, sl, :],
        p[..., sl, 2:, sl, :], p[..., sl, :-2, sl, :],
        p[..., sl, sl, 2:, :], p[..., sl, sl, :-2, :],
    ]
    return np.concatenate(views, axis=-1)


def _pool_image(img: np.ndarray, grid: int = 4) -> np.ndarray:
    """Average-pool (B,h,w,c) down to (B, grid*grid*c)."""
    b, h, w, c = img.shape
    hs, ws = h // grid, w // grid
    img = img[:, :hs * grid, :ws * grid]
    pooled = img.reshape(b, grid, hs, grid, ws, c).mean(axis=(2, 4))
    return pooled.reshape(b, grid * grid * c).astype(np.float32)


class FilmMlp:
    """Hidden stack with per-layer scale/shift injection from a conditioning
    vector; the output layer also sees the raw per-element input (skip)."""

    def __init__(self, rng, in_dim: int, cond_in: int, hidden: int, cond_dim: int,
                 out_dim: int, n_layers: int = 2):
        self.cond1 = Linear(rng, cond_in, cond_dim)
        self.cond2 = Linear(rng, cond_dim, cond_dim)
        self.layers = []
        self.films = []
        d = in_dim
        for _ in range(n_layers):
            self.layers.append(Linear(rng, d, hidden))
            self.films.append(Linear(rng, cond_dim, 2 * hidden, scale=1e-2))
            d = hidden
        self.out = Linear(rng, hidden + in_dim, out_dim, scale=1e-2)
        self.hidden = hidden

    def named(self, prefix: str):
        yield from self.cond1.named(f"{prefix}.cond1")
        yield from self.cond2.named(f"{prefix}.cond2")
        for i, (lin, film) in enumerate(zip(self.layers, self.films)):
            yield from lin.named(f"{prefix}.layer{i}")
            yield from film.named(f"{prefix}.film{i}")
        yield from self.out.named(f"{prefix}.out")

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        """x: (B, N, in_dim) or (B, in_dim); cond: (B, cond_in)."""
        c = grad.silu(self.cond2(grad.silu(self.cond1(cond))))
        per_element = len(x.shape) == 3
        h = x
        for lin, film in zip(self.layers, self.films):
            h = lin(h)
            sc_sh = film(c)
            scale = sc_sh[:, : self.hidden]
            shift = sc_sh[:, self.hidden:]
            if per_element:
                scale = grad.reshape(scale, (x.shape[0], 1, self.hidden))
                shift = grad.reshape(shift, (x.shape[0], 1, self.hidden))
            h = grad.add(grad.mul(h, grad.add(scale, Tensor(np.ones(1)))), shift)
            h = grad.silu(h)
        return self.out(grad.concat([h, x], axis=-1))


# --------------------------------------------------------------------------
# world denoiser


@dataclass
class WorldContext:
    """Conditioning windows for the world denoiser (None = empty window)."""

    world: np.ndarray | None        # (B, kw, S,S,S, m) past world latents
    actions: np.ndarray | None      # (B, ka, 23)
    cameras: np.ndarray | None      # (B, kc, 10)
    pixels: np.ndarray | None       # (B, kp, h, w, 3)
    pluckers: np.ndarray | None     # (B, kp, h, w, 6)


class WorldDenoiser:
    """Per-voxel channel-mixing denoiser over the agent-centred latent frame.

    Spatial inputs per voxel: the noised latent plus the 7-point neighborhood
    of the time-pooled context latents (so one-cell recentring is visible).
    Actions, cameras, the noise level and pooled pixel/Pluecker conditioning
    enter through FiLM.
    """

    kind = "world"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed + 11)
        m, k = cfg.m, cfg.k_world
        self.in_dim = m + 7 * m
        self.ac_width = N_ACTION_BITS + 10
        self.pix_slot = 16 * 9      # 4x4 pooled pixels + pluecker channels

        self.null_world = Tensor(np.zeros(m), requires_grad=True)
        self.ctx_pos = Tensor(np.zeros((k, m)), requires_grad=True)
        self.null_ac = Tensor(np.zeros(self.ac_width), requires_grad=True)
        self.null_pix = Tensor(np.zeros(self.pix_slot), requires_grad=True)

        self.ac_embed = Linear(rng, (k + 1) * self.ac_width, 32)
        self.pix_embed = Linear(rng, self.pix_slot, 32)
        cond_in = 4 + 32 + 32
        self.mlp = FilmMlp(rng, self.in_dim, cond_in, cfg.hidden, cfg.cond_dim, m)

    def named_params(self):
        yield "null_world", self.null_world
        yield "ctx_pos", self.ctx_pos
        yield "null_ac", self.null_ac
        yield "null_pix", self.null_pix
        yield from self.ac_embed.named("ac_embed")
        yield from self.pix_embed.named("pix_embed")
        yield from self.mlp.named("mlp")

    def params(self):
        return [t for _, t in self.named_params()]

    def embed_action_camera(self, actions: np.ndarray | None,
                            cameras: np.ndarray | None, batch: int) -> Tensor:
        """Joint MLP embedding of the action and camera windows."""
        k = self.cfg.k_world + 1
        acts = None
        if actions is not None or cameras is not None:
            na = 0 if actions is None else actions.shape[1]
            nc = 0 if cameras is None else cameras.shape[1]
            n = max(na, nc)
            a = np.zeros((batch, n, N_ACTION_BITS), dtype=np.float32)
            c = np.zeros((batch, n, 10), dtype=np.float32)
            if actions is not None:
                a[:, n - na:] = actions
            if cameras is not None:
                c[:, n - nc:] = cameras
            acts = np.concatenate([a, c], axis=-1)
        slots = _pad_slots(acts, k, self.ac_width, self.null_ac, batch)
        return grad.silu(self.ac_embed(grad.concat(slots, axis=-1)))

    def _pixel_cond(self, pixels, pluckers, batch: int) -> Tensor:
        window = None
        if pixels is not None and pixels.shape[1] > 0:
            if pluckers is None or pluckers.shape[1] != pixels.shape[1]:
                raise ModelError("pixel window needs matching pluecker window")
            kp = pixels.shape[1]
            per = np.concatenate([pixels, pluckers], axis=-1)
            pooled = np.stack(
                [_pool_image(per[:, i]) for i in range(kp)], axis=1)
            window = pooled
        slots = _pad_slots(window, 1 if window is None else window.shape[1],
                           self.pix_slot, self.null_pix, batch)
        total = slots[0]
        for s in slots[1:]:
            total = grad.add(total, s)
        pooled_mean = grad.mul(total, Tensor(np.float32(1.0 / len(slots))))
        return grad.silu(self.pix_embed(pooled_mean))

    def forward(self, w_tau: np.ndarray, tau: np.ndarray, ctx: WorldContext) -> Tensor:
        cfg = self.cfg
        S, m = cfg.S, cfg.m
        w_tau = np.asarray(w_tau, dtype=np.float32)
        if w_tau.shape[1:] != (S, S, S, m):
            raise ModelError(f"world latent shape {w_tau.shape[1:]} != {(S, S, S, m)}")
        B = w_tau.shape[0]
        V = S ** 3

        if ctx.world is not None and ctx.world.shape[1] > 0:
            kw = min(ctx.world.shape[1], cfg.k_world)
            pooled = ctx.world[:, -kw:].mean(axis=1).astype(np.float32)
            # mean of the used temporal-position rows, kept differentiable
            ctx_bias = grad.mul(
                _sum_rows(self.ctx_pos, cfg.k_world - kw, cfg.k_world),
                Tensor(np.float32(1.0 / kw)))
        else:
            pooled = np.zeros((B, S, S, S, m), dtype=np.float32)
            ctx_bias = self.null_world

        neigh = _neighborhood7(pooled).reshape(B, V, 7 * m)
        x_np = np.concatenate([w_tau.reshape(B, V, m), neigh], axis=-1)

        # channel bias: zeros on the noised-latent block, the context bias
        # (temporal position mean or the null token) tiled over neighbor blocks
        zeros_m = Tensor(np.zeros(m, dtype=np.float32))
        bias = grad.concat([zeros_m] + [ctx_bias] * 7, axis=-1)
        x = grad.add(Tensor(x_np), bias)

        cond = grad.concat([
            Tensor(tau_features(tau)),
            self.embed_action_camera(ctx.actions, ctx.cameras, B),
            self._pixel_cond(ctx.pixels, ctx.pluckers, B),
        ], axis=-1)

        x0_hat = self.mlp(x, cond)
        s = velocity_scale(tau).reshape(B, 1, 1)
        v = grad.mul(grad.sub(x0_hat, Tensor(w_tau.reshape(B, V, m))), Tensor(s))
        return grad.reshape(v, (B, S, S, S, m))


def _sum_rows(t: Tensor, lo: int, hi: int) -> Tensor:
    """Sum of rows lo..hi of a 2D parameter, as a 1D tensor."""
    total = t[lo]
    for i in range(lo + 1, hi):
        total = grad.add(total, t[i])
    return total


# --------------------------------------------------------------------------
# camera predictor


class CameraPredictor:
    """Regresses the next camera residual from past cameras (residual-encoded),
    actions, and the inner 4^3 crops of the world-frame window."""

    kind = "camera"

    def __init__(self, cfg: ModelConfig, codec: VoxelCodec):
        self.cfg = cfg
        self.codec = codec
        rng = np.random.default_rng(cfg.seed + 23)
        k = cfg.k_camera
        self.cam_width = 6                       # pos3 + pitch + yaw + fov
        self.crop_width = 64 * cfg.m             # 4^3 voxel features
        self.null_cam = Tensor(np.zeros(self.cam_width), requires_grad=True)
        self.null_act = Tensor(np.zeros(N_ACTION_BITS), requires_grad=True)
        self.null_crop = Tensor(np.zeros(self.crop_width), requires_grad=True)
        # bottleneck the wide crop window so kinematic inputs are not swamped
        self.crop_embed = Linear(rng, (k + 1) * self.crop_width, 32)
        in_dim = k * self.cam_width + (k + 1) * N_ACTION_BITS + 32
        self.fc1 = Linear(rng, in_dim, cfg.hidden)
        self.fc2 = Linear(rng, cfg.hidden, cfg.hidden)
        self.head = Linear(rng, cfg.hidden, 6, scale=1e-2)

    def named_params(self):
        yield "null_cam", self.null_cam
        yield "null_act", self.null_act
        yield "null_crop", self.null_crop
        yield from self.crop_embed.named("crop_embed")
        yield from self.fc1.named("fc1")
        yield from self.fc2.named("fc2")
        yield from self.head.named("head")

    def params(self):
        return [t for _, t in self.named_params()]

    def encode_camera_window(self, cameras: np.ndarray) -> np.ndarray:
        """(B, k, 10) raw cameras -> (B, k, 6) euler/residual features.

        The last slot is the absolute pose with positions centred on the
        frame middle (so only the fractional part carries signal); earlier
        slots hold backward differences so the model sees recent motion.
        """
        b, k, _ = cameras.shape
        feats = np.zeros((b, k, 6), dtype=np.float32)
        for i in range(b):
            eulers = []
            for j in range(k):
                cam = CameraState.from_vector(cameras[i, j])
                pitch, yaw = euler_from_rot6(cam.rot6)
                eulers.append(np.array([*cam.pos, pitch, yaw, cam.fov]))
            eulers = np.stack(eulers)
            feats[i, -1] = eulers[-1]
            feats[i, -1, :3] -= self.cfg.S / 2.0
            for j in range(k - 1):
                d = eulers[j + 1] - eulers[j]
                # frame-local positions wrap mod 1 at anchor shifts; recover
                # the continuous motion (per-step speed is well below 0.5)
                d[:3] -= np.round(d[:3])
                d[4] = wrap_angle(d[4])
                feats[i, j] = d
        return feats

    def crop_inner(self, world_labels: np.ndarray) -> np.ndarray:
        """Inner 4^3 crop of each (S,S,S) label frame, codec-embedded."""
        S = self.cfg.S
        lo = S // 2 - 2
        crop = world_labels[..., lo:lo + 4, lo:lo + 4, lo:lo + 4]
        return self.codec.encode(crop).reshape(*world_labels.shape[:-3], self.crop_width)

    def forward(self, cameras: np.ndarray | None, world_crops: np.ndarray | None,
                actions: np.ndarray | None, batch: int) -> Tensor:
        """Heads: absolute position (network predicts the delta from the last
        context camera), then pitch/yaw/fov deltas."""
        k = self.cfg.k_camera
        cam_feats = None
        base = np.full((batch, 6), 0.0, dtype=np.float32)
        base[:, :3] = self.cfg.S / 2.0
        if cameras is not None and cameras.shape[1] > 0:
            cam_feats = self.encode_camera_window(cameras)
            base[:, :3] = cameras[:, -1, :3]
        slots = _pad_slots(cam_feats, k, self.cam_width, self.null_cam, batch)
        slots += _pad_slots(actions, k + 1, N_ACTION_BITS, self.null_act, batch)
        crop_slots = _pad_slots(world_crops, k + 1, self.crop_width,
                                self.null_crop, batch)
        slots.append(grad.silu(self.crop_embed(grad.concat(crop_slots, axis=-1))))
        x = grad.concat(slots, axis=-1)
        h = grad.silu(self.fc1(x))
        h = grad.silu(self.fc2(h))
        return grad.add(self.head(h), Tensor(base))

    def predict(self, cameras, world_crops, actions) -> CameraResidual:
        with grad.no_grad():
            out = self.forward(cameras, world_crops, actions, batch=1).data[0]
        return CameraResidual(pos=out[:3], d_pitch=out[3], d_yaw=out[4], d_fov=out[5])


# --------------------------------------------------------------------------
# pixel denoiser


@dataclass
class PixelContext:
    w2d: np.ndarray | None          # (B, h, w, z) fused projection for frame t
    w2d_past: np.ndarray | None     # (B, kp, h, w, z) past fused projections
    actions: np.ndarray | None      # (B, ka, 23)
    pixels: np.ndarray | None       # (B, kp, h, w, 3) past pixel latents


class PixelDenoiser:
    """Learned deferred shader: per-pixel channel mixing over the noised pixel
    latent, the embedded projection stack, and temporally pooled past pixels."""

    kind = "pixel"

    def __init__(self, cfg: ModelConfig):
        if cfg.c_w <= 3:
            raise ModelError("c_w must exceed the pixel channel count (3)")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed + 37)
        self.z = cfg.l * (cfg.m + 1)
        self.d_far = float(math.sqrt(3.0) * cfg.S)
        self.w2d_embed = Linear(rng, self.z, cfg.c_w)
        self.null_act = Tensor(np.zeros(N_ACTION_BITS), requires_grad=True)
        self.ac_embed = Linear(rng, (cfg.k_pixel + 1) * N_ACTION_BITS, 32)
        in_dim = 3 + 3 + 2 * cfg.c_w
        cond_in = 4 + 32
        self.mlp = FilmMlp(rng, in_dim, cond_in, cfg.hidden, cfg.cond_dim, 3)

    def named_params(self):
        yield "null_act", self.null_act
        yield from self.w2d_embed.named("w2d_embed")
        yield from self.ac_embed.named("ac_embed")
        yield from self.mlp.named("mlp")

    def params(self):
        return [t for _, t in self.named_params()]

    def _normalize_w2d(self, w2d: np.ndarray) -> np.ndarray:
        """Scale the depth channel of each layer block into [0, 1]."""
        w2d = np.asarray(w2d, dtype=np.float32).copy()
        m = self.cfg.m
        w2d[..., m::m + 1] /= self.d_far
        return w2d

    def forward(self, o_tau: np.ndarray, tau: np.ndarray, ctx: PixelContext) -> Tensor:
        cfg = self.cfg
        o_tau = np.asarray(o_tau, dtype=np.float32)
        B, h, w, _ = o_tau.shape
        if (h, w) != (cfg.h, cfg.w):
            raise ModelError("misaligned-projection")
        n = h * w

        if ctx.w2d is None:
            raise ModelError("misaligned-projection")
        if ctx.w2d.shape[1:3] != (h, w) or ctx.w2d.shape[3] != self.z:
            raise ModelError("misaligned-projection")

        cur = Tensor(self._normalize_w2d(ctx.w2d).reshape(B, n, self.z))
        emb_cur = grad.silu(self.w2d_embed(cur))

        if ctx.w2d_past is not None and ctx.w2d_past.shape[1] > 0:
            past = ctx.w2d_past[:, -cfg.k_pixel:].mean(axis=1)
            emb_past = grad.silu(self.w2d_embed(
                Tensor(self._normalize_w2d(past).reshape(B, n, self.z))))
        else:
            emb_past = grad.mul(emb_cur, Tensor(np.float32(0.0)))

        if ctx.pixels is not None and ctx.pixels.shape[1] > 0:
            pix_past = ctx.pixels[:, -cfg.k_pixel:].mean(axis=1).astype(np.float32)
        else:
            pix_past = np.zeros((B, h, w, 3), dtype=np.float32)

        x = grad.concat([
            Tensor(o_tau.reshape(B, n, 3)),
            Tensor(pix_past.reshape(B, n, 3)),
            emb_cur,
            emb_past,
        ], axis=-1)

        slots = _pad_slots(ctx.actions, cfg.k_pixel + 1, N_ACTION_BITS,
                           self.null_act, B)
        cond = grad.concat(
            [Tensor(tau_features(tau)), grad.silu(self.ac_embed(grad.concat(slots, axis=-1)))],
            axis=-1)

        x0_hat = self.mlp(x, cond)
        s = velocity_scale(tau).reshape(B, 1, 1)
        v = grad.mul(grad.sub(x0_hat, Tensor(o_tau.reshape(B, n, 3))), Tensor(s))
        return grad.reshape(v, (B, h, w, 3))


# --------------------------------------------------------------------------
# persistence

_KINDS = {"world": WorldDenoiser, "camera": CameraPredictor, "pixel": PixelDenoiser}


def save_model(model, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grad.save_tensors(out_dir / "model.bin",
                      {name: t.data for name, t in model.named_params()})
    meta = {"kind": model.kind, **model.cfg.to_json()}
    (out_dir / "model.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return out_dir


def load_model(model_dir, codec: VoxelCodec | None = None):
    model_dir = Path(model_dir)
    meta = json.loads((model_dir / "model.json").read_text(encoding="utf-8"))
    kind = meta.pop("kind")
    cfg = ModelConfig(**meta)
    if kind == "camera":
        model = CameraPredictor(cfg, codec or VoxelCodec(cfg.m))
    else:
        model = _KINDS[kind](cfg)
    weights = grad.load_tensors(model_dir / "model.bin")
    for name, t in model.named_params():
        if name not in weights:
            raise ModelError(f"checkpoint missing tensor {name}")
        if weights[name].shape != t.data.shape:
            raise ModelError(f"checkpoint shape mismatch for {name}")
        t.data = weights[name].astype(np.float32).copy()
    return model
