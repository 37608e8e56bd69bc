"""Metrics (PSNR, voxel accuracy, revisit consistency, camera trajectory
error) and the oracle model bundle that wraps the ground-truth simulator
behind the predictor interfaces."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import worldsim
from .geometry import CameraState, euler_from_rot6, wrap_angle
from .models import ModelConfig, PixelCodec, VoxelCodec
from .pipeline import CODEC_SEED, EpisodeInit, ModelBundle
from .worldsim import MOUSE_BINS

PSNR_CAP = 99.0
REVISIT_PSNR_DB = 25.0
REVISIT_POS_TOL = 0.25
REVISIT_ANGLE_TOL = float(MOUSE_BINS[1] - MOUSE_BINS[0])


class EvalError(ValueError):
    pass


@dataclass
class MetricReport:
    psnr_mean: float
    voxel_acc: float
    revisit_score: float | None    # None when the rollout contains no revisits
    camera_ate: float
    episodes: int
    config_hash: str

    def validate(self):
        for name in ("voxel_acc", "revisit_score"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise EvalError(f"{name} out of [0,1]: {v}")


# --------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray):
    """Per-frame PSNR in dB plus the mean; identical frames cap at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    per = []
    for fa, fb in zip(a, b):
        mse = float(np.mean(np.square(fa - fb)))
        per.append(PSNR_CAP if mse == 0.0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse)))
    return per, float(np.mean(per))


def voxel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise EvalError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(pred == truth))


def _camera_pose(c) -> tuple[np.ndarray, float, float]:
    cam = c if isinstance(c, CameraState) else CameraState.from_vector(c)
    pitch, yaw = euler_from_rot6(cam.rot6)
    return cam.pos, pitch, yaw


def cameras_match(c1, c2, pos_tol: float = REVISIT_POS_TOL,
                  ang_tol: float = REVISIT_ANGLE_TOL) -> bool:
    p1, pitch1, yaw1 = _camera_pose(c1)
    p2, pitch2, yaw2 = _camera_pose(c2)
    if np.linalg.norm(p1 - p2) >= pos_tol:
        return False
    return (abs(pitch1 - pitch2) < ang_tol
            and abs(wrap_angle(yaw1 - yaw2)) < ang_tol)


def find_revisit_pairs(cameras, min_gap: int = 8,
                       pos_tol: float = REVISIT_POS_TOL,
                       ang_tol: float = REVISIT_ANGLE_TOL) -> list[tuple[int, int]]:
    """All (t1, t2) with t2 - t1 >= min_gap whose cameras match within
    tolerance; the candidate source for revisit scoring."""
    pairs = []
    n = len(cameras)
    for t1 in range(n):
        for t2 in range(t1 + min_gap, n):
            if cameras_match(cameras[t1], cameras[t2], pos_tol, ang_tol):
                pairs.append((t1, t2))
    return pairs


def revisit_consistency(frames, cameras, pairs=None,
                        threshold_db: float = REVISIT_PSNR_DB,
                        pos_tol: float = REVISIT_POS_TOL,
                        ang_tol: float = REVISIT_ANGLE_TOL) -> float:
    """Fraction of camera-matched time pairs whose frames agree above the
    PSNR threshold. Raises "no-revisits" when no pair qualifies."""
    if pairs is None:
        pairs = find_revisit_pairs(cameras, pos_tol=pos_tol, ang_tol=ang_tol)
    valid = [(t1, t2) for t1, t2 in pairs
             if cameras_match(cameras[t1], cameras[t2], pos_tol, ang_tol)]
    if not valid:
        raise EvalError("no-revisits")
    ok = 0
    for t1, t2 in valid:
        _, db = psnr(frames[t1], frames[t2])
        if db >= threshold_db:
            ok += 1
    return ok / len(valid)


def _align_ground_plane(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Optimal yaw rotation + translation (closed form) mapping pred onto
    truth in the ground plane; y gets translation only. Returns aligned pred."""
    pc = pred - pred.mean(axis=0)
    tc = truth - truth.mean(axis=0)
    px, pz = pc[:, 0], pc[:, 2]
    tx, tz = tc[:, 0], tc[:, 2]
    # rotation about +y by theta: x' = x cos + z sin, z' = -x sin + z cos
    num = float(np.sum(px * tz - pz * tx))
    den = float(np.sum(px * tx + pz * tz))
    theta = 0.0 if (num == 0.0 and den == 0.0) else math.atan2(-num, den)
    c, s = math.cos(theta), math.sin(theta)
    out = np.empty_like(pc)
    out[:, 0] = px * c + pz * s
    out[:, 2] = -px * s + pz * c
    out[:, 1] = pc[:, 1]
    return out + truth.mean(axis=0)


def camera_ate(pred, truth) -> float:
    """RMS positional error after optimal ground-plane yaw+translation
    alignment."""
    if len(pred) != len(truth):
        raise EvalError("length mismatch")
    p = np.stack([_camera_pose(c)[0] for c in pred])
    t = np.stack([_camera_pose(c)[0] for c in truth])
    aligned = _align_ground_plane(p, t)
    return float(np.sqrt(np.mean(np.sum(np.square(aligned - t), axis=1))))


def camera_path_error(camera_gen, traj, k: int) -> float:
    """Teacher-forced composed-path positional error per step.

    At each step the predictor sees ground-truth context and its predicted
    motion is accumulated into a path. Frame-local positions wrap mod 1 when
    the anchor cell shifts, so deltas are compared after unwrapping to the
    nearest representative (per-step motion is well below half a cell).
    """
    if traj.n <= k:
        raise EvalError("trajectory shorter than the context window")
    start = CameraState.from_vector(traj.cameras[k - 1]).pos
    truth_path = start.copy()
    pred_path = start.copy()
    steps = 0
    for t in range(k, traj.n):
        prev = CameraState.from_vector(traj.cameras[t - 1])
        pred = camera_gen.next_camera(
            prev, traj.cameras[t - k:t], traj.world[t - k:t + 1],
            traj.actions[t - k:t + 1].astype(np.float32))
        truth = CameraState.from_vector(traj.cameras[t])
        d_true = truth.pos - prev.pos
        d_true -= np.round(d_true)
        d_pred = pred.pos - prev.pos
        d_pred -= np.round(d_pred)
        truth_path += d_true
        pred_path += d_pred
        steps += 1
    return float(np.linalg.norm(pred_path - truth_path)) / steps


# --------------------------------------------------------------------------
# oracle models


class OracleModels:
    """Ground-truth simulator exposed through the generator interfaces; its
    outputs are byte-identical to the simulator's own rollouts."""

    def __init__(self, world_seed: int, mcfg: ModelConfig | None = None,
                 dims=(64, 24, 64)):
        self.world_seed = int(world_seed)
        self.mcfg = mcfg or ModelConfig()
        self.dims = tuple(dims)
        self.codec = VoxelCodec(self.mcfg.m, seed=CODEC_SEED)
        self.grid = None
        self.agent = None
        self._started = False

    def begin_episode(self, init: EpisodeInit):
        self.grid = worldsim.generate_world(self.world_seed, self.dims)
        self.agent = worldsim.spawn_agent(self.grid, fov=init.c_init.fov)
        # with an explicit world init the step-0 world generation is skipped
        self._started = init.w_init is not None

    def _require_state(self):
        if self.grid is None:
            raise EvalError("oracle episode not initialised")

    @property
    def anchor(self) -> np.ndarray:
        return np.floor(self.agent.position).astype(np.int64)

    def generate_world(self, ctx, rng) -> np.ndarray:
        self._require_state()
        if self._started:
            a_t = np.asarray(ctx.actions[0, -1], dtype=np.uint8)
            self.grid = worldsim.step_dynamics(self.grid)
            self.agent = worldsim.step_agent(self.grid, self.agent, a_t)
        self._started = True
        labels = worldsim.extract_world_frame(self.grid, self.anchor, self.mcfg.S)
        return self.codec.encode(labels)

    def next_camera(self, prev, cam_window, world_window, action_window) -> CameraState:
        self._require_state()
        return worldsim.frame_local_camera(self.agent, self.anchor, self.mcfg.S)

    def generate_pixel(self, ctx, camera: CameraState, rng) -> np.ndarray:
        self._require_state()
        return worldsim.render_reference(
            self.grid, worldsim.camera_from_agent(self.agent),
            self.mcfg.h, self.mcfg.w)

    def apply_edit(self, edits):
        self._require_state()
        S = self.mcfg.S
        lo = self.anchor - S // 2
        dims = np.array(self.grid.dims)
        for cell, cls in edits:
            wc = lo + np.asarray(cell, dtype=np.int64)
            if np.all(wc >= 0) and np.all(wc < dims):
                self.grid.labels[tuple(wc)] = int(cls)


def build_oracles(world_seed: int, mcfg: ModelConfig | None = None,
                  dims=(64, 24, 64)) -> ModelBundle:
    oracle = OracleModels(world_seed, mcfg, dims)
    return ModelBundle(world=oracle, camera=oracle, pixel=oracle,
                       codec=oracle.codec, pixel_codec=PixelCodec())


def oracle_init(bundle: ModelBundle, with_world: bool = False) -> EpisodeInit:
    """Episode init matching the oracle's ground truth at step 0."""
    oracle = bundle.world
    if not isinstance(oracle, OracleModels):
        raise EvalError("bundle is not oracle-backed")
    mcfg = oracle.mcfg
    grid = worldsim.generate_world(oracle.world_seed, oracle.dims)
    agent = worldsim.spawn_agent(grid)
    anchor = np.floor(agent.position).astype(np.int64)
    o0 = worldsim.render_reference(grid, worldsim.camera_from_agent(agent),
                                   mcfg.h, mcfg.w)
    c0 = worldsim.frame_local_camera(agent, anchor, mcfg.S)
    w0 = worldsim.extract_world_frame(grid, anchor, mcfg.S) if with_world else None
    return EpisodeInit(o_init=o0, c_init=c0, w_init=w0)


# --------------------------------------------------------------------------
# report artifacts


def write_report(report: MetricReport, per_episode: list[dict], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.validate()
    (out_dir / "report.json").write_text(
        json.dumps(asdict(report), indent=1), encoding="utf-8")
    if per_episode:
        with open(out_dir / "episodes.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(per_episode[0].keys()))
            writer.writeheader()
            writer.writerows(per_episode)
    return out_dir
