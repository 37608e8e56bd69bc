"""Deterministic ground-truth voxel micro-world.

Procedural terrain, a one-rule water dynamic, agent kinematics with
box/voxel collision, a raycast reference renderer, scripted policies and
trajectory dataset generation. Everything here is a pure function of its
inputs and declared seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .geometry import CameraState
from .projection import default_d_far, traverse_batch

# --------------------------------------------------------------------------
# palette

AIR, GRASS, DIRT, STONE, SAND, WATER, WOOD, LEAVES = range(8)

PALETTE = [
    # (class_id, name, rgb, solid, fluid)
    (AIR, "air", (0.0, 0.0, 0.0), False, False),
    (GRASS, "grass", (0.13, 0.55, 0.13), True, False),
    (DIRT, "dirt", (0.55, 0.27, 0.07), True, False),
    (STONE, "stone", (0.50, 0.50, 0.50), True, False),
    (SAND, "sand", (0.76, 0.70, 0.50), True, False),
    (WATER, "water", (0.20, 0.40, 0.80), False, True),
    (WOOD, "wood", (0.40, 0.26, 0.13), True, False),
    (LEAVES, "leaves", (0.13, 0.40, 0.13), True, False),
]

PALETTE_SIZE = len(PALETTE)
PALETTE_RGB = np.array([p[2] for p in PALETTE], dtype=np.float64)
SOLID_MASK = np.array([p[3] for p in PALETTE], dtype=bool)
FLUID_MASK = np.array([p[4] for p in PALETTE], dtype=bool)

SKY_COLOR = np.array([0.55, 0.75, 0.95])

# agent kinematics constants (config-exposed through DatasetConfig)
MOVE_SPEED = 0.25          # horizontal units per tick
TURN_MAX = 0.2             # radians, largest mouse bin magnitude
MOUSE_BINS = np.linspace(-TURN_MAX, TURN_MAX, 9)
JUMP_SPEED = 0.5
GRAVITY = -0.08
AGENT_RADIUS = 0.3
EYE_HEIGHT = 1.5           # eye above feet
HEAD_ROOM = 0.1            # box extends this much above the eye
DEFAULT_FOV = 1.2

N_ACTION_BITS = 23
KEY_FORWARD, KEY_BACK, KEY_LEFT, KEY_RIGHT, KEY_JUMP = range(5)
YAW_BIN_OFFSET = 5
PITCH_BIN_OFFSET = 14

POLICY_MODES = ("free_play", "forward_look", "backward_look", "orbit")


class WorldError(ValueError):
    pass


# --------------------------------------------------------------------------
# domain types


@dataclass
class VoxelGrid:
    """Semantic class labels on a 3D lattice, indexed labels[x, y, z]; +y up."""

    labels: np.ndarray
    palette_size: int = PALETTE_SIZE

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.labels.ndim != 3:
            raise WorldError("labels must be 3D")
        if self.labels.max(initial=0) >= self.palette_size:
            raise WorldError("label out of palette range")

    @property
    def dims(self):
        return self.labels.shape

    def solid(self) -> np.ndarray:
        return SOLID_MASK[self.labels]

    def fluid(self) -> np.ndarray:
        return FLUID_MASK[self.labels]


@dataclass
class AgentState:
    position: np.ndarray        # eye position, world units
    pitch: float = 0.0
    yaw: float = 0.0
    fov: float = DEFAULT_FOV
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3).copy()

    def copy(self) -> "AgentState":
        return AgentState(self.position.copy(), self.pitch, self.yaw, self.fov,
                          self.velocity.copy())


# --------------------------------------------------------------------------
# actions


def make_action(forward=False, back=False, left=False, right=False, jump=False,
                yaw_bin: int = 4, pitch_bin: int = 4) -> np.ndarray:
    """23-bit multi-hot action: 5 keys + two 9-bin mouse one-hots."""
    if not (0 <= yaw_bin < 9 and 0 <= pitch_bin < 9):
        raise WorldError("bad-action")
    bits = np.zeros(N_ACTION_BITS, dtype=np.uint8)
    for i, pressed in enumerate((forward, back, left, right, jump)):
        bits[i] = 1 if pressed else 0
    bits[YAW_BIN_OFFSET + yaw_bin] = 1
    bits[PITCH_BIN_OFFSET + pitch_bin] = 1
    return bits


NO_OP = make_action()


def validate_action(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if bits.shape[0] != N_ACTION_BITS or np.any(bits > 1):
        raise WorldError("bad-action")
    if bits[YAW_BIN_OFFSET:YAW_BIN_OFFSET + 9].sum() != 1:
        raise WorldError("bad-action")
    if bits[PITCH_BIN_OFFSET:PITCH_BIN_OFFSET + 9].sum() != 1:
        raise WorldError("bad-action")
    return bits


def decode_action(bits):
    """-> (forward, back, left, right, jump, d_yaw, d_pitch)."""
    bits = validate_action(bits)
    yaw_bin = int(np.argmax(bits[YAW_BIN_OFFSET:YAW_BIN_OFFSET + 9]))
    pitch_bin = int(np.argmax(bits[PITCH_BIN_OFFSET:PITCH_BIN_OFFSET + 9]))
    return (*(bool(b) for b in bits[:5]), MOUSE_BINS[yaw_bin], MOUSE_BINS[pitch_bin])


# --------------------------------------------------------------------------
# terrain generation


def _value_noise_2d(rng: np.random.Generator, nx: int, nz: int, cell: float) -> np.ndarray:
    """Bilinear value noise in [0,1], lattice spacing `cell`."""
    gx = int(nx / cell) + 2
    gz = int(nz / cell) + 2
    lattice = rng.random((gx, gz))
    xs = np.arange(nx, dtype=np.float64) / cell
    zs = np.arange(nz, dtype=np.float64) / cell
    x0 = xs.astype(np.int64)
    z0 = zs.astype(np.int64)
    fx = xs - x0
    fz = zs - z0
    fx = fx * fx * (3 - 2 * fx)
    fz = fz * fz * (3 - 2 * fz)
    a = lattice[x0][:, z0]
    b = lattice[x0 + 1][:, z0]
    c = lattice[x0][:, z0 + 1]
    d = lattice[x0 + 1][:, z0 + 1]
    return (a * (1 - fx[:, None]) + b * fx[:, None]) * (1 - fz[None, :]) + \
           (c * (1 - fx[:, None]) + d * fx[:, None]) * fz[None, :]


def surface_height(grid: VoxelGrid, x: int, z: int) -> int:
    """Index of the highest solid voxel in the column (-1 if none)."""
    column = SOLID_MASK[grid.labels[x, :, z]]
    idx = np.nonzero(column)[0]
    return int(idx[-1]) if idx.size else -1


def generate_world(seed: int, dims) -> VoxelGrid:
    """Layered value-noise terrain with water pools and sparse trees."""
    X, Y, Z = (int(d) for d in dims)
    if X < 32 or Y < 16 or Z < 32:
        raise WorldError("world-too-small")
    rng = np.random.default_rng(np.uint64(seed))

    base = Y * 0.33
    noise = _value_noise_2d(rng, X, Z, cell=14.0) * 2.0 - 1.0
    noise += 0.5 * (_value_noise_2d(rng, X, Z, cell=5.0) * 2.0 - 1.0)
    heights = np.clip(np.round(base + noise * Y * 0.22), 2, Y - 8).astype(np.int64)
    water_level = int(base) - 1

    ys = np.arange(Y)[None, :, None]
    h = heights[:, None, :]
    labels = np.zeros((X, Y, Z), dtype=np.uint16)
    labels[np.broadcast_to(ys < h - 2, labels.shape)] = STONE
    labels[np.broadcast_to((ys >= h - 2) & (ys < h), labels.shape)] = DIRT
    surface = ys == h
    beach = h <= water_level + 1
    labels[np.broadcast_to(surface & beach, labels.shape)] = SAND
    labels[np.broadcast_to(surface & ~beach, labels.shape)] = GRASS
    labels[np.broadcast_to((ys > h) & (ys <= water_level), labels.shape)] = WATER

    # sparse trees on grass, kept clear of the top layer
    n_trees = max(2, (X * Z) // 400)
    for _ in range(n_trees):
        tx = int(rng.integers(2, X - 2))
        tz = int(rng.integers(2, Z - 2))
        th = int(heights[tx, tz])
        if labels[tx, th, tz] != GRASS or th + 5 > Y - 2:
            continue
        labels[tx, th + 1:th + 4, tz] = WOOD
        labels[tx - 1:tx + 2, th + 4:th + 6, tz - 1:tz + 2] = LEAVES
        labels[tx, th + 4, tz] = WOOD
    return VoxelGrid(labels)


def step_dynamics(grid: VoxelGrid) -> VoxelGrid:
    """One synchronous water-spread tick.

    Air becomes fluid if fluid sits directly above, or if a laterally
    adjacent fluid voxel is itself supported from below. Solids never change.
    """
    labels = grid.labels
    fluid = FLUID_MASK[labels]
    air = labels == AIR

    above = np.zeros_like(fluid)
    above[:, :-1, :] = fluid[:, 1:, :]

    supported = np.ones_like(fluid)
    supported[:, 1:, :] = labels[:, :-1, :] != AIR
    src = fluid & supported
    lateral = np.zeros_like(fluid)
    lateral[1:, :, :] |= src[:-1, :, :]
    lateral[:-1, :, :] |= src[1:, :, :]
    lateral[:, :, 1:] |= src[:, :, :-1]
    lateral[:, :, :-1] |= src[:, :, 1:]

    new = labels.copy()
    new[air & (above | lateral)] = WATER
    return VoxelGrid(new)


# --------------------------------------------------------------------------
# agent kinematics


def _box_cells(lo: np.ndarray, hi: np.ndarray, dims):
    """Voxel index ranges overlapping the open box (lo, hi) with positive measure."""
    lo_i = np.floor(lo + 1e-9).astype(np.int64)
    hi_i = np.floor(hi - 1e-9).astype(np.int64)
    lo_i = np.maximum(lo_i, 0)
    hi_i = np.minimum(hi_i, np.array(dims) - 1)
    return lo_i, hi_i


def _box_hits_solid(solid: np.ndarray, center: np.ndarray) -> bool:
    lo = center + np.array([-AGENT_RADIUS, -EYE_HEIGHT, -AGENT_RADIUS])
    hi = center + np.array([AGENT_RADIUS, HEAD_ROOM, AGENT_RADIUS])
    lo_i, hi_i = _box_cells(lo, hi, solid.shape)
    if np.any(lo_i > hi_i):
        return False
    return bool(solid[lo_i[0]:hi_i[0] + 1, lo_i[1]:hi_i[1] + 1,
                      lo_i[2]:hi_i[2] + 1].any())


def _sweep_axis(solid: np.ndarray, pos: np.ndarray, axis: int, delta: float):
    """Move pos along one axis, clamping at the first blocking voxel face.

    Returns (new position, blocked flag). Slide semantics: other axes keep
    their values.
    """
    ext_lo = np.array([-AGENT_RADIUS, -EYE_HEIGHT, -AGENT_RADIUS])
    ext_hi = np.array([AGENT_RADIUS, HEAD_ROOM, AGENT_RADIUS])
    dims = np.array(solid.shape, dtype=np.float64)
    new = pos.copy()
    new[axis] += delta

    # grid boundary acts as a wall
    bound_lo = -ext_lo[axis]
    bound_hi = dims[axis] - ext_hi[axis]
    blocked = False
    if new[axis] < bound_lo:
        new[axis] = bound_lo
        blocked = True
    elif new[axis] > bound_hi:
        new[axis] = bound_hi
        blocked = True

    if not _box_hits_solid(solid, new):
        return new, blocked

    # clamp against the nearest blocking face in the direction of travel
    lo = new + ext_lo
    hi = new + ext_hi
    lo_i, hi_i = _box_cells(lo, hi, solid.shape)
    sub = solid[lo_i[0]:hi_i[0] + 1, lo_i[1]:hi_i[1] + 1, lo_i[2]:hi_i[2] + 1]
    coords = np.argwhere(sub)
    coords[:, 0] += lo_i[0]
    coords[:, 1] += lo_i[1]
    coords[:, 2] += lo_i[2]
    if delta > 0:
        face = coords[:, axis].min()           # lowest blocking face ahead
        new[axis] = face - ext_hi[axis]
    else:
        face = coords[:, axis].max() + 1       # highest blocking face behind
        new[axis] = face - ext_lo[axis]
    return new, True


def step_agent(grid: VoxelGrid, s: AgentState, a) -> AgentState:
    """One kinematics tick: mouse turn, keyed movement, gravity, collision."""
    forward, back, left, right, jump, d_yaw, d_pitch = decode_action(a)
    out = s.copy()
    out.yaw = geometry.wrap_angle(s.yaw + d_yaw)
    out.pitch = max(-geometry.PITCH_LIMIT, min(geometry.PITCH_LIMIT, s.pitch + d_pitch))

    solid = grid.solid()

    fwd = np.array([math.cos(out.yaw), 0.0, -math.sin(out.yaw)])
    rgt = np.array([math.sin(out.yaw), 0.0, math.cos(out.yaw)])
    move = fwd * (int(forward) - int(back)) + rgt * (int(right) - int(left))
    norm = np.linalg.norm(move)
    if norm > 0:
        move = move / norm * MOVE_SPEED

    _, on_ground = _sweep_axis(solid, out.position, 1, -1e-6)
    if jump and on_ground:
        out.velocity[1] = JUMP_SPEED
    out.velocity[1] += GRAVITY

    pos, blocked_y = _sweep_axis(solid, out.position, 1, out.velocity[1])
    if blocked_y:
        out.velocity[1] = 0.0
    pos, _ = _sweep_axis(solid, pos, 0, move[0])
    pos, _ = _sweep_axis(solid, pos, 2, move[2])
    out.position = pos
    return out


def camera_from_agent(s: AgentState) -> CameraState:
    """World-coordinate camera at the agent's eye."""
    return CameraState.from_euler(s.position, s.pitch, s.yaw, s.fov)


def frame_local_camera(s: AgentState, anchor: np.ndarray, frame_side: int) -> CameraState:
    """Camera expressed in the agent-centred frame's coordinates."""
    local = s.position - anchor + frame_side // 2
    return CameraState.from_euler(local, s.pitch, s.yaw, s.fov)


# --------------------------------------------------------------------------
# reference renderer


def render_reference(grid: VoxelGrid, c: CameraState, h: int, w: int,
                     d_far: float | None = None) -> np.ndarray:
    """Raycast render: first solid/fluid hit, face-shaded, depth-attenuated."""
    dims = np.array(grid.dims, dtype=np.float64)
    if np.any(c.pos < 0) or np.any(c.pos > dims):
        raise WorldError("camera-out-of-bounds")
    if d_far is None:
        d_far = default_d_far(grid.dims)
    occupancy = grid.solid() | grid.fluid()
    origins, dirs = geometry.pixel_rays(c, h, w)
    cells, depths, valid, axes, signs = traverse_batch(
        occupancy, origins.reshape(-1, 3), dirs.reshape(-1, 3), 1, d_far)

    rgb = np.tile(SKY_COLOR, (h * w, 1))
    hit = valid[:, 0]
    if hit.any():
        cc = cells[hit, 0]
        labels = grid.labels[cc[:, 0], cc[:, 1], cc[:, 2]]
        face = np.full(cc.shape[0], 0.8)
        vertical = axes[hit, 0] == 1
        face[vertical & (signs[hit, 0] < 0)] = 1.0   # entered through the top
        face[vertical & (signs[hit, 0] > 0)] = 0.6   # entered through the bottom
        atten = np.maximum(0.4, 1.0 - depths[hit, 0] / d_far)
        rgb[hit] = PALETTE_RGB[labels] * (face * atten)[:, None]
    return np.clip(rgb.reshape(h, w, 3), 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# world frames


def extract_world_frame(grid: VoxelGrid, anchor, frame_side: int) -> np.ndarray:
    """S^3 label window with `anchor` at index (S/2,)*3; out-of-bounds = air."""
    S = int(frame_side)
    if S < 8 or S % 2 != 0:
        raise WorldError("frame side must be even and >= 8")
    anchor = np.asarray(anchor, dtype=np.int64).reshape(3)
    lo = anchor - S // 2
    hi = lo + S
    dims = np.array(grid.dims)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(hi, dims)
    out = np.zeros((S, S, S), dtype=np.uint16)
    if np.all(src_lo < src_hi):
        dst_lo = src_lo - lo
        dst_hi = src_hi - lo
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            grid.labels[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    return out


# --------------------------------------------------------------------------
# scripted policies


def _nearest_bin(target: float) -> int:
    return int(np.argmin(np.abs(MOUSE_BINS - target)))


def _turn_sequence(total: float, n: int) -> list[int]:
    """n yaw bins whose centers track `total` radians with greedy rounding."""
    bins = []
    cum = 0.0
    for t in range(n):
        want = total * (t + 1) / n - cum
        b = _nearest_bin(want)
        cum += MOUSE_BINS[b]
        bins.append(b)
    return bins


def run_policy(mode: str, seed: int, n_steps: int) -> np.ndarray:
    """Deterministic scripted action sequence, shape (n_steps, 23) uint8."""
    if mode not in POLICY_MODES:
        raise WorldError(f"unknown policy mode: {mode}")
    if n_steps < 1:
        raise WorldError("n_steps must be >= 1")
    rng = np.random.default_rng(np.uint64(seed))
    actions: list[np.ndarray] = []

    if mode == "orbit":
        steps_per_rev = 32
        while len(actions) < n_steps:
            for b in _turn_sequence(2 * math.pi, steps_per_rev):
                actions.append(make_action(left=True, yaw_bin=b))
    elif mode in ("forward_look", "backward_look"):
        key = {"forward_look": {"forward": True}, "backward_look": {"back": True}}[mode]
        look = _turn_sequence(2 * math.pi, 32)
        while len(actions) < n_steps:
            for _ in range(8):
                actions.append(make_action(**key))
            for b in look:
                actions.append(make_action(yaw_bin=b))
    else:  # free_play
        snippets = [
            lambda k: [make_action(forward=True)] * k,
            lambda k: [make_action(back=True)] * k,
            lambda k: [make_action(left=True)] * k,
            lambda k: [make_action(right=True)] * k,
            lambda k: [make_action(forward=True, yaw_bin=6)] * k,
            lambda k: [make_action(forward=True, yaw_bin=2)] * k,
            lambda k: [make_action(yaw_bin=8)] * k,
            lambda k: [make_action(yaw_bin=0)] * k,
            lambda k: [make_action(forward=True, jump=True)] * k,
            lambda k: [make_action(pitch_bin=6)] * (k // 2) + [make_action(pitch_bin=2)] * (k - k // 2),
        ]
        while len(actions) < n_steps:
            pick = int(rng.integers(len(snippets)))
            k = int(rng.integers(3, 9))
            actions.extend(snippets[pick](k))
    return np.stack(actions[:n_steps]).astype(np.uint8)


# --------------------------------------------------------------------------
# trajectories and datasets

SCHEMA_VERSION = 1


@dataclass
class Trajectory:
    actions: np.ndarray        # (n, 23) uint8
    cameras: np.ndarray        # (n, 10) float32, frame-local
    frames: np.ndarray         # (n, h, w, 3) float32
    world: np.ndarray          # (n, S, S, S) uint16
    seed: int
    policy_mode: str

    @property
    def n(self) -> int:
        return self.actions.shape[0]


@dataclass
class DatasetConfig:
    out_dir: str
    n_traj: int = 4
    n_steps: int = 32
    seed: int = 0
    dims: tuple = (64, 24, 64)
    frame_side: int = 16
    h: int = 32
    w: int = 32
    fov: float = DEFAULT_FOV
    policy_modes: tuple = POLICY_MODES
    world_seed: int = -1    # >= 0 pins every trajectory to one shared world


def spawn_agent(grid: VoxelGrid, fov: float = DEFAULT_FOV) -> AgentState:
    """Place the agent's feet on the surface near the grid center."""
    X, _, Z = grid.dims
    x, z = X // 2, Z // 2
    h = surface_height(grid, x, z)
    pos = np.array([x + 0.5, h + 1 + EYE_HEIGHT, z + 0.5])
    return AgentState(position=pos, fov=fov)


def replay_trajectory(world_seed: int, actions: np.ndarray, dims=(64, 24, 64),
                      frame_side: int = 16, h: int = 32, w: int = 32,
                      fov: float = DEFAULT_FOV,
                      policy_mode: str = "external") -> Trajectory:
    """Roll the ground-truth environment under a given action sequence.

    Row 0 is the initialisation step and is treated as NO-OP regardless of
    its content (the environment does not advance before the first frame).
    """
    actions = np.asarray(actions, dtype=np.uint8)
    if actions.ndim != 2 or actions.shape[0] < 1:
        raise WorldError("need at least one action row")
    n_steps = actions.shape[0]
    grid = generate_world(world_seed, dims)
    agent = spawn_agent(grid, fov)

    out_actions = actions.copy()
    out_actions[0] = NO_OP
    cameras = np.zeros((n_steps, 10), dtype=np.float32)
    frames = np.zeros((n_steps, h, w, 3), dtype=np.float32)
    world = np.zeros((n_steps, frame_side, frame_side, frame_side), dtype=np.uint16)

    for t in range(n_steps):
        if t > 0:
            grid = step_dynamics(grid)
            agent = step_agent(grid, agent, out_actions[t])
        anchor = np.floor(agent.position).astype(np.int64)
        world[t] = extract_world_frame(grid, anchor, frame_side)
        cameras[t] = frame_local_camera(agent, anchor, frame_side).to_vector()
        frames[t] = render_reference(grid, camera_from_agent(agent), h, w)
    return Trajectory(out_actions, cameras, frames, world, seed=world_seed,
                      policy_mode=policy_mode)


def simulate_trajectory(world_seed: int, policy_mode: str, policy_seed: int,
                        n_steps: int, dims=(64, 24, 64), frame_side: int = 16,
                        h: int = 32, w: int = 32, fov: float = DEFAULT_FOV) -> Trajectory:
    """Roll the ground-truth environment for n_steps (step 0 is the NO-OP init)."""
    acts = run_policy(policy_mode, policy_seed, max(1, n_steps - 1))
    actions = np.concatenate([NO_OP[None], acts])[:n_steps]
    return replay_trajectory(world_seed, actions, dims, frame_side, h, w, fov,
                             policy_mode=policy_mode)


def save_trajectory(traj: Trajectory, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traj.actions.astype("<u1").tofile(out_dir / "actions.u8")
    traj.cameras.astype("<f4").tofile(out_dir / "cameras.f32")
    traj.frames.astype("<f4").tofile(out_dir / "frames.f32")
    traj.world.astype("<u2").tofile(out_dir / "world.u16")
    n, h, w, _ = traj.frames.shape
    meta = {
        "schema_version": SCHEMA_VERSION,
        "n": n, "h": h, "w": w, "S": traj.world.shape[1],
        "palette": [{"id": p[0], "name": p[1], "rgb": list(p[2]),
                     "solid": p[3], "fluid": p[4]} for p in PALETTE],
        "policy_mode": traj.policy_mode,
        "seed": traj.seed,
        "fields": {
            "actions.u8": {"dtype": "<u1", "shape": [n, N_ACTION_BITS]},
            "cameras.f32": {"dtype": "<f4", "shape": [n, 10]},
            "frames.f32": {"dtype": "<f4", "shape": [n, h, w, 3]},
            "world.u16": {"dtype": "<u2", "shape": [n] + [traj.world.shape[1]] * 3},
        },
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_trajectory(traj_dir: Path) -> Trajectory:
    traj_dir = Path(traj_dir)
    meta = json.loads((traj_dir / "meta.json").read_text(encoding="utf-8"))
    fields = meta["fields"]

    def read(name):
        spec = fields[name]
        arr = np.fromfile(traj_dir / name, dtype=np.dtype(spec["dtype"]))
        return arr.reshape(spec["shape"])

    return Trajectory(
        actions=read("actions.u8"),
        cameras=read("cameras.f32"),
        frames=read("frames.f32"),
        world=read("world.u16"),
        seed=meta["seed"],
        policy_mode=meta["policy_mode"],
    )


def collect_dataset(cfg: DatasetConfig) -> Path:
    """Generate and persist cfg.n_traj trajectories; the manifest commits last."""
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(cfg.n_traj):
        mode = cfg.policy_modes[i % len(cfg.policy_modes)]
        traj_seed = cfg.seed * 100003 + i
        world_seed = cfg.world_seed if cfg.world_seed >= 0 else traj_seed
        traj = simulate_trajectory(
            world_seed=world_seed, policy_mode=mode, policy_seed=traj_seed + 1,
            n_steps=cfg.n_steps, dims=cfg.dims, frame_side=cfg.frame_side,
            h=cfg.h, w=cfg.w, fov=cfg.fov)
        name = f"traj_{i:04d}"
        save_trajectory(traj, root / name)
        names.append(name)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "trajectories": names,
        "config": {
            "n_traj": cfg.n_traj, "n_steps": cfg.n_steps, "seed": cfg.seed,
            "dims": list(cfg.dims), "S": cfg.frame_side, "h": cfg.h, "w": cfg.w,
            "fov": cfg.fov, "policy_modes": list(cfg.policy_modes),
            "world_seed": cfg.world_seed,
        },
    }
    (root / "dataset.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return root


def load_dataset(root: Path) -> list[Trajectory]:
    """Load every trajectory listed in the manifest; unlisted dirs are ignored."""
    root = Path(root)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise WorldError(f"no dataset manifest under {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    out = []
    for name in manifest["trajectories"]:
        tdir = root / name
        if (tdir / "meta.json").exists():
            out.append(load_trajectory(tdir))
    return out


def dataset_hash(root: Path) -> str:
    """Stable content hash over every file of a dataset directory."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
