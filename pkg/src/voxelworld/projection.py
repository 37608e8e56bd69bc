"""World-to-pixel projection: depth-ordered per-pixel stacks of voxel features.

The projection walks every pixel ray through the voxel grid in exact visit
order (integer grid traversal) and records the first `l` occupied cells with
the linear depth of their entry face. On an axis-aligned voxel grid this
produces the same depth-ordered list as rasterized depth peeling, which the
oracle test asserts against a brute-force ray/AABB intersector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraState, pixel_rays


class ProjectionError(ValueError):
    pass


@dataclass
class FeatureGrid:
    """Voxel features (S,S,S,m) plus occupancy (true where class != air)."""

    features: np.ndarray
    occupancy: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.occupancy = np.ascontiguousarray(self.occupancy, dtype=bool)
        if self.features.shape[:3] != self.occupancy.shape:
            raise ProjectionError("features/occupancy shape mismatch")

    @property
    def dims(self):
        return self.occupancy.shape

    @property
    def m(self) -> int:
        return self.features.shape[3]


@dataclass
class ProjectionStack:
    """Per-pixel layers: features (h,w,l,m), entry depths (h,w,l), valid mask.

    Valid layers form a prefix with strictly increasing depth; invalid layers
    carry zero features and the d_far sentinel depth.
    """

    features: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    d_far: float

    @property
    def l(self) -> int:
        return self.features.shape[2]

    @property
    def m(self) -> int:
        return self.features.shape[3]


def default_d_far(dims) -> float:
    """Longest possible in-box distance: the grid diagonal."""
    return float(math.sqrt(sum(float(d) ** 2 for d in dims)))


def traverse_batch(occupancy, origins, dirs, l: int, d_far: float):
    """Walk many rays through an occupancy grid simultaneously.

    origins/dirs: (n,3) with unit direction rows. Returns
    (cells (n,l,3) int64, depths (n,l) f64, valid (n,l) bool,
     axes (n,l) int8 entry-face axis or -1, signs (n,l) int8 step sign).
    Entry depths are clamped at 0 for the cell containing the origin.
    """
    occupancy = np.ascontiguousarray(occupancy, dtype=bool)
    dims = np.array(occupancy.shape, dtype=np.int64)
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = o.shape[0]

    out_cells = np.zeros((n, l, 3), dtype=np.int64)
    out_depth = np.full((n, l), d_far, dtype=np.float64)
    out_valid = np.zeros((n, l), dtype=bool)
    out_axis = np.full((n, l), -1, dtype=np.int8)
    out_sign = np.zeros((n, l), dtype=np.int8)

    moving = d != 0.0
    safe_inv = np.where(moving, 1.0 / np.where(moving, d, 1.0), 0.0)
    step = np.sign(d).astype(np.int64)

    # Slab intersection with the grid box [0, dims]^3.
    t_lo = (0.0 - o) * safe_inv
    t_hi = (dims - o) * safe_inv
    inside = (o >= 0.0) & (o <= dims)
    tmin = np.where(moving, np.minimum(t_lo, t_hi), np.where(inside, -np.inf, np.inf))
    tmax = np.where(moving, np.maximum(t_lo, t_hi), np.where(inside, np.inf, -np.inf))
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    enter_axis = tmin.argmax(axis=1)
    t_start = np.maximum(t_enter, 0.0)
    active = (t_enter <= t_exit) & (t_exit > 0.0) & (t_start <= d_far)

    # Current cell; the tiny nudge along the step resolves exact-boundary starts.
    p = o + t_start[:, None] * d
    cell = np.floor(p + step * 1e-9).astype(np.int64)
    cell = np.clip(cell, 0, dims - 1)
    entry_t = t_start.copy()
    cur_axis = np.where(t_enter > 0.0, enter_axis, -1).astype(np.int8)
    cur_sign = np.where(
        t_enter > 0.0, step[np.arange(n), enter_axis], 0
    ).astype(np.int8)

    t_next = np.where(
        step > 0,
        (cell + 1 - o) * safe_inv,
        np.where(step < 0, (cell - o) * safe_inv, np.inf),
    )
    t_next = np.where(moving, t_next, np.inf)
    t_delta = np.where(moving, np.abs(safe_inv), np.inf)

    hits = np.zeros(n, dtype=np.int64)
    idx = np.nonzero(active)[0]
    limit = np.minimum(d_far, t_exit)

    max_iter = int(dims.sum()) + 3
    for _ in range(max_iter):
        if idx.size == 0:
            break
        c = cell[idx]
        rec = occupancy[c[:, 0], c[:, 1], c[:, 2]] & (entry_t[idx] <= d_far)
        rr = idx[rec]
        if rr.size:
            k = hits[rr]
            out_cells[rr, k] = cell[rr]
            out_depth[rr, k] = np.maximum(entry_t[rr], 0.0)
            out_valid[rr, k] = True
            out_axis[rr, k] = cur_axis[rr]
            out_sign[rr, k] = cur_sign[rr]
            hits[rr] += 1

        a = np.argmin(t_next[idx], axis=1)
        tn = t_next[idx, a]
        entry_t[idx] = tn
        cell[idx, a] += step[idx, a]
        t_next[idx, a] += t_delta[idx, a]
        cur_axis[idx] = a.astype(np.int8)
        cur_sign[idx] = step[idx, a].astype(np.int8)

        oob = (cell[idx] < 0).any(axis=1) | (cell[idx] >= dims).any(axis=1)
        dead = oob | (tn > limit[idx]) | (hits[idx] >= l)
        idx = idx[~dead]

    return out_cells, out_depth, out_valid, out_axis, out_sign


def traverse_ray(occupancy, origin, direction, l: int, d_far: float):
    """Single-ray traversal: list of ((ix,iy,iz), entry_depth) in visit order."""
    if l < 1:
        raise ProjectionError("l must be >= 1")
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    if norm == 0:
        raise ProjectionError("zero direction")
    cells, depths, valid, _, _ = traverse_batch(
        occupancy, np.asarray(origin, dtype=np.float64)[None], (direction / norm)[None], l, d_far
    )
    return [
        (tuple(int(v) for v in cells[0, k]), float(depths[0, k]))
        for k in range(l)
        if valid[0, k]
    ]


def project(
    c: CameraState, fg: FeatureGrid, h: int, w: int, l: int, d_far: float | None = None
) -> ProjectionStack:
    """Depth-ordered stacks of voxel features for every pixel ray."""
    dims = fg.dims
    if np.any(c.pos < 0) or np.any(c.pos > np.array(dims, dtype=np.float64)):
        raise ProjectionError("camera-out-of-frame")
    if d_far is None:
        d_far = default_d_far(dims)
    origins, dirs = pixel_rays(c, h, w)
    cells, depths, valid, _, _ = traverse_batch(
        fg.occupancy, origins.reshape(-1, 3), dirs.reshape(-1, 3), l, d_far
    )
    m = fg.m
    feats = np.zeros((h * w, l, m), dtype=np.float32)
    rows, layers = np.nonzero(valid)
    hit = cells[rows, layers]
    feats[rows, layers] = fg.features[hit[:, 0], hit[:, 1], hit[:, 2]]
    return ProjectionStack(
        features=feats.reshape(h, w, l, m),
        depth=depths.reshape(h, w, l).astype(np.float32),
        valid=valid.reshape(h, w, l),
        d_far=float(d_far),
    )


def fuse(stack: ProjectionStack) -> np.ndarray:
    """Channel packing: per layer its m features then its depth; (h,w,l*(m+1))."""
    h, w, l, m = stack.features.shape
    packed = np.concatenate([stack.features, stack.depth[..., None]], axis=-1)
    return packed.reshape(h, w, l * (m + 1))


def unfuse(w2d: np.ndarray, l: int, m: int, d_far: float) -> ProjectionStack:
    """Inverse of fuse; valid layers are those below the d_far sentinel."""
    h, w, z = w2d.shape
    if z != l * (m + 1):
        raise ProjectionError(f"channel count {z} != l*(m+1) = {l * (m + 1)}")
    packed = w2d.reshape(h, w, l, m + 1)
    depth = packed[..., m].astype(np.float32)
    return ProjectionStack(
        features=packed[..., :m].astype(np.float32),
        depth=depth,
        valid=depth < d_far,
        d_far=d_far,
    )
