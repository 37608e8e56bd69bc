"""Camera algebra shared by every module.

Conventions (fixed once, used everywhere):
  - world axes: +y is up, +x/+z span the ground plane
  - at pitch = yaw = 0 the camera looks along +x, up is +y, right is +z
  - yaw rotates about world +y, pitch about the camera-local right axis
  - rotation matrices map camera-local vectors to world vectors; rot6 is
    the first two columns (forward, up), stored column-major r1 then r2
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PITCH_LIMIT = math.pi / 2 - 1e-3
FOV_MIN = 0.3
FOV_MAX = 2.5


class GeometryError(ValueError):
    pass


@dataclass
class CameraState:
    """10-dim camera: position (frame-local), 6D rotation, vertical fov."""

    pos: np.ndarray
    rot6: np.ndarray
    fov: float

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(3)
        self.rot6 = np.asarray(self.rot6, dtype=np.float64).reshape(6)
        self.fov = float(self.fov)

    def to_vector(self) -> np.ndarray:
        """Serialize as 10 floats: pos x,y,z, rot6 x6, fov."""
        return np.concatenate([self.pos, self.rot6, [self.fov]]).astype(np.float32)

    @classmethod
    def from_vector(cls, v) -> "CameraState":
        v = np.asarray(v, dtype=np.float64).reshape(10)
        return cls(pos=v[:3], rot6=v[3:9], fov=v[9])

    @classmethod
    def from_euler(cls, pos, pitch: float, yaw: float, fov: float) -> "CameraState":
        return cls(pos=pos, rot6=rot6_from_euler(pitch, yaw), fov=fov)


@dataclass
class CameraResidual:
    """Absolute position plus pitch/yaw/fov deltas relative to the previous camera."""

    pos: np.ndarray
    d_pitch: float
    d_yaw: float
    d_fov: float

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(3)
        self.d_pitch = float(self.d_pitch)
        self.d_yaw = float(self.d_yaw)
        self.d_fov = float(self.d_fov)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pos, [self.d_pitch, self.d_yaw, self.d_fov]])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def rot6_from_euler(pitch: float, yaw: float) -> np.ndarray:
    """First two columns of R = R_yaw(+y) @ R_pitch(camera right axis)."""
    return matrix_from_euler(pitch, yaw)[:, :2].T.reshape(6).copy()


def matrix_from_euler(pitch: float, yaw: float) -> np.ndarray:
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    r_pitch = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    r_yaw = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    return r_yaw @ r_pitch


def matrix_from_rot6(rot6) -> np.ndarray:
    """Gram-Schmidt the two stored columns; third column by cross product."""
    rot6 = np.asarray(rot6, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(rot6)):
        raise GeometryError("degenerate-rot6")
    r1, r2 = rot6[:3], rot6[3:]
    n1 = np.linalg.norm(r1)
    if n1 < 1e-8:
        raise GeometryError("degenerate-rot6")
    c1 = r1 / n1
    u2 = r2 - np.dot(c1, r2) * c1
    n2 = np.linalg.norm(u2)
    if n2 < 1e-8:
        raise GeometryError("degenerate-rot6")
    c2 = u2 / n2
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def euler_from_rot6(rot6) -> tuple[float, float]:
    """Recover (pitch, yaw) from the forward column."""
    f = matrix_from_rot6(rot6)[:, 0]
    pitch = math.asin(max(-1.0, min(1.0, f[1])))
    yaw = math.atan2(-f[2], f[0])
    return pitch, yaw


def residual_between(prev: CameraState, next_: CameraState) -> CameraResidual:
    p0, y0 = euler_from_rot6(prev.rot6)
    p1, y1 = euler_from_rot6(next_.rot6)
    return CameraResidual(
        pos=next_.pos.copy(),
        d_pitch=p1 - p0,
        d_yaw=wrap_angle(y1 - y0),
        d_fov=next_.fov - prev.fov,
    )


def apply_residual(prev: CameraState, r: CameraResidual) -> CameraState:
    pitch, yaw = euler_from_rot6(prev.rot6)
    pitch = max(-PITCH_LIMIT, min(PITCH_LIMIT, pitch + r.d_pitch))
    yaw = wrap_angle(yaw + r.d_yaw)
    fov = max(FOV_MIN, min(FOV_MAX, prev.fov + r.d_fov))
    return CameraState(pos=r.pos.copy(), rot6=rot6_from_euler(pitch, yaw), fov=fov)


def pixel_ray_directions(c: CameraState, h: int, w: int) -> np.ndarray:
    """Unit ray directions through pixel centers, shape (h, w, 3).

    Pinhole with vertical fov; row 0 is the top of the image.
    """
    if h < 1 or w < 1:
        raise GeometryError("resolution must be >= 1")
    tan_half = math.tan(c.fov / 2)
    aspect = w / h
    i = np.arange(h, dtype=np.float64)
    j = np.arange(w, dtype=np.float64)
    v = -(((i + 0.5) / h) * 2.0 - 1.0) * tan_half           # up component
    u = (((j + 0.5) / w) * 2.0 - 1.0) * tan_half * aspect   # right component
    vv, uu = np.meshgrid(v, u, indexing="ij")
    local = np.stack([np.ones_like(vv), vv, uu], axis=-1)
    local /= np.linalg.norm(local, axis=-1, keepdims=True)
    rot = matrix_from_rot6(c.rot6)
    return local @ rot.T


def pixel_rays(c: CameraState, h: int, w: int):
    """Origins (h,w,3) and unit directions (h,w,3) for every pixel."""
    dirs = pixel_ray_directions(c, h, w)
    origins = np.broadcast_to(c.pos, dirs.shape).copy()
    return origins, dirs


def plucker_map(c: CameraState, h: int, w: int) -> np.ndarray:
    """Per-pixel (direction, moment) with moment = origin x direction; (h,w,6)."""
    dirs = pixel_ray_directions(c, h, w)
    moments = np.cross(np.broadcast_to(c.pos, dirs.shape), dirs)
    return np.concatenate([dirs, moments], axis=-1)
