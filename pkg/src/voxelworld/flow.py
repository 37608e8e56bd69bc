"""Rectified flow matching: linear noising path, CFM loss, Euler sampler with
a warped step schedule, per-frame training noise and context noising."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad
from .grad import Tensor

SIGMA_MIN = 1e-5
DEFAULT_STEPS = 20
DEFAULT_ETA = 3.0
TAU_CTX_WORLD = 0.02
TAU_CTX_PIXEL = 0.1
CROSS_AUG = 0.1


class FlowError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Descending noise grid: taus[0] = 1, taus[K] = sigma_min."""

    steps: int
    eta: float
    sigma_min: float
    taus: np.ndarray

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=np.float64)
        if self.taus[0] != 1.0 or self.taus[-1] != self.sigma_min:
            raise FlowError("schedule endpoints must be 1 and sigma_min")
        if np.any(np.diff(self.taus) >= 0):
            raise FlowError("schedule must be strictly decreasing")


def schedule_warp(u, eta: float):
    """Progress-to-noise warp f(u) = eta*u / (1 + (eta-1)*u)."""
    u = np.asarray(u, dtype=np.float64)
    return eta * u / (1.0 + (eta - 1.0) * u)


def make_schedule(steps: int = DEFAULT_STEPS, eta: float = DEFAULT_ETA,
                  sigma_min: float = SIGMA_MIN) -> NoiseSchedule:
    if steps < 1:
        raise FlowError("steps must be >= 1")
    if eta <= 0:
        raise FlowError("eta must be > 0")
    u = np.arange(steps, -1, -1, dtype=np.float64) / steps
    taus = np.maximum(sigma_min, schedule_warp(u, eta))
    taus[0] = 1.0
    return NoiseSchedule(steps=steps, eta=eta, sigma_min=sigma_min, taus=taus)


def noise_sample(x0: np.ndarray, x1: np.ndarray, tau: float) -> np.ndarray:
    """Linear path point (1-tau)*x0 + tau*x1."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise FlowError(f"shape mismatch {x0.shape} vs {x1.shape}")
    if not 0.0 <= tau <= 1.0:
        raise FlowError("tau must lie in [0, 1]")
    if tau == 0.0:
        return x0.copy()
    if tau == 1.0:
        return x1.copy()
    return (1.0 - tau) * x0 + tau * x1


def cfm_loss(v_pred: Tensor, x0: np.ndarray, x1: np.ndarray) -> Tensor:
    """Mean squared residual against the straight-line velocity x0 - x1."""
    target = np.asarray(x0, dtype=np.float32) - np.asarray(x1, dtype=np.float32)
    if v_pred.shape != target.shape:
        raise FlowError(f"shape mismatch {v_pred.shape} vs {target.shape}")
    return grad.mean(grad.mul(grad.sub(v_pred, Tensor(target)),
                              grad.sub(v_pred, Tensor(target))))


def sample(model, schedule: NoiseSchedule, x1: np.ndarray, cond=None) -> np.ndarray:
    """Euler-integrate the learned velocity from noise down the tau grid.

    model(x_tau, tau, cond) -> velocity array of x1's shape.
    """
    x = np.asarray(x1, dtype=np.float32).copy()
    for k in range(schedule.steps):
        tau = float(schedule.taus[k])
        d = tau - float(schedule.taus[k + 1])
        v = np.asarray(model(x, tau, cond), dtype=np.float32)
        if v.shape != x.shape:
            raise FlowError(f"model output shape {v.shape} != {x.shape}")
        x = x + v * d
    return x


def assign_training_noise(n_frames: int, rng: np.random.Generator,
                          sigma_min: float = SIGMA_MIN) -> np.ndarray:
    """Independent per-frame noise levels, tau_t ~ U[sigma_min, 1]."""
    if n_frames < 1:
        raise FlowError("n_frames must be >= 1")
    return rng.uniform(sigma_min, 1.0, size=n_frames)


def noise_context(latents: np.ndarray, tau_ctx: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Blend fresh standard-normal noise into context latents at tau_ctx."""
    latents = np.asarray(latents, dtype=np.float32)
    if not 0.0 <= tau_ctx <= 1.0:
        raise FlowError("tau_ctx must lie in [0, 1]")
    if tau_ctx == 0.0:
        return latents.copy()
    eps = rng.standard_normal(latents.shape).astype(np.float32)
    return noise_sample(latents, eps, tau_ctx).astype(np.float32)
