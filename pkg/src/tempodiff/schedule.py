"""Variance schedules, the closed-form forward process and the noise-prediction loss.

Timesteps are 1-based: ``alpha_bars[t - 1]`` belongs to step ``t``. Step 0 is the
clean sample (``alpha_bar = 1``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class VarianceSchedule:
    """Beta sequence plus its derived alphas and cumulative products."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-d sequence")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        betas.setflags(write=False)
        alphas = 1.0 - betas
        alphas.setflags(write=False)
        alpha_bars = np.cumprod(alphas)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at step ``t``; 1.0 at ``t = 0``."""
        self.check_timestep(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alphas[t - 1])

    def check_timestep(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> VarianceSchedule:
    """Linearly spaced betas, both endpoints included."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta endpoints must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    return VarianceSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


@dataclass
class NoisyState:
    """An image-shaped value at a diffusion timestep.

    ``values`` is a numpy array or torch tensor of shape (channels, height, width).
    """

    values: object
    timestep: int

    def __post_init__(self):
        if int(self.timestep) != self.timestep or self.timestep < 0:
            raise ValueError(f"timestep must be a non-negative integer, got {self.timestep}")
        self.timestep = int(self.timestep)
        if not _all_finite(self.values):
            raise ValueError("NoisyState values contain NaN or Inf")


def _all_finite(x) -> bool:
    if hasattr(x, "isfinite"):  # torch
        import torch

        return bool(torch.isfinite(x).all())
    return bool(np.isfinite(np.asarray(x)).all())


def forward_diffuse(x0, t: int, eps, schedule: VarianceSchedule) -> NoisyState:
    """Jump straight to step ``t``: ``sqrt(abar) * x0 + sqrt(1 - abar) * eps``."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    abar = schedule.alpha_bar(t)
    if t == 0:
        return NoisyState(x0 * 1.0, 0)
    return NoisyState(math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps, t)


def training_loss(
    denoiser: Callable,
    x0,
    t,
    eps,
    text_cond: Optional[object],
    image_cond,
    schedule: VarianceSchedule,
):
    """Mean squared error between ``eps`` and the denoiser's prediction.

    ``denoiser(x_t, t, text_cond, image_cond)`` must return an array shaped like ``x0``.
    Works for single samples and for batches (``t`` then holds one step per sample).
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if np.ndim(t) == 0:
        x_t = forward_diffuse(x0, int(t), eps, schedule).values
    else:
        x_t = _batched_forward(x0, t, eps, schedule)
    pred = denoiser(x_t, t, text_cond, image_cond)
    if tuple(pred.shape) != tuple(eps.shape):
        raise ValueError(f"denoiser returned shape {tuple(pred.shape)}, expected {tuple(eps.shape)}")
    return ((eps - pred) ** 2).mean()


def _batched_forward(x0, t, eps, schedule: VarianceSchedule):
    abar = np.array([schedule.alpha_bar(int(s)) for s in np.asarray(t).ravel()])
    shape = (-1,) + (1,) * (x0.ndim - 1)
    if hasattr(x0, "new_tensor"):  # torch
        a = x0.new_tensor(np.sqrt(abar)).reshape(shape)
        b = x0.new_tensor(np.sqrt(1.0 - abar)).reshape(shape)
    else:
        a = np.sqrt(abar).reshape(shape)
        b = np.sqrt(1.0 - abar).reshape(shape)
    return a * x0 + b * eps


class PixelCodec:
    """Maps images in [0, 1] to the model's [-1, 1] working space and back.

    Stands in for a learned autoencoder; swap in any object with the same
    ``encode``/``decode`` pair to diffuse in another representation.
    """

    def encode(self, images):
        return images * 2.0 - 1.0

    def decode(self, values):
        out = (values + 1.0) * 0.5
        return out.clip(0.0, 1.0)
