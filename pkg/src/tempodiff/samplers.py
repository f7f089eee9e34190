"""Reverse-process samplers: DDPM, deterministic DDIM, guidance and the
temporally blended DDIM used to render video sequences frame by frame.

Denoisers follow the ``ControlledUNet.forward`` signature:
``denoiser(x, t, tokens, control, strength) -> eps`` on batched tensors.
Single-step functions instead take ``eps_fn(values, t) -> eps``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .denoiser import NULL_TOKEN
from .schedule import NoisyState, VarianceSchedule

EpsFn = Callable[[object, int], object]


@dataclass(frozen=True)
class TemporalSamplerConfig:
    S: int = 30
    tau: int = 23
    w_c: float = 1.0
    w_p: float = 0.0
    w_n: float = 0.0
    guidance_scale: float = 1.0
    strength: float = 1.0
    seed: int = 0
    fresh_blend_noise: bool = True
    clip_x0: bool = True

    def __post_init__(self):
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")
        if not 1 <= self.tau <= self.S:
            raise ValueError(f"tau must lie in [1, S={self.S}], got {self.tau}")
        if min(self.w_c, self.w_p, self.w_n) < 0:
            raise ValueError("blend weights must be non-negative")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must lie in [0, 1], got {self.strength}")
        total = self.w_c + self.w_p + self.w_n
        if abs(total - 1.0) > 0.25:
            warnings.warn(f"blend weights sum to {total:.3f}; far from 1", stacklevel=3)

    def replace(self, **changes) -> "TemporalSamplerConfig":
        return TemporalSamplerConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FramePrediction:
    final_state: torch.Tensor  # x_0 of the frame, model space
    frame_index: int
    trajectory: List[torch.Tensor] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not torch.isfinite(torch.as_tensor(self.final_state)).all():
            raise ValueError(f"frame {self.frame_index} prediction is not finite")


# ---------------------------------------------------------------- DDPM / DDIM


def ddpm_step(eps_fn: EpsFn, state: NoisyState, schedule: VarianceSchedule, noise=None) -> NoisyState:
    """One ancestral step t -> t-1 with reverse variance beta_t.

    ``noise`` is the standard-normal draw scaled by sigma_t; pass ``None`` for a
    noise-free step.
    """
    t = state.timestep
    if t < 1:
        raise ValueError("cannot take a DDPM step from timestep 0")
    schedule.check_timestep(t)
    beta, alpha, abar = schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t)
    eps = eps_fn(state.values, t)
    mean = (state.values - (beta / math.sqrt(1.0 - abar)) * eps) / math.sqrt(alpha)
    if noise is not None:
        mean = mean + math.sqrt(beta) * noise
    return NoisyState(mean, t - 1)


def ddpm_sample(eps_fn: EpsFn, x_T, schedule: VarianceSchedule, rng: np.random.Generator) -> np.ndarray:
    """Full T-step ancestral chain on numpy arrays; no noise on the last step."""
    state = NoisyState(np.asarray(x_T, dtype=np.float64), schedule.T)
    while state.timestep > 0:
        noise = rng.standard_normal(state.values.shape) if state.timestep > 1 else None
        state = ddpm_step(eps_fn, state, schedule, noise)
    return state.values


def predict_x0(values, eps, t: int, schedule: VarianceSchedule):
    abar = schedule.alpha_bar(t)
    return (values - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)


def ddim_step(
    eps_fn: EpsFn,
    state: NoisyState,
    next_t: int,
    schedule: VarianceSchedule,
    eps=None,
    clip_x0: bool = False,
) -> NoisyState:
    """Deterministic (eta = 0) DDIM move from ``state.timestep`` to ``next_t``.

    With ``clip_x0`` the predicted clean sample is clamped to [-1, 1] and the
    noise direction re-derived from the clamped value.
    """
    t = state.timestep
    if next_t >= t:
        raise ValueError(f"DDIM must move to an earlier timestep ({t} -> {next_t})")
    schedule.check_timestep(t)
    schedule.check_timestep(next_t, allow_zero=True)
    if eps is None:
        eps = eps_fn(state.values, t)
    x0 = predict_x0(state.values, eps, t, schedule)
    if clip_x0:
        abar = schedule.alpha_bar(t)
        x0 = x0.clip(-1.0, 1.0)
        eps = (state.values - math.sqrt(abar) * x0) / math.sqrt(1.0 - abar)
    if next_t == 0:
        return NoisyState(x0, 0)
    abar_next = schedule.alpha_bar(next_t)
    return NoisyState(math.sqrt(abar_next) * x0 + math.sqrt(1.0 - abar_next) * eps, next_t)


def ddim_timesteps(T: int, S: int) -> np.ndarray:
    """S timesteps evenly spread from T (DDIM step 1) down to 1 (step S)."""
    if not 1 <= S <= T:
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    return np.round(np.linspace(T, 1, S)).astype(int)


def guided_eps(eps_uncond, eps_cond, scale: float):
    """Classifier-free guidance: ``uncond + scale * (cond - uncond)``."""
    if tuple(eps_uncond.shape) != tuple(eps_cond.shape):
        raise ValueError(f"shape mismatch {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


# ---------------------------------------------------------- temporal blending


def temporal_blend(current: NoisyState, previous: FramePrediction, config: TemporalSamplerConfig, noise) -> NoisyState:
    """``w_c * current + w_p * previous_x0 + w_n * noise`` at the same timestep."""
    prev = previous.final_state
    if tuple(current.values.shape) != tuple(prev.shape) or tuple(noise.shape) != tuple(prev.shape):
        raise ValueError(
            f"shape mismatch: current {tuple(current.values.shape)}, previous {tuple(prev.shape)}, "
            f"noise {tuple(noise.shape)}"
        )
    values = config.w_c * current.values + config.w_p * prev + config.w_n * noise
    return NoisyState(values, current.timestep)


def make_eps_fn(denoiser, token: int, control, config: TemporalSamplerConfig) -> EpsFn:
    """Bind a batched denoiser to one token/control, with guidance if requested."""
    ctrl = None if control is None else torch.as_tensor(control)[None]
    scale = config.guidance_scale
    if scale == 1.0:
        tokens = torch.tensor([int(token)])
    else:
        tokens = torch.tensor([NULL_TOKEN, int(token)])
        if ctrl is not None:
            ctrl = ctrl.expand(2, *ctrl.shape[1:])

    def eps_fn(values, t):
        x = values[None].expand(len(tokens), *values.shape)
        tt = torch.full((len(tokens),), int(t), dtype=torch.long)
        with torch.no_grad():
            out = denoiser(x, tt, tokens, ctrl, config.strength)
        if scale == 1.0:
            return out[0]
        return guided_eps(out[0], out[1], scale)

    return eps_fn


def blend_noise(config: TemporalSamplerConfig, frame_index: int, like: torch.Tensor, init_noise: torch.Tensor) -> torch.Tensor:
    if not config.fresh_blend_noise:
        return init_noise
    rng = np.random.default_rng([config.seed, frame_index])
    return torch.as_tensor(rng.standard_normal(tuple(like.shape)), dtype=like.dtype)


def initial_noise(config: TemporalSamplerConfig, shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    rng = np.random.default_rng(config.seed)
    return torch.as_tensor(rng.standard_normal(tuple(shape)), dtype=dtype)


def sample_frame(
    denoiser,
    control,
    token: int,
    config: TemporalSamplerConfig,
    schedule: VarianceSchedule,
    init_noise: torch.Tensor,
    previous: Optional[FramePrediction] = None,
    frame_index: int = 0,
    record_trajectory: bool = False,
) -> FramePrediction:
    """S deterministic DDIM steps from ``init_noise``.

    When ``previous`` is given, the state entering DDIM step ``tau`` (1-based,
    counted from the noisiest step) is replaced by its temporal blend with the
    previous frame's final prediction.
    """
    eps_fn = make_eps_fn(denoiser, token, control, config)
    ts = ddim_timesteps(schedule.T, config.S)
    state = NoisyState(init_noise, int(ts[0]))
    trajectory = []
    for i, t in enumerate(ts, start=1):
        if previous is not None and i == config.tau:
            noise = blend_noise(config, frame_index, state.values, init_noise)
            state = temporal_blend(state, previous, config, noise)
        if record_trajectory:
            trajectory.append(state.values.clone())
        next_t = int(ts[i]) if i < len(ts) else 0
        state = ddim_step(eps_fn, state, next_t, schedule, clip_x0=config.clip_x0)
    return FramePrediction(state.values, frame_index, trajectory)


def generate_sequence(
    denoiser,
    control_sequence,
    token: int,
    config: TemporalSamplerConfig,
    schedule: VarianceSchedule,
    state_shape: Sequence[int] = (3, 32, 32),
    record_trajectory: bool = False,
) -> List[FramePrediction]:
    """Render frames in order, each blended with its predecessor at step ``tau``.

    Every frame starts from the same initial noise drawn from ``config.seed``.
    """
    if control_sequence is None or len(control_sequence) == 0:
        raise ValueError("control sequence is empty")
    controls = torch.as_tensor(np.asarray(control_sequence), dtype=torch.float32)
    init = initial_noise(config, state_shape)
    frames: List[FramePrediction] = []
    previous = None
    for n in range(len(controls)):
        pred = sample_frame(
            denoiser, controls[n], token, config, schedule, init, previous, n, record_trajectory
        )
        frames.append(pred)
        previous = pred
    return frames
