"""scikit-learn style wrappers around the training and sampling functions.

    prior = DiffusionPrior(epochs=20).fit(frames, tokens)
    stage = ControlStage("stage2", base=prior.model_).fit(controls, frames)
    video = stage.predict(controls)

``get_params``/``set_params``/``clone`` come from ``BaseEstimator``; fitted
state lives in trailing-underscore attributes.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .conditioning import stage1_stacks, stage2_stacks
from .denoiser import STAGE_CHANNELS, ControlledUNet, DenoiserConfig, load_checkpoint
from .metrics import psnr
from .pipeline import (
    STAGE1_SAMPLER,
    STAGE2_SAMPLER,
    TrainConfig,
    _finetune,
    infer_two_stage,
    new_model,
    render_sequence,
    train_denoiser,
)
from .samplers import TemporalSamplerConfig
from .schedule import make_linear_schedule
from .validation import check_images, check_masks, check_pupils, check_renderings, check_tokens


class _TrainParamsMixin:
    def _train_config(self, stage: str) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            grad_accum=self.grad_accum,
            learning_rate=self.learning_rate,
            prompt_drop_prob=self.prompt_drop_prob,
            mode=getattr(self, "mode", "unlocked"),
            stage=stage,
            seed=self.seed,
            lr_schedule=self.lr_schedule,
        )

    def _schedule(self):
        return make_linear_schedule(self.n_steps, self.beta_start, self.beta_end)


def _resolve_base(base) -> ControlledUNet:
    if base is None:
        raise ValueError("a pretrained base model (or checkpoint path) is required")
    if isinstance(base, ControlledUNet):
        return base
    if hasattr(base, "model_"):
        return base.model_
    model, _ = load_checkpoint(base)
    return model


class DiffusionPrior(_TrainParamsMixin, BaseEstimator):
    """Style-token conditioned base denoiser.

    ``fit(X, y)`` takes frames (N, 3, H, W) in [0, 1] and integer style tokens.
    """

    def __init__(
        self,
        epochs: int = 200,
        batch_size: int = 16,
        grad_accum: int = 4,
        learning_rate: float = 1e-4,
        prompt_drop_prob: float = 0.5,
        lr_schedule: str = "constant",
        seed: int = 0,
        n_steps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        base_width: int = 32,
        n_tokens: int = 5,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.grad_accum = grad_accum
        self.learning_rate = learning_rate
        self.prompt_drop_prob = prompt_drop_prob
        self.lr_schedule = lr_schedule
        self.seed = seed
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.base_width = base_width
        self.n_tokens = n_tokens

    def fit(self, X, y):
        X = check_images(X, channels=3)
        y = check_tokens(y, len(X), self.n_tokens)
        if len(np.unique(y)) < 2:
            raise ValueError("the prior needs frames from at least two styles")
        cfg = DenoiserConfig(base_width=self.base_width, n_tokens=self.n_tokens)
        self.schedule_ = self._schedule()
        result = train_denoiser(new_model(cfg, self.seed), X, y, self._train_config("prior"), self.schedule_)
        self.model_ = result.model
        self.loss_curve_ = result.epoch_losses
        self.null_fraction_ = result.null_fraction
        self.styles_ = np.unique(y)
        return self

    def sample(self, token: int, n_samples: int = 1, S: int = 30, seed: int = 0, resolution: int = 32) -> np.ndarray:
        """Unconditioned-by-control samples for ``token``; independent noise per sample."""
        check_is_fitted(self, "model_")
        out = []
        for i in range(n_samples):
            cfg = TemporalSamplerConfig(S=S, tau=1, seed=seed + i, strength=0.0)
            blank = np.zeros((1, self.model_.config.control_channels, resolution, resolution))
            out.append(render_sequence(self.model_, blank, token, cfg, self.schedule_)[0])
        return np.stack(out)


class ControlStage(_TrainParamsMixin, BaseEstimator):
    """One control stage: ``fit(controls, frames)`` then ``predict(controls)`` renders a video.

    ``predict`` treats its input as one ordered sequence and applies the
    temporal blend between consecutive frames.
    """

    def __init__(
        self,
        stage: str = "stage1",
        base=None,
        mode: str = "unlocked",
        token: int = 1,
        epochs: int = 200,
        batch_size: int = 16,
        grad_accum: int = 4,
        learning_rate: float = 1e-4,
        prompt_drop_prob: float = 0.5,
        lr_schedule: str = "constant",
        seed: int = 0,
        n_steps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        sampler: Optional[TemporalSamplerConfig] = None,
    ):
        self.stage = stage
        self.base = base
        self.mode = mode
        self.token = token
        self.epochs = epochs
        self.batch_size = batch_size
        self.grad_accum = grad_accum
        self.learning_rate = learning_rate
        self.prompt_drop_prob = prompt_drop_prob
        self.lr_schedule = lr_schedule
        self.seed = seed
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.sampler = sampler

    def _sampler(self) -> TemporalSamplerConfig:
        if self.sampler is not None:
            return self.sampler
        return STAGE1_SAMPLER if self.stage == "stage1" else STAGE2_SAMPLER

    def fit(self, X, y):
        if self.stage not in STAGE_CHANNELS:
            raise ValueError(f"stage must be one of {sorted(STAGE_CHANNELS)}, got {self.stage!r}")
        X = check_images(X, channels=STAGE_CHANNELS[self.stage], name="controls")
        y = check_images(y, channels=3, name="frames")
        if len(X) != len(y) or X.shape[-2:] != y.shape[-2:]:
            raise ValueError(f"controls {X.shape} and frames {y.shape} do not line up")
        self.schedule_ = self._schedule()
        base = _resolve_base(self.base)
        result = _finetune(base, y, X, self.token, self._train_config(self.stage), self.schedule_, self.stage)
        self.model_ = result.model
        self.loss_curve_ = result.epoch_losses
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, channels=STAGE_CHANNELS[self.stage], name="controls")
        return render_sequence(self.model_, X, self.token, self._sampler(), self.schedule_)

    def score(self, X, y) -> float:
        """Mean PSNR of the rendered sequence against ``y``."""
        pred = self.predict(X)
        y = check_images(y, channels=3, name="frames")
        return float(np.mean([psnr(p, t) for p, t in zip(pred, y)]))


class TwoStageAvatar(_TrainParamsMixin, BaseEstimator):
    """Stage I + Stage II cascade driven by grayscale renderings.

    ``fit(X, y, masks=..., pupils=...)`` trains both stages in unlocked mode
    from the same base; Stage II sees the true masks, never Stage I output.
    """

    def __init__(
        self,
        base=None,
        token: int = 1,
        epochs: int = 200,
        batch_size: int = 16,
        grad_accum: int = 4,
        learning_rate: float = 1e-4,
        prompt_drop_prob: float = 0.5,
        lr_schedule: str = "constant",
        seed: int = 0,
        n_steps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
        stage1_sampler: TemporalSamplerConfig = STAGE1_SAMPLER,
        stage2_sampler: TemporalSamplerConfig = STAGE2_SAMPLER,
    ):
        self.base = base
        self.token = token
        self.epochs = epochs
        self.batch_size = batch_size
        self.grad_accum = grad_accum
        self.learning_rate = learning_rate
        self.prompt_drop_prob = prompt_drop_prob
        self.lr_schedule = lr_schedule
        self.seed = seed
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.stage1_sampler = stage1_sampler
        self.stage2_sampler = stage2_sampler

    def fit(self, X, y, masks=None, pupils=None):
        R = check_renderings(X)
        y = check_images(y, channels=3, name="frames")
        if masks is None:
            raise ValueError("fit needs the true parsing masks for stage II")
        masks = check_masks(masks, y)
        pupils = check_pupils(pupils, len(R))
        self.schedule_ = self._schedule()
        base = _resolve_base(self.base)
        c1 = stage1_stacks(R, pupils)
        c2 = stage2_stacks(masks, R, pupils)
        r1 = _finetune(base, y, c1, self.token, self._train_config("stage1"), self.schedule_, "stage1")
        r2 = _finetune(base, y, c2, self.token, self._train_config("stage2"), self.schedule_, "stage2")
        self.stage1_, self.stage2_ = r1.model, r2.model
        self.loss_curves_ = {"stage1": r1.epoch_losses, "stage2": r2.epoch_losses}
        return self

    def predict(self, X, pupils=None, return_intermediates: bool = False):
        check_is_fitted(self, ["stage1_", "stage2_"])
        R = check_renderings(X)
        pupils = check_pupils(pupils, len(R))
        out = infer_two_stage(
            self.stage1_, self.stage2_, R, pupils, self.token, self.stage1_sampler, self.stage2_sampler, self.schedule_
        )
        return out if return_intermediates else out["frames"]
