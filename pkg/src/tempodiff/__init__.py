"""Temporally blended, control-conditioned diffusion for synthetic head avatars."""

from .ablation import ablate_denoising, ablate_strength
from .conditioning import (
    ControlStack,
    MotionMap,
    ParsingMap,
    build_motion_map,
    build_stage1_stack,
    build_stage2_stack,
    draw_pupils,
    extract_parsing_map,
    sequence_boundary_policy,
)
from .denoiser import ControlledUNet, DenoiserConfig, load_checkpoint, predict_noise, save_checkpoint
from .estimators import ControlStage, DiffusionPrior, TwoStageAvatar
from .metrics import MetricReport, evaluate_frames, mse, psnr, smoothness, ssim
from .pipeline import (
    STAGE1_SAMPLER,
    STAGE2_SAMPLER,
    TrainConfig,
    composite_background,
    finetune_stage1,
    finetune_stage2,
    infer_two_stage,
    morph_inference,
    pretrain_prior,
)
from .samplers import (
    FramePrediction,
    TemporalSamplerConfig,
    ddim_step,
    ddpm_step,
    generate_sequence,
    guided_eps,
    sample_frame,
    temporal_blend,
)
from .schedule import NoisyState, VarianceSchedule, forward_diffuse, make_linear_schedule, training_loss
from .synthscene import HeadParams, SequenceData, generate_prior_corpus, generate_sequence_data

__version__ = "0.1.0"
