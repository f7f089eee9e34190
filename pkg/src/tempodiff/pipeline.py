"""Training and inference orchestration.

The flow mirrors a person-specific avatar build: pretrain a style-token prior
on a multi-style corpus, fine-tune two control stages on one person's sequence,
then render Stage I (coarse outline), threshold it into parsing maps, and
render Stage II from those maps.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .conditioning import extract_parsing_map, stage1_stacks, stage2_stacks
from .denoiser import (
    NULL_TOKEN,
    STAGE_CHANNELS,
    ControlledUNet,
    DenoiserConfig,
    adapt_control_channels,
    set_train_mode,
    zero_conv,
)
from .samplers import FramePrediction, TemporalSamplerConfig, generate_sequence
from .schedule import PixelCodec, VarianceSchedule, make_linear_schedule, training_loss
from .synthscene import SequenceData, _to_png

log = logging.getLogger(__name__)

# Blend presets per stage; the published method gives no numbers for these.
STAGE1_SAMPLER = TemporalSamplerConfig(w_c=0.4, w_p=0.6, w_n=0.0)
STAGE2_SAMPLER = TemporalSamplerConfig(w_c=0.8, w_p=0.2, w_n=0.05)
MORPH_GUIDANCE = 7.5
MORPH_GUIDANCE_ALT = 5.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    grad_accum: int = 4
    learning_rate: float = 1e-4
    prompt_drop_prob: float = 0.5
    mode: str = "unlocked"
    stage: str = "stage1"
    seed: int = 0
    grad_clip: float = 1.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.mode not in ("unlocked", "locked"):
            raise ValueError(f"mode must be unlocked or locked, got {self.mode!r}")
        if self.stage not in ("prior", "stage1", "stage2"):
            raise ValueError(f"stage must be prior, stage1 or stage2, got {self.stage!r}")
        if not 0.0 <= self.prompt_drop_prob <= 1.0:
            raise ValueError("prompt_drop_prob must lie in [0, 1]")
        for name in ("batch_size", "grad_accum"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def desk_epochs(n_frames: int, batch_size: int = 16, target_steps: int = 20_000) -> int:
    """Epoch count giving roughly ``target_steps`` mini-batches."""
    per_epoch = max(1, -(-n_frames // batch_size))
    return max(1, round(target_steps / per_epoch))


@dataclass
class TrainResult:
    model: ControlledUNet
    epoch_losses: List[float]
    config: TrainConfig
    null_fraction: float = 0.0
    n_samples: int = 0
    config_hash: str = ""

    def meta(self) -> dict:
        return {
            "train_config": asdict(self.config),
            "config_hash": self.config_hash,
            "epoch_losses": self.epoch_losses,
            "null_fraction": self.null_fraction,
        }


@contextlib.contextmanager
def _seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def new_model(config: Optional[DenoiserConfig] = None, seed: int = 0) -> ControlledUNet:
    with _seeded(seed):
        return ControlledUNet(config or DenoiserConfig())


def batch_objective(model, x0, t, eps, tokens, controls, schedule: VarianceSchedule, strength: float = 1.0):
    """Noise-prediction loss on a batch (x0 already in model space)."""

    def denoiser(x_t, steps, tok, ctrl):
        return model(x_t, torch.as_tensor(np.asarray(steps), dtype=torch.long), tok, ctrl, strength)

    return training_loss(denoiser, x0, t, eps, tokens, controls, schedule)


def train_denoiser(
    model: ControlledUNet,
    frames: np.ndarray,
    tokens: np.ndarray,
    config: TrainConfig,
    schedule: VarianceSchedule,
    controls: Optional[np.ndarray] = None,
    codec=None,
) -> TrainResult:
    """Optimise ``model`` in place; returns per-epoch mean losses.

    Token dropping replaces individual samples' tokens with the null token.
    Gradients accumulate over ``grad_accum`` mini-batches in a fixed order.
    """
    codec = codec or PixelCodec()
    x_all = codec.encode(torch.as_tensor(np.asarray(frames), dtype=torch.float32))
    tok_all = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    c_all = None if controls is None else torch.as_tensor(np.asarray(controls), dtype=torch.float32)
    if c_all is not None and c_all.shape[1] != model.config.control_channels:
        raise ValueError(f"controls have {c_all.shape[1]} channels, model expects {model.config.control_channels}")
    n = len(x_all)
    if n == 0:
        raise ValueError("no training frames")

    set_train_mode(model, config.mode)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    n_updates = max(1, config.epochs * -(-n // config.batch_size) // config.grad_accum)
    sched_lr = None
    if config.lr_schedule == "cosine":
        sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=n_updates)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    losses, n_null, n_seen = [], 0, 0
    model.train()
    micro = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(perm[start:start + config.batch_size])
            b = len(idx)
            tok = tok_all[idx].clone()
            drop = torch.as_tensor(rng.random(b) < config.prompt_drop_prob)
            tok[drop] = NULL_TOKEN
            n_null += int(drop.sum())
            n_seen += b
            t = rng.integers(1, schedule.T + 1, size=b)
            eps = torch.randn(x_all[idx].shape, generator=gen)
            ctrl = None if c_all is None else c_all[idx]
            loss = batch_objective(model, x_all[idx], t, eps, tok, ctrl, schedule)
            (loss / config.grad_accum).backward()
            micro += 1
            if micro % config.grad_accum == 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
                opt.step()
                opt.zero_grad(set_to_none=True)
                if sched_lr is not None and sched_lr.last_epoch < n_updates:
                    sched_lr.step()
            total += float(loss.detach()) * b
            count += b
        losses.append(total / count)
        log.debug("epoch %d loss %.5f", epoch, losses[-1])
    if micro % config.grad_accum:
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        opt.zero_grad(set_to_none=True)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    return TrainResult(
        model,
        losses,
        config,
        null_fraction=n_null / max(n_seen, 1),
        n_samples=n_seen,
        config_hash=config.digest(),
    )


# ------------------------------------------------------------------- training


def pretrain_prior(
    corpus: Sequence[SequenceData],
    config: TrainConfig,
    schedule: Optional[VarianceSchedule] = None,
    denoiser_config: Optional[DenoiserConfig] = None,
) -> TrainResult:
    """Token-conditioned base model over a multi-style corpus (control branch unused)."""
    styles = {seq.style_id for seq in corpus}
    if len(styles) < 2:
        raise ValueError(f"prior corpus needs at least two styles, got {sorted(styles)}")
    resolutions = {seq.manifest.resolution for seq in corpus}
    if len(resolutions) != 1:
        raise ValueError(f"mixed resolutions in corpus: {sorted(resolutions)}")
    schedule = schedule or make_linear_schedule()
    cfg = denoiser_config or DenoiserConfig(n_tokens=max(5, max(styles) + 1))
    if max(styles) >= cfg.n_tokens:
        raise ValueError(f"style {max(styles)} has no token slot (n_tokens={cfg.n_tokens})")
    model = new_model(cfg, config.seed)
    frames = np.concatenate([seq.frames for seq in corpus])
    tokens = np.concatenate([np.full(len(seq), seq.style_id) for seq in corpus])
    return train_denoiser(model, frames, tokens, config.replace(stage="prior"), schedule)


def prepare_control_branch(base: ControlledUNet, stage: str, seed: int = 0) -> ControlledUNet:
    """Copy of ``base`` with a fresh hint encoder, duplicated encoder and zero connectors."""
    k = STAGE_CHANNELS[stage]
    with _seeded(seed):
        model = adapt_control_channels(base, k)
        if k == base.config.control_channels:
            fresh = ControlledUNet(model.config)
            model.hint.load_state_dict(fresh.hint.state_dict())
        w = model.config.base_width
        model.connectors = torch.nn.ModuleList([zero_conv(w), zero_conv(2 * w), zero_conv(2 * w)])
    model.copy_base_into_control()
    return model


def _finetune(base, frames, controls, token, config, schedule, stage) -> TrainResult:
    if controls.shape[1] != STAGE_CHANNELS[stage]:
        raise ValueError(f"{stage} needs {STAGE_CHANNELS[stage]}-channel controls, got {controls.shape[1]}")
    model = prepare_control_branch(base, stage, config.seed)
    tokens = np.full(len(frames), token)
    return train_denoiser(model, frames, tokens, config.replace(stage=stage), schedule, controls)


def finetune_stage1(
    base: ControlledUNet,
    sequence: SequenceData,
    config: TrainConfig,
    schedule: Optional[VarianceSchedule] = None,
    controls: Optional[np.ndarray] = None,
) -> TrainResult:
    """Unlocked fine-tuning on 5-frame rendering stacks."""
    if config.mode != "unlocked":
        raise ValueError("stage 1 is trained in unlocked mode")
    if controls is None:
        controls = stage1_stacks(sequence.renderings, sequence.pupils)
    return _finetune(base, sequence.frames, controls, sequence.style_id, config, schedule or make_linear_schedule(), "stage1")


def finetune_stage2(
    base: ControlledUNet,
    sequence: SequenceData,
    config: TrainConfig,
    schedule: Optional[VarianceSchedule] = None,
    controls: Optional[np.ndarray] = None,
) -> TrainResult:
    """Fine-tuning on (true mask, rendering, motion map) stacks.

    Only the sequence's own masks are read, so this never depends on a Stage I model.
    """
    if controls is None:
        controls = stage2_stacks(sequence.masks, sequence.renderings, sequence.pupils)
    return _finetune(base, sequence.frames, controls, sequence.style_id, config, schedule or make_linear_schedule(), "stage2")


# ------------------------------------------------------------------ inference


def render_sequence(
    model: ControlledUNet,
    controls: np.ndarray,
    token: int,
    config: TemporalSamplerConfig,
    schedule: VarianceSchedule,
    codec=None,
) -> np.ndarray:
    """Frames in [0, 1], shape (N, C, H, W)."""
    codec = codec or PixelCodec()
    controls = np.asarray(controls)
    shape = (model.config.in_channels,) + controls.shape[-2:]
    preds = generate_sequence(model, controls, token, config, schedule, state_shape=shape)
    return np.stack([codec.decode(p.final_state).numpy() for p in preds]).astype(np.float64)


def _check_stage(model: Optional[ControlledUNet], stage: str) -> None:
    if model is None:
        raise ValueError(f"missing {stage} checkpoint")
    if model.config.control_channels != STAGE_CHANNELS[stage]:
        raise ValueError(
            f"{stage} model takes {model.config.control_channels}-channel controls, expected {STAGE_CHANNELS[stage]}"
        )


def infer_two_stage(
    stage1: ControlledUNet,
    stage2: ControlledUNet,
    renderings: np.ndarray,
    pupils: Optional[Sequence],
    token: int,
    config1: TemporalSamplerConfig = STAGE1_SAMPLER,
    config2: TemporalSamplerConfig = STAGE2_SAMPLER,
    schedule: Optional[VarianceSchedule] = None,
    out_dir: Optional[Path] = None,
    frame_indices: Optional[Sequence[int]] = None,
) -> Dict[str, np.ndarray]:
    """Stage I frames -> parsing maps -> Stage II stacks -> final frames.

    ``frame_indices`` renders only those frames (in the given order) while the
    temporal stacks are still built from the whole rendering sequence.
    """
    _check_stage(stage1, "stage1")
    _check_stage(stage2, "stage2")
    if config1.w_p < config2.w_p:
        log.warning("stage-1 w_p (%s) below stage-2 w_p (%s)", config1.w_p, config2.w_p)
    schedule = schedule or make_linear_schedule()
    renderings = np.asarray(renderings)
    idx = np.arange(len(renderings)) if frame_indices is None else np.asarray(frame_indices, dtype=int)
    t0 = time.perf_counter()
    c1 = stage1_stacks(renderings, pupils)[idx]
    frames1 = render_sequence(stage1, c1, token, config1, schedule)
    parsing = np.stack([extract_parsing_map(f).mask for f in frames1])
    full_parsing = np.zeros(renderings.shape, dtype=np.uint8)
    full_parsing[idx] = parsing
    c2 = stage2_stacks(full_parsing, renderings, pupils)[idx]
    frames2 = render_sequence(stage2, c2, token, config2, schedule)
    elapsed = time.perf_counter() - t0
    result = {"frames": frames2, "stage1_frames": frames1, "parsing": parsing, "stage2_controls": c2}
    if out_dir is not None:
        write_inference(Path(out_dir), result, {"stage1": config1.to_dict(), "stage2": config2.to_dict()}, elapsed)
    return result


def write_inference(out_dir: Path, result: Dict[str, np.ndarray], configs: dict, elapsed: float) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i, frame in enumerate(result["frames"]):
        entry = {"frame": f"frame_{i:05d}.png"}
        _to_png(out_dir / entry["frame"], frame)
        if "stage1_frames" in result:
            entry["stage1"] = f"{i:05d}_stage1.png"
            _to_png(out_dir / entry["stage1"], result["stage1_frames"][i])
            entry["parsing"] = f"{i:05d}_parsing.png"
            _to_png(out_dir / entry["parsing"], result["parsing"][i].astype(np.float64))
            for role, ch in zip(("rendering", "motion"), result["stage2_controls"][i][1:]):
                entry[role] = f"{i:05d}_{role}.png"
                _to_png(out_dir / entry[role], ch)
        files.append(entry)
    manifest = {
        "configs": configs,
        "S": {k: v.get("S") for k, v in configs.items()},
        "tau": {k: v.get("tau") for k, v in configs.items()},
        "seed": {k: v.get("seed") for k, v in configs.items()},
        "frames": files,
        "timing_seconds": elapsed,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def morph_inference(
    stage2: ControlledUNet,
    controls: np.ndarray,
    target_token: int,
    strength: float,
    guidance_scale: float = MORPH_GUIDANCE,
    config: TemporalSamplerConfig = STAGE2_SAMPLER,
    schedule: Optional[VarianceSchedule] = None,
) -> np.ndarray:
    """Render with a (locked-base) Stage II model under a different style token."""
    _check_stage(stage2, "stage2")
    if not 0 <= int(target_token) < stage2.config.n_tokens:
        raise ValueError(f"unknown token {target_token}")
    cfg = config.replace(strength=float(strength), guidance_scale=float(guidance_scale))
    return render_sequence(stage2, controls, int(target_token), cfg, schedule or make_linear_schedule())


def composite_background(frames: np.ndarray, masks: np.ndarray, background: np.ndarray) -> np.ndarray:
    """``mask * frame + (1 - mask) * background`` per frame."""
    frames = np.asarray(frames, dtype=np.float64)
    masks = np.asarray(masks)
    background = np.asarray(background, dtype=np.float64)
    single = frames.ndim == 3
    if single:
        frames, masks = frames[None], masks[None]
    if masks.shape != (frames.shape[0],) + frames.shape[2:]:
        raise ValueError(f"mask shape {masks.shape} does not match frames {frames.shape}")
    if background.shape != frames.shape[1:]:
        raise ValueError(f"background shape {background.shape} does not match frame {frames.shape[1:]}")
    if not np.isin(masks, (0, 1)).all():
        raise ValueError("masks must be binary")
    m = masks[:, None].astype(np.float64)
    out = m * frames + (1.0 - m) * background[None]
    return out[0] if single else out
