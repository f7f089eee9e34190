"""Image and sequence metrics on [0, 1] images shaped (C, H, W) or (H, W)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from skimage.metrics import structural_similarity

PSNR_CAP = 100.0
SSIM_WINDOW = 7


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return pred, target


def _mask_like(mask, img: np.ndarray) -> Optional[np.ndarray]:
    if mask is None:
        return None
    m = np.asarray(mask).astype(bool)
    if img.ndim == 3 and m.ndim == 2:
        m = np.broadcast_to(m, img.shape)
    if m.shape != img.shape:
        raise ValueError(f"mask shape {m.shape} does not fit image {img.shape}")
    if not m.any():
        raise ValueError("mask is empty")
    return m


def mse(pred, target, mask=None) -> float:
    pred, target = _pair(pred, target)
    sq = (pred - target) ** 2
    m = _mask_like(mask, pred)
    return float(sq.mean() if m is None else sq[m].mean())


def psnr(pred, target, mask=None) -> float:
    err = mse(pred, target, mask)
    if err < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def ssim(pred, target, mask=None) -> float:
    """Mean SSIM with a 7x7 uniform window; masked variant averages the SSIM map under the mask."""
    pred, target = _pair(pred, target)
    m = _mask_like(mask, pred)
    kw = dict(win_size=SSIM_WINDOW, data_range=1.0, gaussian_weights=False, full=True)
    if pred.ndim == 3:
        score, smap = structural_similarity(pred, target, channel_axis=0, **kw)
    else:
        score, smap = structural_similarity(pred, target, **kw)
    return float(score if m is None else smap[m].mean())


def smoothness(frames: Sequence[np.ndarray]) -> float:
    """Sum of MSEs between consecutive frames; lower is smoother."""
    if len(frames) < 2:
        raise ValueError("smoothness needs at least two frames")
    return float(sum(mse(frames[i], frames[i + 1]) for i in range(len(frames) - 1)))


@dataclass
class MetricReport:
    psnr: List[float]
    ssim: List[float]
    mse: List[float]
    masked_psnr: List[float] = field(default_factory=list)
    masked_ssim: List[float] = field(default_factory=list)
    masked_mse: List[float] = field(default_factory=list)
    smoothness: Optional[float] = None
    config: dict = field(default_factory=dict)

    @property
    def means(self) -> dict:
        out = {}
        for key in ("psnr", "ssim", "mse", "masked_psnr", "masked_ssim", "masked_mse"):
            vals = getattr(self, key)
            if vals:
                out[key] = float(np.mean(vals))
        return out

    def summary(self) -> dict:
        return {**self.means, "smoothness": self.smoothness, "n_frames": len(self.psnr), "config": self.config}

    def to_dict(self) -> dict:
        return {**asdict(self), "means": self.means}


def evaluate_frames(preds, targets, masks=None, config: Optional[dict] = None) -> MetricReport:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    rep = MetricReport(
        psnr=[psnr(p, t) for p, t in zip(preds, targets)],
        ssim=[ssim(p, t) for p, t in zip(preds, targets)],
        mse=[mse(p, t) for p, t in zip(preds, targets)],
        config=dict(config or {}),
    )
    if masks is not None:
        rep.masked_psnr = [psnr(p, t, m) for p, t, m in zip(preds, targets, masks)]
        rep.masked_ssim = [ssim(p, t, m) for p, t, m in zip(preds, targets, masks)]
        rep.masked_mse = [mse(p, t, m) for p, t, m in zip(preds, targets, masks)]
    if len(preds) >= 2:
        rep.smoothness = smoothness(preds)
    return rep


def palette_distance(frames, masks, palette) -> float:
    """Euclidean distance between the mean masked colour of ``frames`` and ``palette``."""
    from .synthscene import masked_mean_color

    return float(np.linalg.norm(masked_mean_color(frames, masks) - np.asarray(palette, dtype=np.float64)))
