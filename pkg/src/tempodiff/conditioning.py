"""Control-signal builders.

Stage I sees five consecutive grayscale renderings (frames n-2 .. n+2), each
with its pupils drawn in. Stage II sees (parsing map, rendering with pupils,
motion map), where the motion map is the 1/6, 1/3, 1/3, 1/6 weighted sum of
the renderings at n-2, n-1, n+1, n+2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_closing

from .synthscene import BACKGROUND_RGB

MOTION_WEIGHTS = (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)
STAGE1_OFFSETS = (-2, -1, 0, 1, 2)
MOTION_OFFSETS = (-2, -1, 1, 2)
DEFAULT_PUPIL_RADIUS = 2.0  # at 32x32
PARSING_THRESHOLD = 0.1

Point = Tuple[float, float]


@dataclass
class ControlStack:
    channels: np.ndarray  # (k, H, W)
    stage: str
    frame_index: int = 0

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        expected = {"stage1": 5, "stage2": 3}.get(self.stage)
        if expected is None:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.channels.ndim != 3 or self.channels.shape[0] != expected:
            raise ValueError(f"{self.stage} stacks need shape ({expected}, H, W), got {self.channels.shape}")
        if self.channels.min() < 0.0 or self.channels.max() > 1.0:
            raise ValueError("control channels must lie in [0, 1]")


@dataclass
class MotionMap:
    values: np.ndarray  # (H, W), clamped to [0, 1]


@dataclass
class ParsingMap:
    mask: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("parsing map must be binary")
        self.mask = self.mask.astype(np.uint8)


def draw_pupils(rendering: np.ndarray, pupils: Optional[Sequence[Point]], radius: Optional[float] = None) -> np.ndarray:
    """Filled discs of intensity 1.0 at each ``(x, y)`` pupil position.

    A pixel belongs to the disc when its centre is strictly closer than ``radius``.
    """
    out = np.array(rendering, dtype=np.float64, copy=True)
    if not pupils:
        return out
    h, w = out.shape
    if radius is None:
        radius = DEFAULT_PUPIL_RADIUS * h / 32.0
    yy, xx = np.mgrid[0:h, 0:w]
    for x, y in pupils:
        if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
            raise ValueError(f"pupil ({x}, {y}) outside the {w}x{h} image")
        out[(xx - x) ** 2 + (yy - y) ** 2 < radius ** 2] = 1.0
    return out


def build_stage1_stack(
    renderings: Sequence[np.ndarray],
    pupils: Optional[Sequence[Optional[Sequence[Point]]]] = None,
    frame_index: int = 0,
    radius: Optional[float] = None,
) -> ControlStack:
    """Stack renderings n-2 .. n+2 (in that order) with optional pupil overlays."""
    if len(renderings) != 5:
        raise ValueError(f"stage-1 stacks need 5 renderings, got {len(renderings)}")
    if pupils is None:
        pupils = [None] * 5
    if len(pupils) != 5:
        raise ValueError(f"need 5 pupil entries (or None), got {len(pupils)}")
    chans = [draw_pupils(r, p, radius) for r, p in zip(renderings, pupils)]
    return ControlStack(np.stack(chans), "stage1", frame_index)


def build_motion_map(r_nm2, r_nm1, r_np1, r_np2) -> MotionMap:
    imgs = [np.asarray(r, dtype=np.float64) for r in (r_nm2, r_nm1, r_np1, r_np2)]
    if any(im.shape != imgs[0].shape for im in imgs):
        raise ValueError("motion map inputs must share one shape")
    acc = sum(wt * im for wt, im in zip(MOTION_WEIGHTS, imgs))
    return MotionMap(np.clip(acc, 0.0, 1.0))


def build_stage2_stack(parsing: ParsingMap, rendering: np.ndarray, motion: MotionMap, frame_index: int = 0) -> ControlStack:
    mask = parsing.mask.astype(np.float64)
    rendering = np.asarray(rendering, dtype=np.float64)
    if not (mask.shape == rendering.shape == motion.values.shape):
        raise ValueError(f"shape mismatch: {mask.shape}, {rendering.shape}, {motion.values.shape}")
    return ControlStack(np.stack([mask, rendering, motion.values]), "stage2", frame_index)


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return 0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]


def extract_parsing_map(
    stage1_rgb: np.ndarray,
    threshold: float = PARSING_THRESHOLD,
    background: Sequence[float] = BACKGROUND_RGB,
) -> ParsingMap:
    """Foreground where luminance departs from the background's by more than ``threshold``.

    One 3x3 closing pass fills pinholes; the image is edge-padded first so the
    closing does not erode foreground touching the border.
    """
    bg = luminance(np.asarray(background, dtype=np.float64).reshape(3, 1, 1))
    fg = np.abs(luminance(stage1_rgb) - bg) > threshold
    padded = np.pad(fg, 1, mode="edge")
    closed = binary_closing(padded, structure=np.ones((3, 3), dtype=bool))[1:-1, 1:-1]
    return ParsingMap(closed.astype(np.uint8))


def sequence_boundary_policy(frame_index: int, sequence_length: int, offsets: Sequence[int] = MOTION_OFFSETS) -> list:
    """Neighbour indices with out-of-range entries clamped to the nearest valid frame."""
    if sequence_length < 1 or not 0 <= frame_index < sequence_length:
        raise ValueError(f"frame {frame_index} invalid for length {sequence_length}")
    return [min(max(frame_index + o, 0), sequence_length - 1) for o in offsets]


# ------------------------------------------------------------ whole sequences


def stage1_stacks(renderings: np.ndarray, pupils: Optional[Sequence] = None) -> np.ndarray:
    """(N, 5, H, W) stage-1 controls for every frame of a sequence."""
    n = len(renderings)
    with_pupils = [draw_pupils(renderings[i], pupils[i] if pupils is not None else None) for i in range(n)]
    out = []
    for i in range(n):
        idx = sequence_boundary_policy(i, n, STAGE1_OFFSETS)
        out.append(np.stack([with_pupils[j] for j in idx]))
    return np.stack(out)


def motion_maps(renderings: np.ndarray) -> np.ndarray:
    n = len(renderings)
    out = []
    for i in range(n):
        idx = sequence_boundary_policy(i, n, MOTION_OFFSETS)
        out.append(build_motion_map(*(renderings[j] for j in idx)).values)
    return np.stack(out)


def stage2_stacks(masks: np.ndarray, renderings: np.ndarray, pupils: Optional[Sequence] = None) -> np.ndarray:
    """(N, 3, H, W) stage-2 controls from per-frame parsing masks."""
    motion = motion_maps(renderings)
    out = []
    for i in range(len(renderings)):
        rend = draw_pupils(renderings[i], pupils[i] if pupils is not None else None)
        out.append(build_stage2_stack(ParsingMap(masks[i]), rend, MotionMap(motion[i]), i).channels)
    return np.stack(out)
