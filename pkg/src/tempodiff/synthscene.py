"""Procedural head-proxy videos.

Each frame is a textured ellipse "head" on a black background. The head
moves with a yaw angle, opens its mouth, and moves its pupils. A grayscale
shaded rendering of the same ellipse (no texture, no colour) plays the role
of a 3DMM rendering, and the analytic silhouette is the ground-truth mask.
Style ids start at 1 so they double as style tokens (token 0 is the null token).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter1d

GENERATOR_VERSION = "headproxy/1"
BACKGROUND_RGB = (0.0, 0.0, 0.0)
YAW_RANGE = 0.5
SMOOTHING_WINDOW = 9

# fill, hair, texture kind
STYLES: Dict[int, Tuple[Tuple[float, float, float], Tuple[float, float, float], str]] = {
    1: ((0.95, 0.60, 0.25), (0.45, 0.25, 0.12), "stripes"),
    2: ((0.25, 0.50, 0.98), (0.20, 0.22, 0.45), "dots"),
    3: ((0.30, 0.92, 0.30), (0.22, 0.35, 0.12), "stripes"),
    4: ((0.95, 0.30, 0.95), (0.40, 0.15, 0.35), "dots"),
}
EYE_RGB = (0.95, 0.95, 0.95)
PUPIL_RGB = (0.15, 0.16, 0.40)
MOUTH_RGB = (0.50, 0.12, 0.12)


@dataclass(frozen=True)
class HeadParams:
    yaw: float
    mouth_open: float
    pupil_offset: Tuple[float, float]
    style_id: int

    def __post_init__(self):
        if not -YAW_RANGE <= self.yaw <= YAW_RANGE:
            raise ValueError(f"yaw {self.yaw} outside [-{YAW_RANGE}, {YAW_RANGE}]")
        if not 0.0 <= self.mouth_open <= 1.0:
            raise ValueError(f"mouth_open {self.mouth_open} outside [0, 1]")
        if any(not -1.0 <= v <= 1.0 for v in self.pupil_offset):
            raise ValueError(f"pupil_offset {self.pupil_offset} outside [-1, 1]^2")
        if self.style_id not in STYLES:
            raise ValueError(f"unknown style_id {self.style_id}")


@dataclass(frozen=True)
class TrajectoryConfig:
    """Amplitudes of the animation curves; all zeros gives a frozen head."""

    yaw_amplitudes: Tuple[float, float] = (0.28, 0.10)
    yaw_periods: Tuple[float, float] = (71.0, 23.0)
    mouth_amplitudes: Tuple[float, float] = (0.30, 0.15)
    mouth_periods: Tuple[float, float] = (17.0, 7.0)
    pupil_amplitudes: Tuple[float, float] = (0.6, 0.25)
    pupil_periods: Tuple[float, float] = (53.0, 13.0)
    noise_scale: float = 0.05
    max_yaw_velocity: float = 0.04
    mouth_rest: float = 0.35


@dataclass
class FrameRecord:
    frame_index: int
    ground_truth_rgb: np.ndarray  # (3, H, W)
    control_rendering: np.ndarray  # (H, W)
    true_mask: np.ndarray  # (H, W) uint8 {0, 1}
    pupil_points: Tuple[Tuple[float, float], Tuple[float, float]]  # ((x, y), (x, y)) pixels
    params: HeadParams


@dataclass
class SequenceManifest:
    seed: int
    length: int
    resolution: int
    style_id: int
    frames: List[Dict[str, str]] = field(default_factory=list)
    generator_version: str = GENERATOR_VERSION
    records: List[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


@dataclass
class SequenceData:
    """In-memory view of one sequence, arrays stacked over frames."""

    manifest: SequenceManifest
    records: List[FrameRecord]

    @property
    def frames(self) -> np.ndarray:
        return np.stack([r.ground_truth_rgb for r in self.records])

    @property
    def renderings(self) -> np.ndarray:
        return np.stack([r.control_rendering for r in self.records])

    @property
    def masks(self) -> np.ndarray:
        return np.stack([r.true_mask for r in self.records])

    @property
    def pupils(self) -> list:
        return [r.pupil_points for r in self.records]

    @property
    def style_id(self) -> int:
        return self.manifest.style_id

    def __len__(self):
        return len(self.records)

    def subset(self, indices: Sequence[int]) -> "SequenceData":
        recs = [self.records[i] for i in indices]
        man = SequenceManifest(
            seed=self.manifest.seed,
            length=len(recs),
            resolution=self.manifest.resolution,
            style_id=self.manifest.style_id,
        )
        return SequenceData(man, recs)


def _quantize(x: np.ndarray) -> np.ndarray:
    # 8-bit levels so PNG round trips are exact
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def _smooth_noise(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    raw = rng.standard_normal(n + 2 * SMOOTHING_WINDOW) * scale
    # sigma 2 truncated at 2 sigma -> 9-tap window
    sm = gaussian_filter1d(raw, sigma=2.0, truncate=2.0, mode="nearest")
    return sm[SMOOTHING_WINDOW:SMOOTHING_WINDOW + n]


def _curve(rng, n, amplitudes, periods, noise_scale) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    phases = rng.uniform(0.0, 2 * np.pi, size=2)
    out = np.zeros(n)
    for a, p, ph in zip(amplitudes, periods, phases):
        out += a * np.sin(2 * np.pi * idx / p + ph)
    noise = _smooth_noise(rng, n, noise_scale)
    return out + noise


def make_trajectory(seed: int, length: int, style_id: int, cfg: TrajectoryConfig = TrajectoryConfig()) -> List[HeadParams]:
    rng = np.random.default_rng(seed)
    yaw_raw = _curve(rng, length, cfg.yaw_amplitudes, cfg.yaw_periods, cfg.noise_scale)
    mouth = cfg.mouth_rest + _curve(rng, length, cfg.mouth_amplitudes, cfg.mouth_periods, cfg.noise_scale)
    px = _curve(rng, length, cfg.pupil_amplitudes, cfg.pupil_periods, cfg.noise_scale)
    py = _curve(rng, length, np.multiply(cfg.pupil_amplitudes, 0.5), cfg.pupil_periods[::-1], cfg.noise_scale)

    yaw = np.empty(length)
    yaw[0] = np.clip(yaw_raw[0], -YAW_RANGE, YAW_RANGE)
    cap = cfg.max_yaw_velocity
    for i in range(1, length):
        step = np.clip(yaw_raw[i] - yaw[i - 1], -cap, cap)
        yaw[i] = np.clip(yaw[i - 1] + step, -YAW_RANGE, YAW_RANGE)
    mouth = np.clip(mouth, 0.0, 1.0)
    px, py = np.clip(px, -1.0, 1.0), np.clip(py, -1.0, 1.0)
    return [
        HeadParams(float(yaw[i]), float(mouth[i]), (float(px[i]), float(py[i])), style_id)
        for i in range(length)
    ]


def head_geometry(params: HeadParams, resolution: int) -> dict:
    """Pixel-space layout of the head proxy (x = column, y = row)."""
    s = resolution / 32.0
    cx = resolution / 2.0 - 0.5 + params.yaw * 10.0 * s
    cy = resolution / 2.0 - 0.5 + 1.0 * s
    width_scale = 0.75 + 0.25 * np.cos(2.0 * params.yaw)
    face_shift = params.yaw * 4.0 * s
    eye_y = cy - 2.0 * s
    eyes = [(cx + face_shift + d * 3.6 * s * width_scale, eye_y) for d in (-1.0, 1.0)]
    pupils = tuple(
        (ex + params.pupil_offset[0] * 0.9 * s, ey + params.pupil_offset[1] * 0.9 * s) for ex, ey in eyes
    )
    return {
        "center": (cx, cy),
        "axes": (9.0 * s * width_scale, 11.0 * s),
        "face_shift": face_shift,
        "eyes": eyes,
        "eye_radius": 1.9 * s,
        "pupils": pupils,
        "pupil_radius": 1.0 * s,
        "mouth_center": (cx + face_shift, cy + 5.0 * s),
        "mouth_axes": (3.2 * s * width_scale, 0.6 * s + 2.2 * s * params.mouth_open),
        "hair_line": cy - 0.55 * 11.0 * s,
    }


def _ellipse(xx, yy, center, axes):
    return ((xx - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2 < 1.0


def _disc(xx, yy, center, radius):
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 < radius ** 2


def render_frame(params: HeadParams, resolution: int, frame_index: int = 0) -> FrameRecord:
    g = head_geometry(params, resolution)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    s = resolution / 32.0
    head = _ellipse(xx, yy, g["center"], g["axes"])
    mouth = _ellipse(xx, yy, g["mouth_center"], g["mouth_axes"]) & head
    eyes = (_disc(xx, yy, g["eyes"][0], g["eye_radius"]) | _disc(xx, yy, g["eyes"][1], g["eye_radius"])) & head
    pupils = (
        _disc(xx, yy, g["pupils"][0], g["pupil_radius"]) | _disc(xx, yy, g["pupils"][1], g["pupil_radius"])
    ) & eyes

    # Lambert-like shading, brightest where the face points
    cx, cy = g["center"]
    ax, ay = g["axes"]
    nx = (xx - cx - g["face_shift"]) / ax
    ny = (yy - cy) / ay
    shade = np.clip(1.0 - 0.45 * (nx ** 2 + 0.6 * ny ** 2), 0.0, 1.0)

    fill, hair_rgb, texture = STYLES[params.style_id]
    lx, ly = xx - cx, yy - cy
    if texture == "stripes":
        pattern = (np.floor((ly + 0.5 * lx + 64.0) / (3.0 * s)) % 2) == 0
    else:
        pattern = ((np.floor((lx + 64.0) / (3.0 * s)) % 2) == 0) & ((np.floor((ly + 64.0) / (3.0 * s)) % 2) == 0)
    tex = np.where(pattern, 0.72, 1.0)
    hair = head & (yy < g["hair_line"])

    rgb = np.zeros((3, resolution, resolution))
    for c in range(3):
        ch = np.full((resolution, resolution), BACKGROUND_RGB[c])
        face = fill[c] * tex * (0.75 + 0.25 * shade)
        ch = np.where(head, face, ch)
        ch = np.where(hair, hair_rgb[c] * (0.85 + 0.15 * shade), ch)
        ch = np.where(mouth, MOUTH_RGB[c], ch)
        ch = np.where(eyes, EYE_RGB[c], ch)
        ch = np.where(pupils, PUPIL_RGB[c], ch)
        rgb[c] = ch

    rendering = np.where(head, 0.25 + 0.7 * shade, 0.0)
    rendering = np.where(mouth, 0.08, rendering)

    return FrameRecord(
        frame_index=frame_index,
        ground_truth_rgb=_quantize(rgb),
        control_rendering=_quantize(rendering),
        true_mask=head.astype(np.uint8),
        pupil_points=g["pupils"],
        params=params,
    )


def generate_sequence_data(
    seed: int,
    length: int = 500,
    resolution: int = 32,
    style_id: int = 1,
    trajectory: TrajectoryConfig = TrajectoryConfig(),
) -> SequenceData:
    """Deterministic synthetic sequence; at least 5 frames for the temporal stacks."""
    if length < 5:
        raise ValueError(f"sequence length must be at least 5, got {length}")
    if resolution not in (32, 64):
        raise ValueError(f"resolution must be 32 or 64, got {resolution}")
    if style_id not in STYLES:
        raise ValueError(f"unknown style_id {style_id}")
    params = make_trajectory(seed, length, style_id, trajectory)
    records = [render_frame(p, resolution, i) for i, p in enumerate(params)]
    manifest = SequenceManifest(seed=seed, length=length, resolution=resolution, style_id=style_id)
    return SequenceData(manifest, records)


def generate_prior_corpus(
    seed: int,
    n_sequences: int,
    styles: Sequence[int],
    length: int = 60,
    resolution: int = 32,
) -> List[SequenceData]:
    """Balanced multi-style corpus; sequence ``i`` uses ``styles[i % len(styles)]``."""
    styles = list(styles)
    if len(set(styles)) < 2:
        raise ValueError("a prior corpus needs at least two distinct styles")
    seeds = np.random.SeedSequence(seed).spawn(n_sequences)
    corpus = []
    for i in range(n_sequences):
        sub_seed = int(seeds[i].generate_state(1)[0])
        corpus.append(generate_sequence_data(sub_seed, length, resolution, styles[i % len(styles)]))
    return corpus


def style_palette(style_id: int, resolution: int = 32, n_samples: int = 64, seed: int = 0) -> np.ndarray:
    """Mean RGB inside the head silhouette, averaged over a generic trajectory."""
    data = generate_sequence_data(seed, n_samples, resolution, style_id)
    return masked_mean_color(data.frames, data.masks)


def masked_mean_color(frames: np.ndarray, masks: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    m = np.asarray(masks, dtype=bool)
    if frames.ndim == 3:
        frames, m = frames[None], m[None]
    sel = np.broadcast_to(m[:, None], frames.shape)
    return np.array([frames[:, c][sel[:, c]].mean() for c in range(frames.shape[1])])


# ---------------------------------------------------------------- disk layout


def _to_png(path: Path, arr: np.ndarray) -> None:
    img = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.ndim == 3:
        img = np.transpose(img, (1, 2, 0))
    Image.fromarray(img).save(path, optimize=False)


def _from_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if arr.ndim == 3:
        arr = np.transpose(arr, (2, 0, 1))
    return arr


def write_sequence(data: SequenceData, directory: Path) -> SequenceManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    man = data.manifest
    man.frames, man.records = [], []
    for r in data.records:
        names = {role: f"frame_{r.frame_index:05d}_{role}.png" for role in ("gt", "ctrl", "mask")}
        _to_png(directory / names["gt"], r.ground_truth_rgb)
        _to_png(directory / names["ctrl"], r.control_rendering)
        _to_png(directory / names["mask"], r.true_mask.astype(np.float64))
        man.frames.append(names)
        man.records.append(
            {"frame_index": r.frame_index, "params": asdict(r.params), "pupils": [list(p) for p in r.pupil_points]}
        )
    (directory / "manifest.json").write_text(man.to_json())
    return man


def read_sequence(directory: Path) -> SequenceData:
    directory = Path(directory)
    raw = json.loads((directory / "manifest.json").read_text())
    man = SequenceManifest(**raw)
    if len(man.frames) != man.length:
        raise ValueError(f"{directory}: manifest lists {len(man.frames)} frames, length is {man.length}")
    records = []
    for names, rec in zip(man.frames, man.records):
        p = rec["params"]
        params = HeadParams(p["yaw"], p["mouth_open"], tuple(p["pupil_offset"]), p["style_id"])
        records.append(
            FrameRecord(
                frame_index=rec["frame_index"],
                ground_truth_rgb=_from_png(directory / names["gt"]),
                control_rendering=_from_png(directory / names["ctrl"]),
                true_mask=(_from_png(directory / names["mask"]) > 0.5).astype(np.uint8),
                pupil_points=tuple(tuple(q) for q in rec["pupils"]),
                params=params,
            )
        )
    return SequenceData(man, records)


def write_corpus(corpus: Sequence[SequenceData], root: Path) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, seq in enumerate(corpus):
        seq_id = f"seq_{i:04d}"
        write_sequence(seq, root / seq_id)
        entries.append({"seq_id": seq_id, "style_id": seq.style_id, "token": seq.style_id, "length": len(seq)})
    manifest = {"generator_version": GENERATOR_VERSION, "sequences": entries}
    (root / "corpus.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_corpus(root: Path) -> List[SequenceData]:
    root = Path(root)
    manifest = json.loads((root / "corpus.json").read_text())
    return [read_sequence(root / e["seq_id"]) for e in manifest["sequences"]]
