"""Noise-prediction U-Net with a duplicated, zero-connected control branch.

The base network is a two-level convolutional encoder-decoder. The control
branch copies the base encoder, receives the control stack through a small
hint encoder, and feeds three residuals (level 1, level 2, bottleneck) back
into the base decoder through zero-initialised 1x1 connectors scaled by the
control strength ``c``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .schedule import NoisyState

CHECKPOINT_VERSION = "tempodiff-ckpt/1"
NULL_TOKEN = 0
STAGE_CHANNELS = {"stage1": 5, "stage2": 3}


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    base_width: int = 32
    emb_dim: int = 64
    token_dim: int = 32
    n_tokens: int = 5
    control_channels: int = 5
    hint_downsample: int = 1
    groups: int = 8

    def __post_init__(self):
        if self.control_channels not in STAGE_CHANNELS.values():
            raise ValueError(f"control_channels must be one of {sorted(STAGE_CHANNELS.values())}")
        if self.hint_downsample not in (1, 2, 4):
            raise ValueError("hint_downsample must be 1, 2 or 4")
        if self.n_tokens < 2:
            raise ValueError("need the null token plus at least one style token")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Conditioner(nn.Module):
    """Timestep + style-token embedding shared by every level of one branch."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.freq_dim = cfg.base_width
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_width, cfg.emb_dim), nn.SiLU(), nn.Linear(cfg.emb_dim, cfg.emb_dim)
        )
        self.token_table = nn.Embedding(cfg.n_tokens, cfg.token_dim)
        # every token starts equal to the null token; style information is learned
        nn.init.zeros_(self.token_table.weight)
        self.token_proj = nn.Linear(cfg.token_dim, cfg.emb_dim)

    def forward(self, t, tokens):
        temb = timestep_embedding(t, self.freq_dim).to(self.token_proj.weight.dtype)
        return self.time_mlp(temb) + self.token_proj(self.token_table(tokens))


class Encoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w = cfg.base_width
        self.conditioner = Conditioner(cfg)
        self.conv_in = nn.Conv2d(cfg.in_channels, w, 3, padding=1)
        self.block1 = ResBlock(w, w, cfg.emb_dim, cfg.groups)
        self.down = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.block2 = ResBlock(w, 2 * w, cfg.emb_dim, cfg.groups)
        self.mid = ResBlock(2 * w, 2 * w, cfg.emb_dim, cfg.groups)

    def forward(self, x, t, tokens, hint=None):
        emb = self.conditioner(t, tokens)
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        h1 = self.block1(h, emb)
        h2 = self.block2(self.down(h1), emb)
        mid = self.mid(h2, emb)
        return emb, (h1, h2, mid)


class Decoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w = cfg.base_width
        self.block2 = ResBlock(4 * w, 2 * w, cfg.emb_dim, cfg.groups)
        self.up = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.block1 = ResBlock(3 * w, w, cfg.emb_dim, cfg.groups)
        self.norm_out = nn.GroupNorm(cfg.groups, w)
        self.conv_out = nn.Conv2d(w, cfg.in_channels, 3, padding=1)

    def forward(self, feats, emb):
        h1, h2, mid = feats
        h = self.block2(torch.cat([mid, h2], dim=1), emb)
        h = self.up(F.interpolate(h, size=h1.shape[-2:], mode="nearest"))
        h = self.block1(torch.cat([h, h1], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class HintEncoder(nn.Module):
    """Small conv net turning a k-channel control stack into a feature map."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w = cfg.base_width
        layers = [nn.Conv2d(cfg.control_channels, w // 2, 3, padding=1), nn.SiLU()]
        ch = w // 2
        for _ in range(int(math.log2(cfg.hint_downsample))):
            layers += [nn.Conv2d(ch, w, 3, stride=2, padding=1), nn.SiLU()]
            ch = w
        layers += [nn.Conv2d(ch, w, 3, padding=1), nn.SiLU(), nn.Conv2d(w, w, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, control):
        return self.net(control)


def zero_conv(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlledUNet(nn.Module):
    """Base denoiser plus control branch.

    ``forward(x, t, tokens, control, strength)`` takes batched tensors: ``x`` is
    (B, C, H, W), ``t`` and ``tokens`` are (B,) integer tensors, ``control`` is
    (B, k, H * r, W * r) where ``r`` is ``config.hint_downsample``.
    """

    def __init__(self, config: Optional[DenoiserConfig] = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        w = self.config.base_width
        self.base_encoder = Encoder(self.config)
        self.base_decoder = Decoder(self.config)
        self.hint = HintEncoder(self.config)
        self.control_encoder = copy.deepcopy(self.base_encoder)
        self.connectors = nn.ModuleList([zero_conv(w), zero_conv(2 * w), zero_conv(2 * w)])

    def weight_groups(self) -> Dict[str, list]:
        return {
            "base": list(self.base_encoder.parameters()) + list(self.base_decoder.parameters()),
            "control": list(self.hint.parameters()) + list(self.control_encoder.parameters()),
            "connector": list(self.connectors.parameters()),
        }

    def encode_control(self, control: torch.Tensor) -> torch.Tensor:
        k = control.shape[1]
        if k != self.config.control_channels:
            raise ValueError(f"control has {k} channels, model expects {self.config.control_channels}")
        return self.hint(control)

    def base_forward(self, x, t, tokens):
        emb, feats = self.base_encoder(x, t, tokens)
        return self.base_decoder(feats, emb)

    def forward(self, x, t, tokens, control=None, strength: float = 1.0):
        strength = float(strength)
        if not 0.0 <= strength <= 1.0:
            raise ValueError(f"control strength must lie in [0, 1], got {strength}")
        emb, feats = self.base_encoder(x, t, tokens)
        if control is None or strength == 0.0:
            return self.base_decoder(feats, emb)
        hint = self.encode_control(control)
        if hint.shape[-2:] != x.shape[-2:]:
            raise ValueError(
                f"encoded control is {tuple(hint.shape[-2:])}, state is {tuple(x.shape[-2:])}"
            )
        _, cfeats = self.control_encoder(x, t, tokens, hint)
        residuals = [conn(f) for conn, f in zip(self.connectors, cfeats)]
        if strength != 1.0:
            residuals = [strength * r for r in residuals]
        feats = tuple(f + r for f, r in zip(feats, residuals))
        return self.base_decoder(feats, emb)

    def copy_base_into_control(self) -> None:
        """Re-duplicate the base encoder into the control branch (ControlNet init)."""
        self.control_encoder.load_state_dict(self.base_encoder.state_dict())


def predict_noise(
    model: ControlledUNet,
    state: NoisyState,
    token: int,
    control: Optional[np.ndarray],
    strength: float = 1.0,
) -> np.ndarray:
    """Single-sample eps prediction; accepts and returns numpy arrays."""
    param = next(model.parameters())
    x = torch.as_tensor(np.asarray(state.values), dtype=param.dtype)[None]
    t = torch.tensor([state.timestep])
    tok = torch.tensor([int(token)])
    ctrl = None
    if control is not None:
        ctrl = torch.as_tensor(np.asarray(getattr(control, "channels", control)), dtype=param.dtype)[None]
    with torch.no_grad():
        out = model(x, t, tok, ctrl, strength)
    return out[0].numpy()


def encode_control(model: ControlledUNet, control) -> np.ndarray:
    param = next(model.parameters())
    arr = np.asarray(getattr(control, "channels", control))
    if arr.shape[0] not in STAGE_CHANNELS.values():
        raise ValueError(f"unexpected control channel count {arr.shape[0]}")
    with torch.no_grad():
        return model.encode_control(torch.as_tensor(arr, dtype=param.dtype)[None])[0].numpy()


def set_train_mode(model: ControlledUNet, mode: str) -> Dict[str, bool]:
    """Toggle ``requires_grad`` per weight group; returns the resulting mask.

    ``unlocked`` trains everything, ``locked`` freezes the base network.
    """
    if mode not in ("unlocked", "locked"):
        raise ValueError(f"mode must be 'unlocked' or 'locked', got {mode!r}")
    mask = {"base": mode == "unlocked", "control": True, "connector": True}
    for group, params in model.weight_groups().items():
        for p in params:
            p.requires_grad_(mask[group])
    return mask


def flat_weights(model: ControlledUNet) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def save_checkpoint(model: ControlledUNet, path: Union[str, Path], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"w/{k}": v for k, v in flat_weights(model).items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__config__"] = np.array(json.dumps(asdict(model.config), sort_keys=True))
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: Union[str, Path], expected: Optional[DenoiserConfig] = None):
    """Returns ``(model, meta)``; raises ``ValueError`` on version or config mismatch."""
    with np.load(path, allow_pickle=False) as data:
        version = str(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {version!r} not supported")
        config = DenoiserConfig(**json.loads(str(data["__config__"])))
        if expected is not None and config != expected:
            raise ValueError(f"checkpoint config {config} does not match expected {expected}")
        meta = json.loads(str(data["__meta__"]))
        state = {k[2:]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("w/")}
    model = ControlledUNet(config)
    model.load_state_dict(state)
    return model, meta


def adapt_control_channels(model: ControlledUNet, control_channels: int) -> ControlledUNet:
    """Copy of ``model`` whose hint encoder accepts ``control_channels`` inputs.

    Base and duplicated encoder weights are kept; the hint encoder is rebuilt.
    """
    if control_channels == model.config.control_channels:
        return copy.deepcopy(model)
    cfg = DenoiserConfig(**{**asdict(model.config), "control_channels": control_channels})
    out = ControlledUNet(cfg)
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("hint.")}
    missing, _ = out.load_state_dict(state, strict=False)
    assert all(k.startswith("hint.") for k in missing)
    return out
