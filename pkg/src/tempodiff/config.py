"""Run configuration: one INI file with a section per component.

Values are resolved in order preset -> config file -> command-line overrides
(``--stage1.w_p 0.6``). Everything a run needs is in the file saved at
``<run>/config.ini``, and its hash names the run directory.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
import time
from dataclasses import fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .pipeline import STAGE1_SAMPLER, STAGE2_SAMPLER, MORPH_GUIDANCE, MORPH_GUIDANCE_ALT, TrainConfig, desk_epochs
from .samplers import TemporalSamplerConfig
from .schedule import VarianceSchedule, make_linear_schedule

RUN_ROOT_ENV = "TEMPODIFF_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"
PRESETS = ("paper", "desk", "quick")
DEFAULT_PRESET = "desk"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _sampler_section(cfg: TemporalSamplerConfig) -> Dict[str, str]:
    return {f.name: str(getattr(cfg, f.name)) for f in fields(TemporalSamplerConfig)}


_TRAIN_KEYS = ("epochs", "batch_size", "grad_accum", "learning_rate", "prompt_drop_prob", "seed", "grad_clip", "lr_schedule")


def _base_sections() -> Dict[str, Dict[str, str]]:
    train = TrainConfig()
    train_section = {k: str(getattr(train, k)) for k in _TRAIN_KEYS}
    return {
        "run": {"preset": DEFAULT_PRESET},
        "schedule": {"T": "1000", "beta_start": "0.0001", "beta_end": "0.02"},
        "model": {"base_width": "32", "emb_dim": "64", "token_dim": "32", "n_tokens": "5"},
        "data": {
            "seed": "0",
            "length": "500",
            "resolution": "32",
            "style_id": "1",
            "heldout_seed": "1000",
            "heldout_length": "100",
            "prior_styles": "1,2",
            "prior_sequences": "16",
            "prior_length": "60",
        },
        "prior": dict(train_section),
        "finetune": dict(train_section, mode="unlocked"),
        "stage1": _sampler_section(STAGE1_SAMPLER),
        "stage2": _sampler_section(STAGE2_SAMPLER),
        "morph": {
            "token": "2",
            "strength": "0.5",
            "guidance_scale": str(MORPH_GUIDANCE),
            "guidance_scale_alt": str(MORPH_GUIDANCE_ALT),
        },
        "ablate": {
            "w_p": "0,0.25,0.5,0.75",
            "w_n": "0,0.05,0.1",
            "w_c_policy": "complement",
            "c": "0.25,0.5,0.75,1.0",
            "stage": "stage2",
        },
    }


def preset_sections(name: str) -> Dict[str, Dict[str, str]]:
    """Default sections for a named preset.

    ``paper`` keeps the published training hyperparameters, ``desk`` sizes
    training to about 20k mini-batches on CPU and is the default, ``quick`` is
    a smoke-test run.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    sec = _base_sections()
    sec["run"]["preset"] = name
    if name == "desk":
        for part in ("prior", "finetune"):
            sec[part].update(epochs="auto", grad_accum="1", learning_rate="0.001", lr_schedule="cosine")
    elif name == "quick":
        sec["data"].update(length="24", heldout_length="12", prior_sequences="4", prior_length="12")
        for part in ("prior", "finetune"):
            sec[part].update(epochs="2", grad_accum="1", learning_rate="0.001")
        for stage in ("stage1", "stage2"):
            sec[stage].update(S="6", tau="4")
        sec["ablate"].update(w_p="0,0.5", w_n="0", c="0.5,1.0")
    return sec


class RunConfig:
    """Typed view over the INI sections."""

    def __init__(self, sections: Dict[str, Dict[str, str]]):
        self.sections = {s: dict(v) for s, v in sections.items()}
        self.validate()

    # -- construction
    @classmethod
    def load(cls, path: Optional[Path] = None, preset: Optional[str] = None, overrides: Iterable[Tuple[str, str]] = ()):
        file_sections: Dict[str, Dict[str, str]] = {}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                if not parser.read(path):
                    raise ConfigError(f"config file {path} not found")
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            file_sections = {s: dict(parser[s]) for s in parser.sections()}
        name = preset or file_sections.get("run", {}).get("preset", DEFAULT_PRESET)
        sections = preset_sections(name)
        for src in (file_sections, _group(overrides)):
            for sec, values in src.items():
                if sec not in sections:
                    raise ConfigError(f"unknown config section [{sec}]")
                for key, value in values.items():
                    if key not in sections[sec]:
                        raise ConfigError(f"unknown key {sec}.{key}")
                    sections[sec][key] = str(value)
        sections["run"]["preset"] = name
        return cls(sections)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for sec in sorted(self.sections):
            parser[sec] = dict(sorted(self.sections[sec].items()))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]

    def get(self, dotted: str) -> str:
        sec, key = dotted.split(".", 1)
        return self.sections[sec][key]

    # -- typed accessors
    def _float(self, sec, key) -> float:
        try:
            return float(self.sections[sec][key])
        except ValueError as exc:
            raise ConfigError(f"{sec}.{key} must be a number, got {self.sections[sec][key]!r}") from exc

    def _int(self, sec, key) -> int:
        try:
            return int(self.sections[sec][key])
        except ValueError as exc:
            raise ConfigError(f"{sec}.{key} must be an integer, got {self.sections[sec][key]!r}") from exc

    def _floats(self, sec, key) -> List[float]:
        try:
            return [float(v) for v in self.sections[sec][key].split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"{sec}.{key} must be a comma-separated list of numbers") from exc

    def schedule(self) -> VarianceSchedule:
        return make_linear_schedule(
            self._int("schedule", "T"), self._float("schedule", "beta_start"), self._float("schedule", "beta_end")
        )

    def model_kwargs(self) -> dict:
        return {k: self._int("model", k) for k in self.sections["model"]}

    @property
    def data(self) -> dict:
        d = {k: self._int("data", k) for k in self.sections["data"] if k != "prior_styles"}
        d["prior_styles"] = [int(v) for v in self._floats("data", "prior_styles")]
        return d

    def train(self, part: str, stage: str, n_frames: Optional[int] = None, mode: Optional[str] = None) -> TrainConfig:
        sec = self.sections[part]
        batch = self._int(part, "batch_size")
        if sec["epochs"] == "auto":
            if n_frames is None:
                raise ConfigError(f"{part}.epochs=auto needs the training-set size")
            epochs = desk_epochs(n_frames, batch)
        else:
            epochs = self._int(part, "epochs")
        try:
            return TrainConfig(
                epochs=epochs,
                batch_size=batch,
                grad_accum=self._int(part, "grad_accum"),
                learning_rate=self._float(part, "learning_rate"),
                prompt_drop_prob=self._float(part, "prompt_drop_prob"),
                mode=mode or sec.get("mode", "unlocked"),
                stage=stage,
                seed=self._int(part, "seed"),
                grad_clip=self._float(part, "grad_clip"),
                lr_schedule=sec["lr_schedule"],
            )
        except ValueError as exc:
            raise ConfigError(f"[{part}] {exc}") from exc

    def sampler(self, stage: str) -> TemporalSamplerConfig:
        sec = self.sections[stage]
        kw = {}
        for f in fields(TemporalSamplerConfig):
            raw = sec[f.name]
            if f.type in ("bool", bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ConfigError(f"{stage}.{f.name} must be a boolean, got {raw!r}")
                kw[f.name] = raw.lower() in ("true", "1", "yes")
            elif f.type in ("int", int):
                kw[f.name] = self._int(stage, f.name)
            else:
                kw[f.name] = self._float(stage, f.name)
        try:
            return TemporalSamplerConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"[{stage}] {exc}") from exc

    @property
    def morph(self) -> dict:
        return {
            "token": self._int("morph", "token"),
            "strength": self._float("morph", "strength"),
            "guidance_scale": self._float("morph", "guidance_scale"),
            "guidance_scale_alt": self._float("morph", "guidance_scale_alt"),
        }

    @property
    def ablate(self) -> dict:
        stage = self.sections["ablate"]["stage"]
        policy = self.sections["ablate"]["w_c_policy"]
        if policy not in ("complement", "complement_all"):
            try:
                float(policy)
            except ValueError as exc:
                raise ConfigError("ablate.w_c_policy must be complement, complement_all or a number") from exc
        return {
            "w_p": self._floats("ablate", "w_p"),
            "w_n": self._floats("ablate", "w_n"),
            "w_c_policy": policy,
            "c": self._floats("ablate", "c"),
            "stage": stage,
        }

    def validate(self) -> None:
        """Parse every section once so bad values fail before any work starts."""
        self.schedule()
        self.model_kwargs()
        data = self.data
        if data["resolution"] not in (32, 64):
            raise ConfigError("data.resolution must be 32 or 64")
        if len(set(data["prior_styles"])) < 2:
            raise ConfigError("data.prior_styles needs at least two styles")
        for part, stage in (("prior", "prior"), ("finetune", "stage2")):
            self.train(part, stage, n_frames=1)
        for stage in ("stage1", "stage2"):
            self.sampler(stage)
        self.morph
        ab = self.ablate
        if ab["stage"] not in ("stage1", "stage2"):
            raise ConfigError("ablate.stage must be stage1 or stage2")
        if any(not 0 <= c <= 1 for c in ab["c"]):
            raise ConfigError("ablate.c values must lie in [0, 1]")


def _group(overrides: Iterable[Tuple[str, str]]) -> Dict[str, Dict[str, str]]:
    out: Dict[str, Dict[str, str]] = {}
    for dotted, value in overrides:
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        out.setdefault(sec, {})[key] = value
    return out


def parse_overrides(argv: List[str]) -> List[Tuple[str, str]]:
    """``['--stage1.w_p', '0.6', '--data.seed=3']`` -> ``[('stage1.w_p', '0.6'), ('data.seed', '3')]``."""
    out, i = [], 0
    while i < len(argv):
        arg = argv[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise ConfigError(f"unrecognised argument {arg!r}")
        if "=" in arg:
            key, value = arg[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(argv):
                raise ConfigError(f"{arg} needs a value")
            key, value = arg[2:], argv[i + 1]
            i += 2
        out.append((key, value))
    return out


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT))


def new_run_dir(config: RunConfig, root: Optional[Path] = None) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(root or run_root()) / f"{config.digest()}-{stamp}"
