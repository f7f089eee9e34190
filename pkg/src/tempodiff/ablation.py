"""Parameter sweeps: blend weights (w_p x w_n) and control strength c."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .metrics import evaluate_frames, palette_distance, smoothness
from .pipeline import MORPH_GUIDANCE, STAGE2_SAMPLER, render_sequence
from .samplers import TemporalSamplerConfig
from .schedule import VarianceSchedule

log = logging.getLogger(__name__)

DEFAULT_WP = (0.0, 0.25, 0.5, 0.75)
DEFAULT_WN = (0.0, 0.05, 0.1)
DEFAULT_C = (0.25, 0.5, 0.75, 1.0)
TABLE_METRICS = ("smoothness", "psnr", "ssim", "mse", "masked_psnr")


def current_weight(policy: Union[str, float], w_p: float, w_n: float) -> float:
    if policy == "complement":
        return 1.0 - w_p
    if policy == "complement_all":
        return max(0.0, 1.0 - w_p - w_n)
    return float(policy)


@dataclass
class AblationTable:
    rows: List[float]
    cols: List[float]
    cells: Dict[str, dict] = field(default_factory=dict)
    row_name: str = "w_p"
    col_name: str = "w_n"

    @staticmethod
    def key(r: float, c: float) -> str:
        return f"{r:g}_{c:g}"

    def matrix(self, metric: str) -> np.ndarray:
        out = np.full((len(self.rows), len(self.cols)), np.nan)
        for i, r in enumerate(self.rows):
            for j, c in enumerate(self.cols):
                cell = self.cells.get(self.key(r, c), {})
                val = cell.get("metrics", {}).get(metric)
                if val is not None:
                    out[i, j] = val
        return out

    def to_lines(self) -> List[str]:
        lines = []
        for r in self.rows:
            for c in self.cols:
                cell = {k: v for k, v in self.cells[self.key(r, c)].items() if k != "resumed"}
                lines.append(json.dumps({self.row_name: r, self.col_name: c, **cell}, sort_keys=True))
        return lines

    def to_text(self, metrics: Sequence[str] = TABLE_METRICS) -> str:
        blocks = []
        for metric in metrics:
            mat = self.matrix(metric)
            if np.all(np.isnan(mat)):
                continue
            head = f"{metric} ({self.row_name} rows x {self.col_name} cols)"
            lines = [head, f"{self.row_name:>8} | " + " ".join(f"{c:>10g}" for c in self.cols)]
            for r, vals in zip(self.rows, mat):
                cells = []
                for j, v in enumerate(vals):
                    status = self.cells.get(self.key(r, self.cols[j]), {}).get("status")
                    cells.append(f"{'FAILED':>10}" if status == "failed" else f"{v:>10.5f}")
                lines.append(f"{r:>8g} | " + " ".join(cells))
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    def write(self, out_dir: Path, name: str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{name}.jsonl").write_text("\n".join(self.to_lines()) + "\n")
        (out_dir / f"{name}.txt").write_text(self.to_text())


def _run_cell(key: str, cell_dir: Optional[Path], cfg_dict: dict, compute: Callable[[], dict]) -> dict:
    path = None if cell_dir is None else cell_dir / f"{key}.json"
    if path is not None and path.exists():
        cached = json.loads(path.read_text())
        if cached.get("config") == cfg_dict and cached.get("status") == "ok":
            cached["resumed"] = True
            return cached
    try:
        cell = {"status": "ok", "config": cfg_dict, "metrics": compute()}
    except Exception as exc:  # a failed cell is recorded, the sweep carries on
        log.exception("ablation cell %s failed", key)
        cell = {"status": "failed", "config": cfg_dict, "error": f"{type(exc).__name__}: {exc}", "metrics": {}}
    if path is not None:
        path.write_text(json.dumps(cell, sort_keys=True))
    return dict(cell, resumed=False)


def ablate_denoising(
    model,
    controls: np.ndarray,
    token: int,
    schedule: VarianceSchedule,
    targets: Optional[np.ndarray] = None,
    masks: Optional[np.ndarray] = None,
    w_p_values: Sequence[float] = DEFAULT_WP,
    w_n_values: Sequence[float] = DEFAULT_WN,
    w_c_policy: Union[str, float] = "complement",
    base_config: TemporalSamplerConfig = STAGE2_SAMPLER,
    out_dir: Optional[Path] = None,
    render: Optional[Callable] = None,
) -> AblationTable:
    """Render the sequence once per (w_p, w_n) cell and report metrics.

    The (0, 0) baseline row/column is always included. With ``out_dir``,
    finished cells are cached under ``cells/`` and reused on rerun.
    """
    rows = sorted(set(float(v) for v in w_p_values) | {0.0})
    cols = sorted(set(float(v) for v in w_n_values) | {0.0})
    if any(v < 0 for v in rows + cols):
        raise ValueError("grid values must be non-negative")
    render = render or (lambda cfg: render_sequence(model, controls, token, cfg, schedule))
    cell_dir = None
    if out_dir is not None:
        cell_dir = Path(out_dir) / "cells"
        cell_dir.mkdir(parents=True, exist_ok=True)
    table = AblationTable(rows, cols)
    for w_p in rows:
        for w_n in cols:
            cfg = base_config.replace(w_c=current_weight(w_c_policy, w_p, w_n), w_p=w_p, w_n=w_n)

            def compute(cfg=cfg):
                frames = render(cfg)
                if targets is None:
                    return {"smoothness": smoothness(frames)}
                rep = evaluate_frames(frames, targets, masks)
                return {**rep.means, "smoothness": rep.smoothness}

            key = table.key(w_p, w_n)
            table.cells[key] = _run_cell(key, cell_dir, cfg.to_dict(), compute)
    if out_dir is not None:
        table.write(Path(out_dir), "ablation_denoising")
    return table


@dataclass
class StrengthReport:
    rows: List[dict]
    checks: Dict[str, bool]

    def to_lines(self) -> List[str]:
        return [json.dumps(r, sort_keys=True) for r in self.rows] + [json.dumps({"checks": self.checks}, sort_keys=True)]

    def to_text(self) -> str:
        lines = [f"{'c':>6} {'smoothness':>12} {'d_target':>10} {'d_personal':>10}  note"]
        for r in self.rows:
            lines.append(
                f"{r['c']:>6g} {r['smoothness']:>12.5f} {r['target_distance']:>10.4f} "
                f"{r['personal_distance']:>10.4f}  {r['note']}"
            )
        lines.append("")
        lines += [f"{name}: {'PASS' if ok else 'FAIL'}" for name, ok in self.checks.items()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path, name: str = "ablation_strength") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{name}.jsonl").write_text("\n".join(self.to_lines()) + "\n")
        (out_dir / f"{name}.txt").write_text(self.to_text())


def _monotone(values: Sequence[float], decreasing: bool) -> bool:
    """Strictly monotone."""
    diffs = np.diff(np.asarray(values, dtype=np.float64))
    return bool(np.all(diffs < 0) if decreasing else np.all(diffs > 0))


def ablate_strength(
    model,
    controls: np.ndarray,
    target_token: int,
    schedule: VarianceSchedule,
    target_palette: np.ndarray,
    personal_palette: np.ndarray,
    c_values: Sequence[float] = DEFAULT_C,
    guidance_scale: float = MORPH_GUIDANCE,
    base_config: TemporalSamplerConfig = STAGE2_SAMPLER,
    masks: Optional[np.ndarray] = None,
) -> StrengthReport:
    """Sweep the control strength under a morph token.

    Colour distances are measured inside ``masks`` (default: the parsing
    channel of stage-II controls). ``personal_palette`` is the appearance the
    control branch was trained on; ``target_palette`` belongs to ``target_token``.
    """
    controls = np.asarray(controls)
    if any(not 0.0 <= c <= 1.0 for c in c_values):
        raise ValueError("c values must lie in [0, 1]")
    if masks is None:
        masks = (controls[:, 0] > 0.5).astype(np.uint8)
    rows = []
    for c in sorted(float(v) for v in c_values):
        cfg = base_config.replace(strength=c, guidance_scale=float(guidance_scale))
        frames = render_sequence(model, controls, int(target_token), cfg, schedule)
        rows.append(
            {
                "c": c,
                "smoothness": smoothness(frames),
                "target_distance": palette_distance(frames, masks, target_palette),
                "personal_distance": palette_distance(frames, masks, personal_palette),
                "note": "uncontrolled" if c == 0.0 else "",
            }
        )
    checks = {
        "personal_distance_decreases_with_c": _monotone([r["personal_distance"] for r in rows], decreasing=True),
        "target_distance_increases_with_c": _monotone([r["target_distance"] for r in rows], decreasing=False),
    }
    by_c = {r["c"]: r["smoothness"] for r in rows}
    if 0.25 in by_c and 0.75 in by_c:
        checks["smoother_at_c0.75_than_c0.25"] = bool(by_c[0.75] < by_c[0.25])
    return StrengthReport(rows, checks)
