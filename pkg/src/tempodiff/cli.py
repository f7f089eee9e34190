"""Command-line entry point: ``tempodiff <subcommand> [options] [--section.key value ...]``.

Run layout::

    <run>/config.ini
    <run>/data/{personal,heldout,corpus}/ + data/checksums.json
    <run>/checkpoints/{prior,stage1,stage2,stage2_locked}.npz
    <run>/inference/<name>/   <run>/morph/<name>/   <run>/ablate/cells/
    <run>/reports/<command>[-<name>].{jsonl,txt}

Exit codes: 0 ok, 1 unexpected failure, 2 configuration, 3 data, 4 checkpoint.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .ablation import ablate_denoising, ablate_strength
from .conditioning import stage1_stacks, stage2_stacks
from .config import ConfigError, RunConfig, new_run_dir, parse_overrides, run_root
from .denoiser import DenoiserConfig, load_checkpoint, save_checkpoint
from .metrics import evaluate_frames, palette_distance
from .pipeline import (
    finetune_stage1,
    finetune_stage2,
    infer_two_stage,
    morph_inference,
    pretrain_prior,
    write_inference,
)
from .synthscene import (
    SequenceData,
    _from_png,
    generate_prior_corpus,
    generate_sequence_data,
    read_corpus,
    read_sequence,
    style_palette,
    write_corpus,
    write_sequence,
)

log = logging.getLogger("tempodiff")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


class DataError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# ------------------------------------------------------------------- helpers


def write_report(run: Path, name: str, records: Sequence[dict], text: str) -> Path:
    """``reports/<name>.jsonl`` (one JSON object per line) and ``reports/<name>.txt``."""
    out = run / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    (out / f"{name}.txt").write_text(text if text.endswith("\n") else text + "\n")
    return out / f"{name}.jsonl"


def _metric_text(title: str, summary: dict) -> str:
    lines = [title]
    for key, val in summary.items():
        if isinstance(val, float):
            lines.append(f"  {key:<14} {val:12.5f}")
        elif not isinstance(val, dict):
            lines.append(f"  {key:<14} {val!s:>12}")
    return "\n".join(lines)


def file_checksums(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "checksums.json"
    }


def _read_seq(run: Path, which: str) -> SequenceData:
    path = run / "data" / which
    try:
        return read_sequence(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read sequence {path}: {exc}") from exc


def _frame_slice(seq: SequenceData, spec: Optional[str]) -> SequenceData:
    if not spec:
        return seq
    try:
        start, stop = (int(v) if v else None for v in spec.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--frames must look like START:STOP, got {spec!r}") from exc
    idx = list(range(len(seq)))[start:stop]
    if len(idx) < 5:
        raise DataError(f"frame range {spec!r} leaves {len(idx)} frames; at least 5 are needed")
    return seq.subset(idx)


def _load_ckpt(run: Path, name: str):
    path = run / "checkpoints" / f"{name}.npz"
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise CheckpointError(f"cannot load {path}: {exc}") from exc


def _save_ckpt(run: Path, name: str, result, extra: Optional[dict] = None) -> Path:
    return save_checkpoint(result.model, run / "checkpoints" / f"{name}.npz", {**result.meta(), **(extra or {})})


def _latest_run() -> Path:
    root = run_root()
    runs = sorted(p for p in root.glob("*") if (p / "config.ini").exists()) if root.exists() else []
    if not runs:
        raise ConfigError(f"no run directory under {root}; pass --run-dir or run gen-data first")
    return runs[-1]


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg: RunConfig, run: Path) -> dict:
    d = cfg.data
    data = run / "data"
    personal = generate_sequence_data(d["seed"], d["length"], d["resolution"], d["style_id"])
    heldout = generate_sequence_data(d["heldout_seed"], d["heldout_length"], d["resolution"], d["style_id"])
    corpus = generate_prior_corpus(d["seed"], d["prior_sequences"], d["prior_styles"], d["prior_length"], d["resolution"])
    write_sequence(personal, data / "personal")
    write_sequence(heldout, data / "heldout")
    write_corpus(corpus, data / "corpus")
    sums = file_checksums(data)
    (data / "checksums.json").write_text(json.dumps(sums, indent=1, sort_keys=True))
    digest = hashlib.sha256(json.dumps(sums, sort_keys=True).encode()).hexdigest()
    rec = {"files": len(sums), "checksum": digest, "personal_frames": len(personal), "heldout_frames": len(heldout)}
    rec["corpus_sequences"] = len(corpus)
    write_report(run, "gen-data", [rec], _metric_text("gen-data", rec))
    return rec


def cmd_pretrain(args, cfg: RunConfig, run: Path) -> dict:
    try:
        corpus = read_corpus(run / "data" / "corpus")
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read prior corpus: {exc}") from exc
    n = sum(len(s) for s in corpus)
    tc = cfg.train("prior", "prior", n_frames=n, mode="unlocked")
    result = pretrain_prior(corpus, tc, cfg.schedule(), DenoiserConfig(**cfg.model_kwargs()))
    _save_ckpt(run, "prior", result)
    lines = [{"epoch": i, "loss": v} for i, v in enumerate(result.epoch_losses)]
    summary = {"epochs": tc.epochs, "final_loss": result.epoch_losses[-1] if lines else None,
               "null_fraction": result.null_fraction, "config_hash": result.config_hash}
    write_report(run, "pretrain", lines + [summary], _metric_text("pretrain", summary))
    return summary


def cmd_finetune(args, cfg: RunConfig, run: Path) -> dict:
    mode = args.mode or cfg.sections["finetune"]["mode"]
    stages = ("stage1", "stage2") if args.stage == "both" else (args.stage,)
    if mode == "locked" and "stage1" in stages:
        raise ConfigError("stage1 is always trained unlocked; locked mode applies to stage2 only")
    base, _ = _load_ckpt(run, "prior")
    seq = _read_seq(run, "personal")
    out = {}
    for stage in stages:
        tc = cfg.train("finetune", stage, n_frames=len(seq), mode=mode)
        fn = finetune_stage1 if stage == "stage1" else finetune_stage2
        result = fn(base, seq, tc, cfg.schedule())
        name = stage if mode == "unlocked" else f"{stage}_locked"
        _save_ckpt(run, name, result, {"token": seq.style_id})
        out[name] = {"epochs": tc.epochs, "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
                     "config_hash": result.config_hash}
        lines = [{"epoch": i, "loss": v} for i, v in enumerate(result.epoch_losses)]
        write_report(run, f"finetune-{name}", lines + [out[name]], _metric_text(f"finetune {name}", out[name]))
    return out


def cmd_infer(args, cfg: RunConfig, run: Path) -> dict:
    s1, _ = _load_ckpt(run, "stage1")
    s2, _ = _load_ckpt(run, "stage2")
    seq = _frame_slice(_read_seq(run, args.data), args.frames)
    c1, c2 = cfg.sampler("stage1"), cfg.sampler("stage2")
    name = args.name or args.data
    out_dir = run / "inference" / name
    res = infer_two_stage(s1, s2, seq.renderings, seq.pupils, seq.style_id, c1, c2, cfg.schedule(), out_dir)
    rep = evaluate_frames(res["frames"], seq.frames, seq.masks, {"stage1": c1.to_dict(), "stage2": c2.to_dict()})
    records = [
        {"frame": i, "psnr": rep.psnr[i], "ssim": rep.ssim[i], "mse": rep.mse[i],
         "masked_psnr": rep.masked_psnr[i], "masked_ssim": rep.masked_ssim[i], "masked_mse": rep.masked_mse[i]}
        for i in range(len(rep.psnr))
    ]
    summary = {**rep.means, "smoothness": rep.smoothness, "n_frames": len(rep.psnr)}
    write_report(run, f"infer-{name}", records + [{"summary": summary, "config": rep.config}],
                 _metric_text(f"infer {name}", summary))
    return summary


def cmd_morph(args, cfg: RunConfig, run: Path) -> dict:
    model, meta = _load_ckpt(run, args.checkpoint)
    seq = _frame_slice(_read_seq(run, args.data), args.frames)
    m = cfg.morph
    scale = m["guidance_scale_alt"] if args.alt_guidance else m["guidance_scale"]
    controls = stage2_stacks(seq.masks, seq.renderings, seq.pupils)
    sampler = cfg.sampler("stage2")
    frames = morph_inference(model, controls, m["token"], m["strength"], scale, sampler, cfg.schedule())
    name = args.name or f"token{m['token']}_c{m['strength']:g}"
    conf = sampler.replace(strength=m["strength"], guidance_scale=scale).to_dict()
    write_inference(run / "morph" / name, {"frames": frames}, {"stage2": conf}, 0.0)
    res = cfg.data["resolution"]
    summary = {
        "token": m["token"],
        "strength": m["strength"],
        "guidance_scale": scale,
        "target_distance": palette_distance(frames, seq.masks, style_palette(m["token"], res)),
        "personal_distance": palette_distance(frames, seq.masks, style_palette(seq.style_id, res)),
        "smoothness": evaluate_frames(frames, seq.frames).smoothness,
    }
    write_report(run, f"morph-{name}", [summary], _metric_text(f"morph {name}", summary))
    return summary


def _read_frames_dir(path: Path):
    """Frames (and masks, if present) from a sequence directory or an inference output directory."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    gt = sorted(path.glob("frame_*_gt.png"))
    if gt:
        masks = [p.with_name(p.name.replace("_gt", "_mask")) for p in gt]
        m = np.stack([_from_png(p) > 0.5 for p in masks]).astype(np.uint8) if all(p.exists() for p in masks) else None
        return np.stack([_from_png(p) for p in gt]), m
    plain = sorted(p for p in path.glob("frame_*.png") if p.stem.count("_") == 1)
    if not plain:
        raise DataError(f"no frame images in {path}")
    return np.stack([_from_png(p) for p in plain]), None


def cmd_evaluate(args, cfg: RunConfig, run: Path) -> dict:
    pred, pred_masks = _read_frames_dir(args.pred)
    target, target_masks = _read_frames_dir(args.target)
    if pred.shape != target.shape:
        raise DataError(f"prediction frames {pred.shape} and target frames {target.shape} differ")
    masks = target_masks if target_masks is not None else pred_masks
    rep = evaluate_frames(pred, target, masks)
    records = [{"frame": i, "psnr": rep.psnr[i], "ssim": rep.ssim[i], "mse": rep.mse[i]} for i in range(len(rep.psnr))]
    if masks is not None:
        for i, r in enumerate(records):
            r.update(masked_psnr=rep.masked_psnr[i], masked_ssim=rep.masked_ssim[i], masked_mse=rep.masked_mse[i])
    summary = {**rep.means, "smoothness": rep.smoothness, "n_frames": len(rep.psnr)}
    name = args.name or "evaluate"
    write_report(run, name, records + [{"summary": summary}], _metric_text(name, summary))
    return summary


def cmd_ablate(args, cfg: RunConfig, run: Path) -> dict:
    ab = cfg.ablate
    seq = _frame_slice(_read_seq(run, args.data), args.frames)
    if args.kind == "denoising":
        stage = ab["stage"]
        model, _ = _load_ckpt(run, stage)
        controls = stage1_stacks(seq.renderings, seq.pupils) if stage == "stage1" else stage2_stacks(
            seq.masks, seq.renderings, seq.pupils)
        table = ablate_denoising(
            model, controls, seq.style_id, cfg.schedule(), seq.frames, seq.masks,
            ab["w_p"], ab["w_n"], ab["w_c_policy"], cfg.sampler(stage), out_dir=run / "ablate",
        )
        write_report(run, "ablate-denoising", [json.loads(line) for line in table.to_lines()], table.to_text())
        failed = [k for k, c in table.cells.items() if c["status"] != "ok"]
        return {"cells": len(table.cells), "resumed": sum(c.get("resumed", False) for c in table.cells.values()),
                "failed": failed}
    model, _ = _load_ckpt(run, args.checkpoint)
    controls = stage2_stacks(seq.masks, seq.renderings, seq.pupils)
    m, res = cfg.morph, cfg.data["resolution"]
    report = ablate_strength(
        model, controls, m["token"], cfg.schedule(), style_palette(m["token"], res),
        style_palette(seq.style_id, res), ab["c"], m["guidance_scale"], cfg.sampler("stage2"), seq.masks,
    )
    write_report(run, "ablate-strength", [json.loads(line) for line in report.to_lines()], report.to_text())
    return report.checks


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "morph": cmd_morph,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tempodiff", description="Synthetic two-stage controlled diffusion avatars.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run config; defaults to <run>/config.ini when present")
    common.add_argument("--preset", choices=("paper", "desk", "quick"), help="base preset (default: desk)")
    common.add_argument("--run-dir", type=Path, help="run directory (default: newest under $TEMPODIFF_RUN_ROOT)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic personal, held-out and prior data")
    sub.add_parser("pretrain", parents=[common], help="train the style-token prior")
    ft = sub.add_parser("finetune", parents=[common], help="train control stages from the prior")
    ft.add_argument("--stage", choices=("stage1", "stage2", "both"), default="both")
    ft.add_argument("--mode", choices=("unlocked", "locked"), help="overrides finetune.mode")

    def data_args(sp, default="heldout"):
        sp.add_argument("--data", choices=("personal", "heldout"), default=default)
        sp.add_argument("--frames", help="START:STOP slice of the sequence")
        sp.add_argument("--name", help="output name")

    data_args(sub.add_parser("infer", parents=[common], help="two-stage inference with metrics"))
    mo = sub.add_parser("morph", parents=[common], help="render a sequence under another style token")
    data_args(mo)
    mo.add_argument("--checkpoint", default="stage2_locked", help="checkpoint name under <run>/checkpoints")
    mo.add_argument("--alt-guidance", action="store_true", help="use morph.guidance_scale_alt")
    ev = sub.add_parser("evaluate", parents=[common], help="metrics between two frame directories")
    ev.add_argument("--pred", type=Path, required=True)
    ev.add_argument("--target", type=Path, required=True)
    ev.add_argument("--name", help="report name (default: evaluate)")
    ab = sub.add_parser("ablate", parents=[common], help="blend-weight or control-strength sweep")
    ab.add_argument("--kind", choices=("denoising", "strength"), default="denoising")
    ab.add_argument("--checkpoint", default="stage2_locked", help="checkpoint for --kind strength")
    data_args(ab)
    return p


def _resolve(args, overrides) -> tuple:
    creating = args.command == "gen-data"
    run = args.run_dir
    if run is None and not creating:
        run = _latest_run()
    config_path = args.config
    if config_path is None and run is not None and (run / "config.ini").exists():
        config_path = run / "config.ini"
    cfg = RunConfig.load(config_path, args.preset, overrides)
    if run is None:
        run = new_run_dir(cfg)
    run.mkdir(parents=True, exist_ok=True)
    if creating or not (run / "config.ini").exists():
        (run / "config.ini").write_text(cfg.to_ini())
    return cfg, run


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg, run = _resolve(args, parse_overrides(rest))
        result = COMMANDS[args.command](args, cfg, run)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return EXIT_CHECKPOINT
    except Exception as exc:  # noqa: BLE001 - reported as a generic failure
        log.exception("%s failed: %s", args.command, exc)
        return EXIT_OTHER
    print(json.dumps({"run_dir": str(run), "command": args.command, "result": result}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
