"""Shared fixtures: trained toy models for the acceptance suite.

Training runs once per session. Set ``TEMPODIFF_TEST_CACHE`` to a directory
to keep checkpoints between sessions; entries are keyed by the training
configuration and a hash of the package sources, and keep the wall time of
the original training so runtime budgets stay honest.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import tempodiff
from tempodiff.conditioning import stage1_stacks, stage2_stacks
from tempodiff.denoiser import load_checkpoint, save_checkpoint
from tempodiff.pipeline import TrainConfig, finetune_stage1, finetune_stage2, pretrain_prior
from tempodiff.schedule import make_linear_schedule
from tempodiff.synthscene import generate_prior_corpus, generate_sequence_data

# Pinned test-scale training: about 40 CPU minutes for the prior plus both stages.
PRIOR_CONFIG = TrainConfig(epochs=20, grad_accum=1, learning_rate=1e-3, lr_schedule="cosine", seed=0)
FINETUNE_CONFIG = TrainConfig(epochs=80, grad_accum=1, learning_rate=1e-3, lr_schedule="cosine", seed=1)
CORPUS = dict(seed=0, n_sequences=16, styles=(1, 2), length=60)
PERSONAL = dict(seed=123, length=500, style_id=1)
HELDOUT = dict(seed=1000, length=100, style_id=1)

_ACCEPTANCE = {}


def _source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(tempodiff.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


class Bench:
    """Lazily trained models with their training wall times (seconds)."""

    def __init__(self, cache_dir=None):
        self.schedule = make_linear_schedule()
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.seconds = {}
        self._models = {}
        self._src = _source_hash()

    # -- data
    def personal(self):
        if "personal" not in self._models:
            p = PERSONAL
            self._models["personal"] = generate_sequence_data(p["seed"], p["length"], 32, p["style_id"])
        return self._models["personal"]

    def heldout(self):
        if "heldout" not in self._models:
            h = HELDOUT
            self._models["heldout"] = generate_sequence_data(h["seed"], h["length"], 32, h["style_id"])
        return self._models["heldout"]

    # -- models
    def _cached(self, name, key, build):
        if name in self._models:
            return self._models[name]
        digest = hashlib.sha256(json.dumps({**key, "src": self._src}, sort_keys=True).encode()).hexdigest()[:12]
        path = None if self.cache_dir is None else self.cache_dir / f"{name}-{digest}.npz"
        if path is not None and path.exists():
            model, meta = load_checkpoint(path)
            self.seconds[name] = meta["seconds"]
        else:
            # Denormal flushing speeds up CPU training; it is process-global, so restore it.
            torch.set_flush_denormal(True)
            try:
                t0 = time.perf_counter()
                model = build()
                self.seconds[name] = time.perf_counter() - t0
            finally:
                torch.set_flush_denormal(False)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, path, {"seconds": self.seconds[name], "key": key})
        self._models[name] = model
        return model

    def prior(self):
        c = CORPUS

        def build():
            corpus = generate_prior_corpus(c["seed"], c["n_sequences"], list(c["styles"]), c["length"], 32)
            return pretrain_prior(corpus, PRIOR_CONFIG, self.schedule).model

        return self._cached("prior", {"corpus": c, "train": PRIOR_CONFIG.digest()}, build)

    def stage(self, stage, mode="unlocked", stride=1):
        """Fine-tuned stage on every ``stride``-th personal frame (controls keep full temporal context)."""
        name = f"{stage}_{mode}_stride{stride}"
        self.prior()  # runtime budgets count the prior's training time
        cfg = FINETUNE_CONFIG.replace(mode=mode)

        def build():
            seq = self.personal()
            idx = list(range(0, len(seq), stride))
            if stage == "stage1":
                controls = stage1_stacks(seq.renderings, seq.pupils)[idx]
                return finetune_stage1(self.prior(), seq.subset(idx), cfg, self.schedule, controls).model
            controls = stage2_stacks(seq.masks, seq.renderings, seq.pupils)[idx]
            return finetune_stage2(self.prior(), seq.subset(idx), cfg, self.schedule, controls).model

        key = {"stage": stage, "personal": PERSONAL, "train": cfg.digest(), "stride": stride, "prior": CORPUS}
        return self._cached(name, key, build)


@pytest.fixture(scope="session")
def bench():
    return Bench(os.environ.get("TEMPODIFF_TEST_CACHE"))


@pytest.fixture(scope="session")
def record():
    """``record(n, ok, detail)`` logs one acceptance criterion for the summary."""

    def _record(n, ok, detail):
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in _ACCEPTANCE:
            ok, detail = _ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:>2}: NOT RUN")
