"""Phantom end-to-end experiment: train on synthetic cases, segment held-out ones.

Everything is derived from the seed, so two runs write byte-identical model
files and label volumes.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CrfSettings, FcnnSettings, PipelineConfig
from .evaluation import REGIONS, score_report
from .phantom import PhantomConfig, generate_phantom
from .pipeline import Case, load_models, segment_volume, train_view
from .postprocess import postprocess
from .volume import AXES, save_labels

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 1000


def benchmark_config(seed: int = 0) -> PipelineConfig:
    """Desk-scale settings: pool size 1, 16 feature maps, steps 1 and 2."""
    return PipelineConfig(
        fcnn=FcnnSettings(n=1, width=16, input_shift=100.0, input_scale=0.02, per_class=10, base_lr=5e-3,
                          decay_every=6, epochs=10, batch_size=8),
        crf=CrfSettings(slices_per_volume=3, step2_rate=1e-3, step2_epochs=5),
        train_steps=[1, 2],
        seed=seed,
    ).validate()


@dataclass
class BenchmarkSettings:
    train_cases: int = 20
    test_cases: int = 10
    primary_view: str = "axial"
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


@dataclass
class BenchmarkResult:
    dice: dict  # pipeline name ("axial", ..., "fused") -> region -> mean Dice
    runtime: float
    files: list
    primary_view: str = "axial"

    @property
    def primary(self) -> dict:
        return self.dice[self.primary_view]

    def single_view_mean(self, region: str = "complete") -> float:
        return float(np.mean([self.dice[v][region] for v in AXES]))


def make_cases(seeds, phantom: PhantomConfig) -> list[Case]:
    cases = []
    for s in seeds:
        volume, labels = generate_phantom(int(s), phantom)
        cases.append(Case(f"phantom_{int(s):04d}", volume, labels))
    return cases


def run_benchmark(out_dir, settings: BenchmarkSettings | None = None,
                  config: PipelineConfig | None = None) -> BenchmarkResult:
    settings = settings or BenchmarkSettings()
    config = config or benchmark_config(settings.seed)
    out = Path(out_dir)
    model_dir, label_dir = out / "models", out / "labels"
    model_dir.mkdir(parents=True, exist_ok=True)
    label_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    seed = settings.seed
    train = make_cases(range(seed, seed + settings.train_cases), settings.phantom)
    test = make_cases(range(seed + TEST_SEED_OFFSET, seed + TEST_SEED_OFFSET + settings.test_cases),
                      settings.phantom)
    config = config.updated(views=list(AXES), model_dir=str(model_dir))
    for view in AXES:
        t0 = time.perf_counter()
        train_view(config, train, view, model_dir)
        log.info("trained %s in %.1fs", view, time.perf_counter() - t0)

    models = load_models(config)
    scores = {name: {r: [] for r in REGIONS} for name in (*AXES, "fused")}
    th, steps = config.thresholds(), config.postprocess.steps
    for case in test:
        result = segment_volume(case.volume, config, models)
        finals = {v: postprocess(result.views[v], result.normalized, th, steps) for v in AXES}
        finals["fused"] = result.final
        for name, labels in finals.items():
            save_labels(labels, label_dir / f"{case.name}_{name}.mmv")
            for region, entry in score_report(labels, case.labels).items():
                scores[name][region].append(entry.dice)
    runtime = time.perf_counter() - start

    dice = {name: {r: float(np.mean(v)) for r, v in regions.items()}
            for name, regions in scores.items()}
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*.mmv")) + sorted(
        str(p.relative_to(out)) for p in model_dir.glob("*.fcnn")) + sorted(
        str(p.relative_to(out)) for p in model_dir.glob("*.crf"))
    report = {"dice": dice, "runtime_seconds": runtime, "settings": {
        "train_cases": settings.train_cases, "test_cases": settings.test_cases,
        "seed": settings.seed, "primary_view": settings.primary_view},
        "config": config.to_json()}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return BenchmarkResult(dice, runtime, files, settings.primary_view)


def summary_lines(result: BenchmarkResult) -> list[str]:
    lines = []
    for name, regions in result.dice.items():
        parts = ", ".join(f"{r} {d:.3f}" for r, d in regions.items())
        lines.append(f"{name:9s} {parts}")
    lines.append(f"runtime   {result.runtime:.1f}s")
    return lines
