"""Stem-variant ablation: synthesise data, train every (variant, seed) cell, compare macro-F.

Cells run in a process pool or as Celery tasks. Results are always merged in
(variant, seed) order, so the written tables do not depend on the executor.
"""
import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field

from . import data, train
from .config import settings
from .evaluate import summarize_runs
from .schemas import MetricsReport, QualityLabel, RunSummary, StemVariant, SyntheticParams, TrainConfig

logger = logging.getLogger(__name__)

# dark_bright must beat baseline macro-F by at least this much
MIN_GAIN = 0.01
TABLE_COLUMNS = ["variant", "seed", "accuracy", "precision", "recall", "f"]


class AblationPlan(BaseModel):
    variants: list[StemVariant] = Field(default_factory=lambda: list(StemVariant))
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    epochs: int = Field(15, ge=1)
    batch_size: int = Field(8, ge=2)
    train_count: int = Field(600, ge=3)
    test_count: int = Field(300, ge=3)
    image_size: int = Field(128, ge=32, multiple_of=2)
    data_seed: int = Field(0, ge=0)

    def train_config(self, variant: StemVariant, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_decay_epoch=min(10, self.epochs),
            seed=seed,
            variant=StemVariant(variant),
        )


class AblationCell(BaseModel):
    variant: StemVariant
    seed: int
    report: MetricsReport


class DirectionCheck(BaseModel):
    gain: float
    dark_bright_ok: bool
    dark_only_ok: bool
    bright_only_ok: bool

    @property
    def holds(self) -> bool:
        return self.dark_bright_ok and self.dark_only_ok and self.bright_only_ok


class AblationResult(BaseModel):
    cells: list[AblationCell]
    summaries: dict[StemVariant, RunSummary]
    direction: DirectionCheck | None = None


def _split_counts(total: int) -> dict[QualityLabel, int]:
    per, extra = divmod(total, len(QualityLabel))
    return {label: per + (1 if int(label) < extra else 0) for label in QualityLabel}


def prepare_data(out_dir, plan: AblationPlan) -> tuple[Path, Path]:
    """Write the shared train and test sets; train and test use disjoint seed streams."""
    out_dir = Path(out_dir)
    params = SyntheticParams(image_size=plan.image_size)
    train_root, test_root = out_dir / "train", out_dir / "test"
    data.generate_dataset(train_root, _split_counts(plan.train_count), 2 * plan.data_seed, params)
    data.generate_dataset(test_root, _split_counts(plan.test_count), 2 * plan.data_seed + 1, params)
    return train_root, test_root


def run_cell(variant: str, seed: int, plan: AblationPlan, train_root, test_root) -> dict:
    cfg = plan.train_config(StemVariant(variant), seed)
    train_manifest = data.load_manifest(Path(train_root) / data.MANIFEST_NAME)
    test_manifest = data.load_manifest(Path(test_root) / data.MANIFEST_NAME)
    checkpoint, _ = train.train(cfg, train_manifest, train_root)
    report = train.evaluate_model(checkpoint, test_manifest, test_root, cfg.network, cfg.eval_batch_size)
    logger.info("cell %s seed %d: accuracy %.4f macro-F %.4f", cfg.variant.value, seed,
                report.accuracy, report.macro.f)
    return report.model_dump(mode="json")


def _run_cells(jobs: list[tuple[str, int]], plan: AblationPlan, train_root: Path, test_root: Path,
               executor: str, workers: int) -> list[dict]:
    roots = (str(train_root), str(test_root))
    if executor == "celery":
        from .tasks import run_ablation_cell

        pending = [run_ablation_cell.delay(v, s, plan.model_dump(mode="json"), *roots) for v, s in jobs]
        return [p.get() for p in pending]
    if workers <= 1:
        return [run_cell(v, s, plan, *roots) for v, s in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, v, s, plan, *roots) for v, s in jobs]
        return [f.result() for f in futures]


def check_direction(summaries: dict[StemVariant, RunSummary]) -> DirectionCheck | None:
    if not set(StemVariant) <= set(summaries):
        return None
    base = summaries[StemVariant.BASELINE].f
    gain = summaries[StemVariant.DARK_BRIGHT].f - base
    return DirectionCheck(
        gain=gain,
        dark_bright_ok=gain >= MIN_GAIN,
        dark_only_ok=summaries[StemVariant.DARK_ONLY].f >= base,
        bright_only_ok=summaries[StemVariant.BRIGHT_ONLY].f >= base,
    )


def run_ablation(out_dir, plan: AblationPlan | None = None, executor: Literal["process", "celery"] | None = None,
                 workers: int | None = None) -> AblationResult:
    plan = plan or AblationPlan()
    executor = executor or settings.ablation_executor
    workers = settings.workers if workers is None else workers
    out_dir = Path(out_dir)
    train_root, test_root = prepare_data(out_dir / "data", plan)

    jobs = [(v.value, s) for v in plan.variants for s in plan.seeds]
    logger.info("running %d ablation cells (%s executor, %d workers)", len(jobs), executor, workers)
    reports = _run_cells(jobs, plan, train_root, test_root, executor, workers)

    cells = [
        AblationCell(variant=StemVariant(v), seed=s, report=MetricsReport.model_validate(r))
        for (v, s), r in zip(jobs, reports)
    ]
    summaries = {
        v: summarize_runs([c.report for c in cells if c.variant == v]) for v in plan.variants
    }
    result = AblationResult(cells=cells, summaries=summaries, direction=check_direction(summaries))
    write_ablation_table(result, out_dir / "ablation.csv")
    write_ablation_json(result, out_dir / "ablation.json")
    return result


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def write_ablation_table(result: AblationResult, path) -> None:
    """One row per (variant, seed), then mean and std rows per variant."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for variant in result.summaries:
            cells = [c for c in result.cells if c.variant == variant]
            rows = []
            for c in cells:
                r = c.report
                row = [r.accuracy, r.macro.precision, r.macro.recall, r.macro.f]
                rows.append(row)
                writer.writerow([variant.value, c.seed, *map(_fmt, row)])
            values = np.array(rows)
            std = values.std(axis=0, ddof=1) if len(rows) > 1 else np.zeros(values.shape[1])
            writer.writerow([variant.value, "mean", *map(_fmt, values.mean(axis=0))])
            writer.writerow([variant.value, "std", *map(_fmt, std)])


def write_ablation_json(result: AblationResult, path) -> None:
    payload = {
        "cells": [c.model_dump(mode="json") for c in result.cells],
        "summary": {v.value: s.model_dump(mode="json") for v, s in result.summaries.items()},
        "direction": None if result.direction is None else {
            **result.direction.model_dump(mode="json"), "holds": result.direction.holds,
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def format_summary(result: AblationResult) -> str:
    lines = [f"{'variant':<12} {'runs':>4} {'accuracy':>9} {'macro-F':>9} {'F-std':>9}"]
    for variant, s in result.summaries.items():
        lines.append(f"{variant.value:<12} {len(s.runs):>4} {s.accuracy:>9.4f} {s.f:>9.4f} {s.f_std:>9.4f}")
    d = result.direction
    if d is not None:
        lines.append("")
        lines.append(f"dark_bright - baseline = {d.gain:+.4f} (needs >= {MIN_GAIN}); "
                     f"direction {'holds' if d.holds else 'does not hold'}")
    return "\n".join(lines) + "\n"
